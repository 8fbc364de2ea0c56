//! Posterior predictive draws at station locations.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Model, ObsKey, PosteriorSamples};
use crate::error::{Error, Result};
use crate::spatial::{tensor_eval_sparse, StationData};
use crate::spectral::SpectralLayers;
use crate::stats::{equal_tailed_interval, moments, sort_floats};

/// Predictive draws for every `(station, time)` pair, missing or not.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub keys: Vec<ObsKey>,
    /// `draws[k]` holds the draws for `keys[k]`.
    pub draws: Vec<Vec<f64>>,
}

/// Per-observation summaries of the predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveSummary {
    pub key: ObsKey,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    /// Pearson kurtosis, 3 for a normal.
    pub kurtosis: f64,
    pub lower: f64,
    pub upper: f64,
}

impl PredictiveDraws {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn means(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect()
    }

    /// Moments and the equal-tailed interval at `level`.
    pub fn summary(&self, level: f64) -> Vec<PredictiveSummary> {
        self.keys
            .iter()
            .zip(&self.draws)
            .map(|(&key, d)| {
                let m = moments(d);
                let mut sorted = d.clone();
                sort_floats(&mut sorted);
                let (lower, upper) = equal_tailed_interval(&sorted, level);
                PredictiveSummary {
                    key,
                    mean: m.mean,
                    sd: m.sd,
                    skewness: m.skewness,
                    kurtosis: m.kurtosis,
                    lower,
                    upper,
                }
            })
            .collect()
    }
}

/// For each kept state, `draws_per_state` values of
/// `y* ~ N(b0 + B(s) b + Σ_l β_l X̃_lt(w̃(s)), σ²)`.
pub fn posterior_predict<R: Rng + ?Sized>(
    model: &Model,
    samples: &PosteriorSamples,
    layers: &SpectralLayers,
    stations: &StationData,
    times: &[usize],
    draws_per_state: usize,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    if samples.is_empty() {
        return Err(Error::usage("no posterior samples to predict from"));
    }
    if draws_per_state == 0 {
        return Err(Error::usage("draws_per_state must be positive"));
    }
    if times.is_empty() {
        return Err(Error::usage("no prediction times"));
    }
    if layers.n_layers() != model.dims().n_layers {
        return Err(Error::usage("layer count does not match the model"));
    }
    for &t in times {
        if t >= layers.n_times() {
            return Err(Error::usage(format!("time index {t} not covered by the forecast")));
        }
    }
    let grid = layers.grid();
    let n_st = stations.n_stations();
    let keys: Vec<ObsKey> =
        times.iter().flat_map(|&t| (0..n_st).map(move |station| ObsKey { station, time: t })).collect();
    let total = samples.len() * draws_per_state;
    let mut draws = vec![Vec::with_capacity(total); keys.len()];

    let basis: Vec<Vec<(usize, f64)>> = match model.intercept_bases() {
        Some((bx, by)) => {
            stations.locations().iter().map(|&s| tensor_eval_sparse(bx, by, s)).collect::<Result<_>>()?
        }
        None => vec![Vec::new(); n_st],
    };
    let mut x = vec![0.0; model.dims().n_layers];
    for state in &samples.states {
        let warp = model.warp_field(state)?;
        let sd = state.sigma2.sqrt();
        let cells: Vec<usize> = stations
            .locations()
            .iter()
            .map(|&s| grid.flat_index(grid.nearest_cell(warp.as_ref().map_or(s, |w| w.eval(s)))))
            .collect();
        let intercepts: Vec<f64> =
            basis.iter().map(|row| state.b0 + row.iter().map(|&(k, w)| w * state.b[k]).sum::<f64>()).collect();
        for (out, key) in draws.iter_mut().zip(&keys) {
            layers.covariates_into(key.time, cells[key.station], &mut x);
            let mu = intercepts[key.station] + x.iter().zip(&state.beta).map(|(a, b)| a * b).sum::<f64>();
            for _ in 0..draws_per_state {
                out.push(mu + sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    Ok(PredictiveDraws { keys, draws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{ModelConfig, ModelState, Variant};
    use crate::spatial::{Grid, UnitPoint};
    use crate::spectral::{build_layers, GriddedField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model, SpectralLayers, StationData) {
        let grid = Grid::unit(6, 5).unwrap();
        let field = GriddedField::new(grid, 2, (0..60).map(|v| (v % 7) as f64).collect()).unwrap();
        let cfg = ModelConfig { intercept_basis: [4, 4], warp_basis: [4, 4], n_layers: 2, ..Default::default() };
        let model = Model::new(&cfg, Variant::Full).unwrap();
        let layers = build_layers(&field, 2).unwrap();
        let st = StationData::new(
            vec!["a".into(), "b".into()],
            vec![UnitPoint { s1: 0.2, s2: 0.3 }, UnitPoint { s1: 0.7, s2: 0.9 }],
            2,
            vec![Some(1.0), None, Some(2.0), Some(0.5)],
        )
        .unwrap();
        (model, layers, st)
    }

    fn samples(model: &Model, states: Vec<ModelState>) -> PosteriorSamples {
        PosteriorSamples {
            variant: model.variant(),
            dims: *model.dims(),
            states,
            station_displacements: Vec::new(),
            acceptance: Vec::new(),
        }
    }

    fn plug_in(model: &Model, layers: &SpectralLayers, st: &StationData, s: &ModelState, key: ObsKey) -> f64 {
        let loc = st.locations()[key.station];
        let w = model.warp_field(s).unwrap().unwrap();
        let cell = layers.grid().nearest_cell(w.eval(loc));
        let (bx, by) = model.intercept_bases().unwrap();
        let ax = bx.eval(loc.s1).unwrap();
        let ay = by.eval(loc.s2).unwrap();
        let mut mu = s.b0;
        for j in 0..4 {
            for k in 0..4 {
                mu += ax[j] * ay[k] * s.b[j * 4 + k];
            }
        }
        for l in 0..2 {
            mu += s.beta[l] * layers.get(l, key.time, cell);
        }
        mu
    }

    fn state(model: &Model, shift: f64, sigma2: f64) -> ModelState {
        let mut s = ModelState::initial(model.dims());
        s.b0 = 1.0 + shift;
        s.b.iter_mut().enumerate().for_each(|(k, v)| *v = 0.05 * k as f64);
        s.a.iter_mut().enumerate().for_each(|(k, v)| *v = 0.01 * (k % 5) as f64 - shift);
        s.beta = vec![0.5, -0.2 + shift];
        s.sigma2 = sigma2;
        s
    }

    #[test]
    fn zero_noise_gives_plug_in_mean() {
        let (model, layers, st) = setup();
        let s = state(&model, 0.1, 1e-30);
        let post = samples(&model, vec![s.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = posterior_predict(&model, &post, &layers, &st, &[0, 1], 3, &mut rng).unwrap();
        assert_eq!(d.len(), 4);
        for (key, draws) in d.keys.iter().zip(&d.draws) {
            let mu = plug_in(&model, &layers, &st, &s, *key);
            assert!(draws.iter().all(|v| (v - mu).abs() < 1e-12));
        }
    }

    #[test]
    fn single_state_sd_is_sigma() {
        let (model, layers, st) = setup();
        let post = samples(&model, vec![state(&model, 0.0, 0.64)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = posterior_predict(&model, &post, &layers, &st, &[1], 200_000, &mut rng).unwrap();
        for s in d.summary(0.95) {
            assert!((s.sd - 0.8).abs() < 0.005, "{}", s.sd);
            assert!((s.kurtosis - 3.0).abs() < 0.05);
            assert!((s.upper - s.lower - 2.0 * 1.959964 * 0.8).abs() < 0.03);
        }
    }

    #[test]
    fn mixture_moments() {
        let (model, layers, st) = setup();
        let comps = [state(&model, 0.0, 0.5), state(&model, 0.4, 1.0), state(&model, -0.3, 2.0)];
        let reps = 40_000;
        let states: Vec<ModelState> = (0..3 * reps).map(|k| comps[k % 3].clone()).collect();
        let post = samples(&model, states);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = posterior_predict(&model, &post, &layers, &st, &[0, 1], 1, &mut rng).unwrap();
        for (sum, key) in d.summary(0.9).iter().zip(&d.keys) {
            let mus: Vec<f64> = comps.iter().map(|c| plug_in(&model, &layers, &st, c, *key)).collect();
            let mean = mus.iter().sum::<f64>() / 3.0;
            let m2 = comps.iter().zip(&mus).map(|(c, m)| c.sigma2 + m * m).sum::<f64>() / 3.0;
            let m3 = comps.iter().zip(&mus).map(|(c, m)| m.powi(3) + 3.0 * m * c.sigma2).sum::<f64>() / 3.0;
            let var = m2 - mean * mean;
            let third = m3 - 3.0 * mean * m2 + 2.0 * mean.powi(3);
            let skew = third / var.powf(1.5);
            let n = (3 * reps) as f64;
            assert!((sum.mean - mean).abs() < 4.0 * (var / n).sqrt(), "{} vs {mean}", sum.mean);
            assert!((sum.sd * sum.sd / var - 1.0).abs() < 0.02);
            assert!((sum.skewness - skew).abs() < 0.05, "{} vs {skew}", sum.skewness);
        }
    }

    #[test]
    fn out_of_range_time_is_usage_error() {
        let (model, layers, st) = setup();
        let post = samples(&model, vec![state(&model, 0.0, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = posterior_predict(&model, &post, &layers, &st, &[2], 1, &mut rng);
        assert!(matches!(r, Err(Error::Usage(_))));
        let r = posterior_predict(&model, &post, &layers, &st, &[], 1, &mut rng);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
