//! Replicated simulation study: generate, fit, predict and score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

use super::plume::{synthetic_plume_with, PlumeConfig};
use super::scenario::{generate, Generation, GroundTruth, Scenario};
use super::score::{score, ScoreReport};
use crate::error::{Error, Result};
use crate::inference::{fit_with_layers, posterior_predict, Model, ModelConfig, PosteriorSamples, Variant};
use crate::spatial::{Grid, StationData, UnitPoint};
use crate::spectral::GriddedField;
use crate::warp::AnalyticWarp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_times: usize,
    /// Leading fraction of timesteps used for fitting; the rest is held out.
    pub train_fraction: f64,
    pub level: f64,
    pub seed: u64,
    /// Pick basis sizes from the station count instead of `model`.
    pub match_basis_to_stations: bool,
    /// Predictive draws per kept posterior state.
    pub draws_per_state: usize,
    pub plume: PlumeConfig,
    pub model: ModelConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            nx: 64,
            ny: 48,
            n_times: 10,
            train_fraction: 0.6,
            level: 0.95,
            seed: 1,
            match_basis_to_stations: true,
            draws_per_state: 1,
            plume: PlumeConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws_per_state == 0 {
            return Err(Error::config("draws_per_state must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config("level must lie in (0, 1)"));
        }
        Grid::unit(self.nx, self.ny)?;
        split_times(self.n_times, self.train_fraction)?;
        self.plume.validate()?;
        self.model.validate()
    }

    /// Model settings for a fit with `n_stations` stations.
    pub fn model_for(&self, n_stations: usize, seed: u64) -> ModelConfig {
        let mut m = self.model;
        if self.match_basis_to_stations {
            let basis = ModelConfig::basis_for_station_count(n_stations);
            m.intercept_basis = basis;
            m.warp_basis = basis;
        }
        m.seed = seed;
        m
    }
}

/// Leading `round(train_fraction · n_times)` timesteps for training, the
/// rest for testing. Both parts must be nonempty.
pub fn split_times(n_times: usize, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (train_fraction * n_times as f64).round() as usize;
    if n_train == 0 {
        return Err(Error::config("the training range is empty"));
    }
    if n_train >= n_times {
        return Err(Error::config("the test range is empty"));
    }
    Ok(((0..n_train).collect(), (n_train..n_times).collect()))
}

/// Mixes a base seed with labels into an independent stream seed.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut z = base;
    for &l in labels {
        z = splitmix(z ^ splitmix(l.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    splitmix(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One generated replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario: Scenario,
    pub forecast: GriddedField,
    pub stations: StationData,
    pub truth: GroundTruth,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn generation_label(g: Generation) -> u64 {
    Generation::ALL.iter().position(|&x| x == g).unwrap_or_default() as u64
}

fn variant_label(v: Variant) -> u64 {
    Variant::ALL.iter().position(|&x| x == v).unwrap_or_default() as u64
}

/// Builds replicate `replicate` of `scenario`; seeds come from the study
/// seed, the scenario kind, the station count and the replicate index.
pub fn prepare_dataset(scenario: &Scenario, config: &StudyConfig, replicate: usize) -> Result<Dataset> {
    let key = [generation_label(scenario.generation), scenario.n_stations as u64, replicate as u64];
    let grid = Grid::unit(config.nx, config.ny)?;
    let forecast = synthetic_plume_with(grid, config.n_times, &config.plume, derive_seed(config.seed, &[key[0], key[1], key[2], 1]))?;
    let scenario = Scenario { seed: derive_seed(config.seed, &[key[0], key[1], key[2], 2]), ..scenario.clone() };
    let (stations, truth) = generate(&scenario, &forecast)?;
    let (train, test) = split_times(config.n_times, config.train_fraction)?;
    Ok(Dataset { scenario, forecast, stations, truth, train, test })
}

/// Fit on the training times, predict and score the test times.
pub fn fit_and_score(
    dataset: &Dataset,
    variant: Variant,
    config: &StudyConfig,
) -> Result<(Model, PosteriorSamples, ScoreReport)> {
    let fit_seed = derive_seed(dataset.scenario.seed, &[variant_label(variant), 3]);
    let model = Model::new(&config.model_for(dataset.stations.n_stations(), fit_seed), variant)?;
    let layers = model.layers_for(&dataset.forecast)?;
    let samples = fit_with_layers(&model, &layers, &dataset.stations, &dataset.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fit_seed, &[4]));
    let pred = posterior_predict(&model, &samples, &layers, &dataset.stations, &dataset.test, config.draws_per_state, &mut rng)?;
    let y: Vec<Option<f64>> = pred.keys.iter().map(|k| dataset.stations.value(k.time, k.station)).collect();
    let report = score(&pred.draws, &y, config.level)?;
    Ok((model, samples, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Mad,
    Coverage,
    Crps,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mse, Metric::Mad, Metric::Coverage, Metric::Crps];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mad => "mad",
            Metric::Coverage => "coverage",
            Metric::Crps => "crps",
        }
    }

    pub fn of(&self, s: &Scores) -> f64 {
        match self {
            Metric::Mse => s.mse,
            Metric::Mad => s.mad,
            Metric::Coverage => s.coverage,
            Metric::Crps => s.crps,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mse: f64,
    pub mad: f64,
    pub coverage: f64,
    pub crps: f64,
    pub n_scored: usize,
}

impl From<&ScoreReport> for Scores {
    fn from(r: &ScoreReport) -> Self {
        Scores { mse: r.mse, mad: r.mad, coverage: r.coverage, crps: r.crps, n_scored: r.n_scored }
    }
}

/// Outcome of one (scenario, replicate, variant) fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub scenario: Generation,
    pub n_stations: usize,
    pub replicate: usize,
    pub variant: Variant,
    pub outcome: std::result::Result<Scores, String>,
}

/// Mean and standard error of one metric over the successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: Generation,
    pub n: usize,
    pub variant: Variant,
    pub metric: Metric,
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub cells: Vec<StudyCell>,
}

/// Fits every variant to every replicate of every scenario. Failed fits
/// are recorded in their cell and excluded from the aggregates.
pub fn run_study(
    scenarios: &[Scenario],
    variants: &[Variant],
    replicates: usize,
    config: &StudyConfig,
) -> Result<StudyResult> {
    if replicates == 0 {
        return Err(Error::config("at least one replicate is required"));
    }
    if scenarios.is_empty() || variants.is_empty() {
        return Err(Error::config("the study needs at least one scenario and one variant"));
    }
    config.validate()?;
    for s in scenarios {
        s.validate()?;
    }
    let jobs: Vec<(&Scenario, usize)> =
        scenarios.iter().flat_map(|s| (0..replicates).map(move |r| (s, r))).collect();
    let cells: Vec<StudyCell> = jobs
        .par_iter()
        .flat_map_iter(|&(scenario, replicate)| {
            let dataset = prepare_dataset(scenario, config, replicate);
            variants
                .iter()
                .map(|&variant| {
                    let outcome = match &dataset {
                        Ok(d) => fit_and_score(d, variant, config).map(|(_, _, r)| Scores::from(&r)),
                        Err(e) => Err(Error::config(e.to_string())),
                    }
                    .map_err(|e| e.to_string());
                    StudyCell {
                        scenario: scenario.generation,
                        n_stations: scenario.n_stations,
                        replicate,
                        variant,
                        outcome,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(StudyResult { rows: aggregate(&cells), cells })
}

/// Table rows ordered by scenario, station count, variant and metric.
/// The result does not depend on the order of `cells`.
pub fn aggregate(cells: &[StudyCell]) -> Vec<StudyRow> {
    let mut keys: Vec<(Generation, usize, Variant)> =
        cells.iter().map(|c| (c.scenario, c.n_stations, c.variant)).collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::new();
    for (scenario, n, variant) in keys {
        let group: Vec<&StudyCell> =
            cells.iter().filter(|c| (c.scenario, c.n_stations, c.variant) == (scenario, n, variant)).collect();
        let ok: Vec<&Scores> = group.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
        let failed = group.len() - ok.len();
        for metric in Metric::ALL {
            let mut v: Vec<f64> = ok.iter().map(|s| metric.of(s)).collect();
            crate::stats::sort_floats(&mut v);
            let k = v.len() as f64;
            let (mean, se) = if v.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let mean = v.iter().sum::<f64>() / k;
                let se = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
                } else {
                    0.0
                };
                (mean, se)
            };
            rows.push(StudyRow { scenario, n, variant, metric, mean, se, replicates: v.len(), failed });
        }
    }
    rows
}

/// Posterior-mean and true displacement averaged over grid cell centers
/// whose true source location carries a time-averaged forecast above
/// `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionDisplacement {
    pub estimated: [f64; 2],
    pub truth: [f64; 2],
    pub n_points: usize,
}

pub fn region_displacement(
    model: &Model,
    samples: &PosteriorSamples,
    forecast: &GriddedField,
    times: &[usize],
    truth: &AnalyticWarp,
    threshold: f64,
) -> Result<RegionDisplacement> {
    let grid = forecast.grid();
    if times.is_empty() {
        return Err(Error::usage("no timesteps to average over"));
    }
    let points: Vec<UnitPoint> = (0..grid.cell_count())
        .map(|k| grid.cell_center(grid.cell_from_flat(k)))
        .filter(|&s| {
            let cell = grid.nearest_cell(truth.eval(s));
            times.iter().map(|&t| forecast.get(t, cell)).sum::<f64>() / times.len() as f64 > threshold
        })
        .collect();
    if points.is_empty() {
        return Err(Error::usage("no grid points above the activity threshold"));
    }
    let est = samples.mean_displacement(model, &points)?;
    let n = points.len() as f64;
    let mut estimated = [0.0; 2];
    let mut true_mean = [0.0; 2];
    for (p, e) in points.iter().zip(&est) {
        let q = truth.eval(*p);
        estimated[0] += e[0] / n;
        estimated[1] += e[1] / n;
        true_mean[0] += (q.s1 - p.s1) / n;
        true_mean[1] += (q.s2 - p.s2) / n;
    }
    Ok(RegionDisplacement { estimated, truth: true_mean, n_points: points.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> StudyConfig {
        StudyConfig {
            nx: 16,
            ny: 12,
            n_times: 5,
            model: ModelConfig { n_iter: 300, n_burn: 150, n_layers: 4, ..Default::default() },
            draws_per_state: 4,
            ..Default::default()
        }
    }

    #[test]
    fn split_examples() {
        let (train, test) = split_times(24, 0.75).unwrap();
        assert_eq!((train.len(), test.len()), (18, 6));
        assert_eq!(test[0], 18);
        let (train, test) = split_times(5, 0.6).unwrap();
        assert_eq!((train, test), (vec![0, 1, 2], vec![3, 4]));
        assert!(split_times(4, 1.0).is_err());
        assert!(split_times(4, 0.0).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 50, 0]);
        assert_eq!(a, derive_seed(1, &[0, 50, 0]));
        assert_ne!(a, derive_seed(1, &[0, 50, 1]));
        assert_ne!(a, derive_seed(2, &[0, 50, 0]));
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(1, &[0, 1]));
    }

    #[test]
    fn one_replicate_gives_a_row_per_variant_and_metric() {
        let cfg = tiny_config();
        let scen = Scenario::new(Generation::Slr, 20, 0);
        let result = run_study(&[scen], &Variant::ALL, 1, &cfg).unwrap();
        assert_eq!(result.cells.len(), 4);
        assert_eq!(result.rows.len(), 16);
        for row in &result.rows {
            assert_eq!((row.replicates, row.failed), (1, 0), "{row:?}");
            assert!(row.mean.is_finite());
        }
        let again = run_study(&[Scenario::new(Generation::Slr, 20, 0)], &Variant::ALL, 1, &cfg).unwrap();
        assert_eq!(result, again);
    }

    #[test]
    fn aggregation_is_order_free() {
        let mk = |r: usize, v: Variant, x: f64| StudyCell {
            scenario: Generation::Slr,
            n_stations: 25,
            replicate: r,
            variant: v,
            outcome: Ok(Scores { mse: x, mad: x.sqrt(), coverage: 0.9, crps: 0.1 * x, n_scored: 10 }),
        };
        let mut cells = vec![
            mk(0, Variant::Slr, 1.1),
            mk(1, Variant::Slr, 0.3),
            mk(2, Variant::Slr, 1e-9),
            mk(0, Variant::Full, 0.7),
            StudyCell { outcome: Err("boom".into()), ..mk(1, Variant::Full, 0.0) },
        ];
        let a = aggregate(&cells);
        cells.reverse();
        cells.swap(0, 3);
        assert_eq!(a, aggregate(&cells));
        let full_mse = a.iter().find(|r| r.variant == Variant::Full && r.metric == Metric::Mse).unwrap();
        assert_eq!((full_mse.replicates, full_mse.failed, full_mse.se), (1, 1, 0.0));
        assert_eq!(a[0].variant, Variant::Slr);
    }

    #[test]
    fn failed_fits_do_not_abort() {
        let mut cfg = tiny_config();
        cfg.train_fraction = 0.6;
        // more stations than cells fails generation but not the study
        let scen = Scenario::new(Generation::Slr, 16 * 12 + 1, 0);
        let result = run_study(&[scen], &[Variant::Slr], 2, &cfg).unwrap();
        assert!(result.cells.iter().all(|c| c.outcome.is_err()));
        assert!(result.rows.iter().all(|r| r.failed == 2 && r.replicates == 0));
    }

    #[test]
    fn zero_test_points_is_error() {
        let cfg = StudyConfig { n_times: 3, train_fraction: 1.0, ..tiny_config() };
        assert!(run_study(&[Scenario::default()], &[Variant::Slr], 1, &cfg).is_err());
        assert!(run_study(&[Scenario::default()], &[Variant::Slr], 0, &tiny_config()).is_err());
    }
}
