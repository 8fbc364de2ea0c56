//! Data-generating processes for the simulation study.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spatial::{Cell, StationData};
use crate::spectral::{build_layers, GriddedField};
use crate::warp::AnalyticWarp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Generation {
    #[serde(rename = "slr")]
    Slr,
    #[serde(rename = "smoothed")]
    Smoothed,
    #[serde(rename = "translation+smoothed")]
    TranslationSmoothed,
    #[serde(rename = "diffeo+smoothed")]
    DiffeoSmoothed,
}

impl Generation {
    pub const ALL: [Generation; 4] =
        [Generation::Slr, Generation::Smoothed, Generation::TranslationSmoothed, Generation::DiffeoSmoothed];

    pub fn name(&self) -> &'static str {
        match self {
            Generation::Slr => "slr",
            Generation::Smoothed => "smoothed",
            Generation::TranslationSmoothed => "translation+smoothed",
            Generation::DiffeoSmoothed => "diffeo+smoothed",
        }
    }
}

impl fmt::Display for Generation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Generation::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub generation: Generation,
    pub n_stations: usize,
    /// Layers used to build the generating covariate.
    pub n_layers: usize,
    pub beta0: f64,
    /// Forecast coefficient of the unsmoothed process.
    pub beta1: f64,
    /// Mean and standard deviation of the layer coefficients, which are
    /// drawn and then sorted in decreasing order.
    pub layer_mean: f64,
    pub layer_sd: f64,
    /// Fixed layer coefficients instead of random ones.
    pub layer_coefficients: Option<Vec<f64>>,
    pub noise_sd: f64,
    pub translation: [f64; 2],
    pub theta: [f64; 2],
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            generation: Generation::Slr,
            n_stations: 50,
            n_layers: 10,
            beta0: 1.5,
            beta1: 0.25,
            layer_mean: 0.25,
            layer_sd: 0.25,
            layer_coefficients: None,
            noise_sd: 1.0,
            translation: [0.16, 0.16],
            theta: [0.1, 0.5],
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn new(generation: Generation, n_stations: usize, seed: u64) -> Self {
        Scenario { generation, n_stations, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.n_layers == 0 {
            return Err(Error::config("scenario needs at least one station and one layer"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite() && self.layer_sd >= 0.0) {
            return Err(Error::config("scenario standard deviations must be nonnegative"));
        }
        if let Some(c) = &self.layer_coefficients {
            if c.len() != self.n_layers {
                return Err(Error::config(format!(
                    "{} layer coefficients given for {} layers",
                    c.len(),
                    self.n_layers
                )));
            }
        }
        Ok(())
    }

    /// The warp applied to station locations before reading the covariate.
    pub fn warp(&self) -> AnalyticWarp {
        match self.generation {
            Generation::TranslationSmoothed => {
                AnalyticWarp::Translation { dx: self.translation[0], dy: self.translation[1] }
            }
            Generation::DiffeoSmoothed => AnalyticWarp::Diffeomorphism { theta1: self.theta[0], theta2: self.theta[1] },
            Generation::Slr | Generation::Smoothed => AnalyticWarp::Identity,
        }
    }
}

/// What generated a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub generation: Generation,
    pub warp: AnalyticWarp,
    pub beta0: f64,
    /// `[β1]` for the unsmoothed process, else the layer coefficients.
    pub coefficients: Vec<f64>,
    pub noise_sd: f64,
    pub station_cells: Vec<Cell>,
    /// Noise-free mean per `(time, station)`, time-major.
    pub signal: Vec<f64>,
}

/// Stations at distinct random cell centers, observed at every timestep.
pub fn generate(scenario: &Scenario, forecast: &GriddedField) -> Result<(StationData, GroundTruth)> {
    scenario.validate()?;
    let grid = *forecast.grid();
    if scenario.n_stations > grid.cell_count() {
        return Err(Error::config(format!(
            "{} stations requested on a grid of {} cells",
            scenario.n_stations,
            grid.cell_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let cells: Vec<Cell> =
        sample(&mut rng, grid.cell_count(), scenario.n_stations).into_iter().map(|k| grid.cell_from_flat(k)).collect();
    let locations: Vec<_> = cells.iter().map(|&c| grid.cell_center(c)).collect();

    let (coefficients, layers) = match scenario.generation {
        Generation::Slr => (vec![scenario.beta1], None),
        _ => {
            let coefs = match &scenario.layer_coefficients {
                Some(c) => c.clone(),
                None => {
                    let normal = Normal::new(scenario.layer_mean, scenario.layer_sd)
                        .map_err(|e| Error::config(format!("layer coefficient distribution: {e}")))?;
                    let mut c: Vec<f64> = (0..scenario.n_layers).map(|_| normal.sample(&mut rng)).collect();
                    c.sort_by(|a, b| b.total_cmp(a));
                    c
                }
            };
            (coefs, Some(build_layers(forecast, scenario.n_layers)?))
        }
    };
    let warp = scenario.warp();
    let source: Vec<usize> =
        locations.iter().map(|&s| grid.flat_index(grid.nearest_cell(warp.eval(s)))).collect();

    let noise = Normal::new(0.0, scenario.noise_sd).map_err(|e| Error::config(format!("noise: {e}")))?;
    let n_times = forecast.n_times();
    let mut signal = Vec::with_capacity(n_times * cells.len());
    let mut values = Vec::with_capacity(n_times * cells.len());
    let mut x = vec![0.0; coefficients.len()];
    for t in 0..n_times {
        for &cell in &source {
            let mean = match &layers {
                None => scenario.beta0 + scenario.beta1 * forecast.get(t, grid.cell_from_flat(cell)),
                Some(layers) => {
                    layers.covariates_into(t, cell, &mut x);
                    scenario.beta0 + x.iter().zip(&coefficients).map(|(a, b)| a * b).sum::<f64>()
                }
            };
            signal.push(mean);
            values.push(Some(mean + noise.sample(&mut rng)));
        }
    }
    let ids = (0..cells.len()).map(|i| format!("S{:03}", i + 1)).collect();
    let stations = StationData::new(ids, locations, n_times, values)?;
    let truth = GroundTruth {
        generation: scenario.generation,
        warp,
        beta0: scenario.beta0,
        coefficients,
        noise_sd: scenario.noise_sd,
        station_cells: cells,
        signal,
    };
    Ok((stations, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::synthetic_plume;
    use crate::spatial::{Grid, UnitPoint};
    use std::collections::HashSet;

    fn forecast() -> GriddedField {
        synthetic_plume(Grid::unit(24, 18).unwrap(), 4, 3).unwrap()
    }

    #[test]
    fn defaults_match_the_study_design() {
        let s = Scenario::default();
        assert_eq!((s.beta0, s.beta1, s.n_layers, s.noise_sd), (1.5, 0.25, 10, 1.0));
        assert_eq!((s.layer_mean, s.layer_sd * s.layer_sd), (0.25, 0.0625));
        assert_eq!(s.translation, [0.16, 0.16]);
        assert_eq!(s.theta, [0.1, 0.5]);
    }

    #[test]
    fn noiseless_slr_is_exact() {
        let f = forecast();
        let sc = Scenario { noise_sd: 0.0, ..Scenario::new(Generation::Slr, 30, 5) };
        let (st, truth) = generate(&sc, &f).unwrap();
        for t in 0..4 {
            for (i, cell) in truth.station_cells.iter().enumerate() {
                assert_eq!(st.value(t, i).unwrap(), 1.5 + 0.25 * f.get(t, *cell));
            }
        }
    }

    #[test]
    fn translation_reads_shifted_cell() {
        let f = forecast();
        let sc = Scenario { noise_sd: 0.0, ..Scenario::new(Generation::TranslationSmoothed, 40, 6) };
        let (st, truth) = generate(&sc, &f).unwrap();
        let layers = build_layers(&f, 10).unwrap();
        let grid = f.grid();
        for (i, s) in st.locations().iter().enumerate() {
            let target = UnitPoint::clamped(s.s1 + 0.16, s.s2 + 0.16);
            let cell = grid.nearest_cell(target);
            for t in 0..4 {
                let want: f64 =
                    1.5 + (0..10).map(|l| truth.coefficients[l] * layers.get(l, t, cell)).sum::<f64>();
                assert!((st.value(t, i).unwrap() - want).abs() < 1e-12);
            }
        }
        assert_eq!(truth.warp, AnalyticWarp::Translation { dx: 0.16, dy: 0.16 });
    }

    #[test]
    fn equal_layer_coefficients_collapse_to_slr() {
        let f = forecast();
        let smooth = Scenario {
            noise_sd: 0.0,
            layer_coefficients: Some(vec![0.4; 10]),
            ..Scenario::new(Generation::Smoothed, 25, 7)
        };
        let slr = Scenario { noise_sd: 0.0, beta1: 0.4, ..Scenario::new(Generation::Slr, 25, 7) };
        let (a, _) = generate(&smooth, &f).unwrap();
        let (b, _) = generate(&slr, &f).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_coefficients_are_descending() {
        let (_, truth) = generate(&Scenario::new(Generation::Smoothed, 10, 8), &forecast()).unwrap();
        assert_eq!(truth.coefficients.len(), 10);
        assert!(truth.coefficients.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn stations_occupy_distinct_cells() {
        let f = synthetic_plume(Grid::unit(10, 10).unwrap(), 2, 1).unwrap();
        let (_, truth) = generate(&Scenario::new(Generation::Slr, 100, 2), &f).unwrap();
        let distinct: HashSet<_> = truth.station_cells.iter().collect();
        assert_eq!(distinct.len(), 100);
        let too_many = Scenario::new(Generation::Slr, 101, 2);
        assert!(matches!(generate(&too_many, &f), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_seeded() {
        let f = forecast();
        let sc = Scenario::new(Generation::DiffeoSmoothed, 20, 11);
        assert_eq!(generate(&sc, &f).unwrap(), generate(&sc, &f).unwrap());
    }
}
