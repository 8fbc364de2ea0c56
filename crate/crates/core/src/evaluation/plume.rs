//! Synthetic smoke-plume forecasts: sums of drifting anisotropic Gaussian
//! concentration bumps, reported on the log scale with a zero background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::Grid;
use crate::spectral::GriddedField;

/// Ranges the random plumes are drawn from. Lengths are in unit-square
/// units, velocities in units per timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlumeConfig {
    pub n_plumes: usize,
    /// Range of `log` peak concentration.
    pub log_amplitude: [f64; 2],
    /// Range of the along- and across-axis standard deviations.
    pub spread: [f64; 2],
    pub max_speed: f64,
    /// Concentrations below this are set to zero.
    pub cutoff: f64,
}

impl Default for PlumeConfig {
    fn default() -> Self {
        PlumeConfig { n_plumes: 3, log_amplitude: [4.0, 6.0], spread: [0.03, 0.08], max_speed: 0.01, cutoff: 1.0 }
    }
}

impl PlumeConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.log_amplitude) || !ordered(self.spread) || self.spread[0] <= 0.0 {
            return Err(Error::config("plume ranges must be finite, ordered and positive"));
        }
        if !(self.max_speed >= 0.0 && self.cutoff >= 0.0) {
            return Err(Error::config("plume speed and cutoff must be nonnegative"));
        }
        Ok(())
    }
}

/// One plume: peak concentration at `center + t * velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plume {
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    /// Standard deviations along the rotated axes.
    pub spread: [f64; 2],
    /// Rotation of the major axis, radians.
    pub angle: f64,
    pub amplitude: f64,
}

impl Plume {
    pub fn concentration(&self, x: f64, y: f64, t: usize) -> f64 {
        let cx = self.center[0] + t as f64 * self.velocity[0];
        let cy = self.center[1] + t as f64 * self.velocity[1];
        let (sin, cos) = self.angle.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let u = (cos * dx + sin * dy) / self.spread[0];
        let v = (-sin * dx + cos * dy) / self.spread[1];
        self.amplitude * (-0.5 * (u * u + v * v)).exp()
    }
}

/// `log(1 + C)` where `C` is the summed concentration, zeroed below `cutoff`.
pub fn render_plumes(grid: Grid, n_times: usize, plumes: &[Plume], cutoff: f64) -> Result<GriddedField> {
    if n_times == 0 {
        return Err(Error::usage("at least one timestep is required"));
    }
    let cells = grid.cell_count();
    let mut values = Vec::with_capacity(n_times * cells);
    for t in 0..n_times {
        for k in 0..cells {
            let p = grid.cell_center(grid.cell_from_flat(k));
            let c: f64 = plumes.iter().map(|pl| pl.concentration(p.s1, p.s2, t)).sum();
            values.push(if c < cutoff { 0.0 } else { c.ln_1p() });
        }
    }
    GriddedField::new(grid, n_times, values)
}

pub fn random_plumes(config: &PlumeConfig, seed: u64) -> Result<Vec<Plume>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
    let mut plumes = Vec::with_capacity(config.n_plumes);
    for _ in 0..config.n_plumes {
        let center = [uniform([0.15, 0.85]), uniform([0.15, 0.85])];
        let heading = uniform([0.0, std::f64::consts::TAU]);
        let speed = uniform([0.0, config.max_speed]);
        let major = uniform(config.spread);
        let minor = uniform([config.spread[0], major]);
        plumes.push(Plume {
            center,
            velocity: [speed * heading.cos(), speed * heading.sin()],
            spread: [major, minor],
            angle: heading,
            amplitude: uniform(config.log_amplitude).exp(),
        });
    }
    Ok(plumes)
}

/// Default-configured synthetic forecast.
pub fn synthetic_plume(grid: Grid, n_times: usize, seed: u64) -> Result<GriddedField> {
    synthetic_plume_with(grid, n_times, &PlumeConfig::default(), seed)
}

pub fn synthetic_plume_with(grid: Grid, n_times: usize, config: &PlumeConfig, seed: u64) -> Result<GriddedField> {
    render_plumes(grid, n_times, &random_plumes(config, seed)?, config.cutoff)
}
