//! Model definition, Metropolis-within-Gibbs sampler and posterior prediction.
//!
//! The regression coefficients `(b0, b, β)` are conjugate and drawn jointly
//! from their Gaussian full conditional. Warp coefficients are updated by
//! random-walk Metropolis against a likelihood with `β` integrated out (and
//! optionally `b` as well); CAR correlations and the warp variance use
//! random walks on the logit and log scales; the two remaining variances are
//! inverse-gamma Gibbs draws.

mod design;
mod predict;
mod sampler;

pub use design::{build_design, DesignMatrix, ObsKey};
pub use predict::{posterior_predict, PredictiveDraws, PredictiveSummary};
pub use sampler::{random_walk_step, Block, BlockAcceptance, Sampler};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::priors::{CarStructure, HyperPriors};
use crate::spatial::{BSplineBasis, StationData, UnitPoint};
use crate::spectral::{build_layers, GriddedField, SpectralLayers};
use crate::warp::WarpField;

/// Which model components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Scalar intercept and the raw forecast as the only covariate.
    Slr,
    /// Spatial intercept and spectral layers, identity warp.
    Smooth,
    /// Spatial intercept and the raw forecast behind a fitted warp.
    Warp,
    /// Spatial intercept, spectral layers and warp.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Slr, Variant::Smooth, Variant::Warp, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Slr => "slr",
            Variant::Smooth => "smooth",
            Variant::Warp => "warp",
            Variant::Full => "full",
        }
    }

    pub fn has_spatial_intercept(&self) -> bool {
        !matches!(self, Variant::Slr)
    }

    pub fn has_warp(&self) -> bool {
        matches!(self, Variant::Warp | Variant::Full)
    }

    pub fn has_smoothing(&self) -> bool {
        matches!(self, Variant::Smooth | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slr" => Ok(Variant::Slr),
            "smooth" | "smooth-only" => Ok(Variant::Smooth),
            "warp" | "warp-only" => Ok(Variant::Warp),
            "full" => Ok(Variant::Full),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Initial random-walk scales. Adapted during burn-in when
/// [`ModelConfig::adapt`] is set and frozen afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalScales {
    /// Per-node displacement step, unit-square units.
    pub warp: f64,
    /// Whole-field translation step.
    pub warp_shift: f64,
    /// Step on `log σ_a²`.
    pub sigma_a2: f64,
    /// Step on `logit ρ`.
    pub rho: f64,
}

impl Default for ProposalScales {
    fn default() -> Self {
        ProposalScales { warp: 0.02, warp_shift: 0.02, sigma_a2: 0.5, rho: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(J, K)`: intercept basis functions along x and y.
    pub intercept_basis: [usize; 2],
    /// `(J1, J2)`: warp basis functions along x and y.
    pub warp_basis: [usize; 2],
    /// Number of spectral layers `L` for the smoothing variants.
    pub n_layers: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt: bool,
    pub target_acceptance: f64,
    /// Integrate the spatial intercept coefficients out of the warp updates
    /// together with the layer coefficients.
    pub marginalize_intercept: bool,
    pub proposals: ProposalScales,
    pub priors: HyperPriors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            intercept_basis: [10, 5],
            warp_basis: [10, 5],
            n_layers: 15,
            n_iter: 20_000,
            n_burn: 10_000,
            thin: 1,
            seed: 1,
            adapt: true,
            target_acceptance: 0.3,
            marginalize_intercept: false,
            proposals: ProposalScales::default(),
            priors: HyperPriors::default(),
        }
    }
}

impl ModelConfig {
    /// Basis sizes matched to the station count: (6, 4) up to 25 stations,
    /// (10, 5) up to 50 and (12, 8) beyond.
    pub fn basis_for_station_count(n_stations: usize) -> [usize; 2] {
        match n_stations {
            0..=37 => [6, 4],
            38..=75 => [10, 5],
            _ => [12, 8],
        }
    }

    pub fn for_station_count(n_stations: usize) -> Self {
        let basis = Self::basis_for_station_count(n_stations);
        ModelConfig { intercept_basis: basis, warp_basis: basis, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::config("n_iter must be positive"));
        }
        if self.n_burn >= self.n_iter {
            return Err(Error::config(format!(
                "n_burn ({}) must be smaller than n_iter ({})",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::config("thin must be positive"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be positive"));
        }
        for &b in self.intercept_basis.iter().chain(&self.warp_basis) {
            if b < 4 {
                return Err(Error::config(format!("basis sizes must be at least 4, got {b}")));
            }
        }
        let p = &self.proposals;
        if [p.warp, p.warp_shift, p.sigma_a2, p.rho].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("proposal scales must be positive"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::config("target_acceptance must lie in (0, 1)"));
        }
        self.priors.validate()
    }
}

/// Active dimensions of a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub intercept_basis: Option<[usize; 2]>,
    pub warp_basis: Option<[usize; 2]>,
    pub n_layers: usize,
}

impl ModelDims {
    pub fn intercept_len(&self) -> usize {
        self.intercept_basis.map_or(0, |[j, k]| j * k)
    }

    pub fn warp_len(&self) -> usize {
        self.warp_basis.map_or(0, |[j, k]| 2 * j * k)
    }
}

/// All sampled parameters. Unused blocks of a reduced variant are empty
/// vectors and their hyperparameters stay at the initial values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub b0: f64,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub sigma02: f64,
    pub sigmaa2: f64,
    pub rho0: f64,
    pub rhoa: f64,
    pub rhox: f64,
}

impl ModelState {
    /// Identity warp, flat intercept, unit variances and correlations of 0.9.
    pub fn initial(dims: &ModelDims) -> Self {
        ModelState {
            b0: 0.0,
            b: vec![0.0; dims.intercept_len()],
            a: vec![0.0; dims.warp_len()],
            beta: vec![0.0; dims.n_layers],
            sigma2: 1.0,
            sigma02: 1.0,
            sigmaa2: 0.01,
            rho0: 0.9,
            rhoa: 0.9,
            rhox: 0.9,
        }
    }

    pub fn is_finite(&self) -> bool {
        let scalars = [self.b0, self.sigma2, self.sigma02, self.sigmaa2, self.rho0, self.rhoa, self.rhox];
        scalars.iter().chain(&self.b).chain(&self.a).chain(&self.beta).all(|v| v.is_finite())
    }
}

/// Structural pieces shared by the sampler, likelihood and prediction.
#[derive(Debug, Clone)]
pub struct Model {
    variant: Variant,
    config: ModelConfig,
    dims: ModelDims,
    intercept_bases: Option<(BSplineBasis, BSplineBasis)>,
    warp_bases: Option<(BSplineBasis, BSplineBasis)>,
    car_b: Option<CarStructure>,
    car_a: Option<CarStructure>,
    car_x: CarStructure,
}

impl Model {
    pub fn new(config: &ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let intercept = variant.has_spatial_intercept().then_some(config.intercept_basis);
        let warp = variant.has_warp().then_some(config.warp_basis);
        let n_layers = if variant.has_smoothing() { config.n_layers } else { 1 };
        Self::from_dims(config, variant, ModelDims { intercept_basis: intercept, warp_basis: warp, n_layers })
    }

    /// Rebuilds a model from stored dimensions, e.g. when reading samples.
    pub fn from_dims(config: &ModelConfig, variant: Variant, dims: ModelDims) -> Result<Self> {
        let bases = |b: [usize; 2]| -> Result<(BSplineBasis, BSplineBasis)> {
            Ok((BSplineBasis::new(b[0])?, BSplineBasis::new(b[1])?))
        };
        let intercept_bases = dims.intercept_basis.map(bases).transpose()?;
        let warp_bases = dims.warp_basis.map(bases).transpose()?;
        let car_b = dims.intercept_basis.map(|[j, k]| CarStructure::grid(j, k, 0.9)).transpose()?;
        let car_a = dims.warp_basis.map(|[j, k]| CarStructure::grid(j, k, 0.9)).transpose()?;
        let car_x = CarStructure::chain(dims.n_layers, 0.9)?;
        Ok(Model { variant, config: *config, dims, intercept_bases, warp_bases, car_b, car_a, car_x })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn priors(&self) -> &HyperPriors {
        &self.config.priors
    }

    pub fn intercept_bases(&self) -> Option<&(BSplineBasis, BSplineBasis)> {
        self.intercept_bases.as_ref()
    }

    pub fn warp_bases(&self) -> Option<&(BSplineBasis, BSplineBasis)> {
        self.warp_bases.as_ref()
    }

    pub fn car_b(&self, rho: f64) -> Result<Option<CarStructure>> {
        self.car_b.as_ref().map(|c| c.with_rho(rho)).transpose()
    }

    pub fn car_a(&self, rho: f64) -> Result<Option<CarStructure>> {
        self.car_a.as_ref().map(|c| c.with_rho(rho)).transpose()
    }

    pub fn car_x(&self, rho: f64) -> Result<CarStructure> {
        self.car_x.with_rho(rho)
    }

    /// The warp encoded in `state`, or `None` for variants without one.
    pub fn warp_field(&self, state: &ModelState) -> Result<Option<WarpField>> {
        match &self.warp_bases {
            Some((bx, by)) => Ok(Some(WarpField::new(bx.clone(), by.clone(), state.a.clone())?)),
            None => Ok(None),
        }
    }

    /// Layers matching this model's layer count.
    pub fn layers_for(&self, forecast: &GriddedField) -> Result<SpectralLayers> {
        build_layers(forecast, self.dims.n_layers)
    }
}

/// Kept draws and sampler diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub variant: Variant,
    pub dims: ModelDims,
    pub states: Vec<ModelState>,
    /// `w(s) - s` at each station, per kept draw. Empty for variants
    /// without a warp.
    pub station_displacements: Vec<Vec<[f64; 2]>>,
    pub acceptance: Vec<BlockAcceptance>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Posterior mean of the displacement `w(s) - s` at arbitrary points.
    pub fn mean_displacement(&self, model: &Model, points: &[UnitPoint]) -> Result<Vec<[f64; 2]>> {
        let mut acc = vec![[0.0; 2]; points.len()];
        if self.states.is_empty() {
            return Ok(acc);
        }
        for state in &self.states {
            if let Some(w) = model.warp_field(state)? {
                for (a, &p) in acc.iter_mut().zip(points) {
                    let q = w.eval(p);
                    a[0] += q.s1 - p.s1;
                    a[1] += q.s2 - p.s2;
                }
            }
        }
        let n = self.states.len() as f64;
        Ok(acc.into_iter().map(|[x, y]| [x / n, y / n]).collect())
    }
}

/// Fits one variant to the observations at `times`.
pub fn fit(
    forecast: &GriddedField,
    stations: &StationData,
    times: &[usize],
    config: &ModelConfig,
    variant: Variant,
) -> Result<PosteriorSamples> {
    let model = Model::new(config, variant)?;
    let layers = model.layers_for(forecast)?;
    fit_with_layers(&model, &layers, stations, times)
}

/// Like [`fit`] with layers already built for `model`.
pub fn fit_with_layers(
    model: &Model,
    layers: &SpectralLayers,
    stations: &StationData,
    times: &[usize],
) -> Result<PosteriorSamples> {
    let sampler = Sampler::new(model, layers, stations, times)?;
    if sampler.n_obs() == 0 {
        return Err(Error::usage("no non-missing observations in the training times"));
    }
    sampler.run()
}
