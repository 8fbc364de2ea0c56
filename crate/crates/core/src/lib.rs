//! Bayesian calibration of gridded numerical forecasts against sparse point
//! observations.
//!
//! The observed value at station `s` and time `t` is modelled as
//!
//! ```text
//! Y_t(s) = b0 + Σ_jk A_j(s1) B_k(s2) b_jk + Σ_l β_l X̃_lt(w̃(s)) + ε
//! ```
//!
//! where `X̃_lt` are frequency-band layers of the forecast ([`spectral`]),
//! `w` is a penalized B-spline warp of the unit square ([`warp`]) and the
//! coefficient blocks carry CAR priors ([`priors`]). The posterior is explored
//! with a Metropolis-within-Gibbs sampler ([`inference`]); [`evaluation`]
//! provides synthetic data generation and forecast scoring.

pub mod error;
pub mod evaluation;
pub mod inference;
pub mod priors;
pub mod spatial;
pub mod spectral;
pub mod stats;
pub mod warp;

pub use error::{Error, Result};
pub use evaluation::{Generation, Scenario, ScoreReport};
pub use inference::{ModelConfig, ModelState, PosteriorSamples, Variant};
pub use priors::{CarStructure, HyperPriors};
pub use spatial::{BBox, BSplineBasis, Cell, Grid, StationData, UnitPoint};
pub use spectral::{GriddedField, SpectralLayers};
pub use warp::{AnalyticWarp, WarpField};
