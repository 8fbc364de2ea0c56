//! CAR priors on coefficient lattices and the scalar hyperpriors.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Node layout of a CAR lattice. Grid nodes are numbered `j * cols + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeShape {
    Grid { rows: usize, cols: usize },
    Chain(usize),
}

impl LatticeShape {
    pub fn len(&self) -> usize {
        match *self {
            LatticeShape::Grid { rows, cols } => rows * cols,
            LatticeShape::Chain(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
struct Topology {
    shape: LatticeShape,
    neighbors: Vec<Vec<usize>>,
    /// Diagonal of `M`; isolated nodes get 1 so that `Q` stays regular.
    degree: Vec<f64>,
    /// Eigenvalues of `M^{-1/2} E M^{-1/2}`, all in `[-1, 1]`.
    spectrum: Vec<f64>,
    log_det_m: f64,
}

/// Rook-adjacency CAR structure with precision `Q = M - ρE`.
#[derive(Debug, Clone)]
pub struct CarStructure {
    topology: Arc<Topology>,
    rho: f64,
}

impl CarStructure {
    pub fn new(shape: LatticeShape, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        if shape.is_empty() {
            return Err(Error::config("CAR lattice has no nodes"));
        }
        let n = shape.len();
        let mut neighbors = vec![Vec::new(); n];
        match shape {
            LatticeShape::Grid { rows, cols } => {
                for j in 0..rows {
                    for k in 0..cols {
                        let i = j * cols + k;
                        if j > 0 {
                            neighbors[i].push(i - cols);
                        }
                        if k > 0 {
                            neighbors[i].push(i - 1);
                        }
                        if k + 1 < cols {
                            neighbors[i].push(i + 1);
                        }
                        if j + 1 < rows {
                            neighbors[i].push(i + cols);
                        }
                    }
                }
            }
            LatticeShape::Chain(len) => {
                for i in 0..len {
                    if i > 0 {
                        neighbors[i].push(i - 1);
                    }
                    if i + 1 < len {
                        neighbors[i].push(i + 1);
                    }
                }
            }
        }
        let degree: Vec<f64> = neighbors.iter().map(|nb| nb.len().max(1) as f64).collect();
        let scaled = DMatrix::from_fn(n, n, |a, b| {
            if neighbors[a].contains(&b) {
                1.0 / (degree[a] * degree[b]).sqrt()
            } else {
                0.0
            }
        });
        let spectrum = SymmetricEigen::new(scaled).eigenvalues.iter().copied().collect();
        let log_det_m = degree.iter().map(|d| d.ln()).sum();
        Ok(CarStructure {
            topology: Arc::new(Topology { shape, neighbors, degree, spectrum, log_det_m }),
            rho,
        })
    }

    pub fn grid(rows: usize, cols: usize, rho: f64) -> Result<Self> {
        Self::new(LatticeShape::Grid { rows, cols }, rho)
    }

    pub fn chain(len: usize, rho: f64) -> Result<Self> {
        Self::new(LatticeShape::Chain(len), rho)
    }

    /// Same lattice, different correlation. Shares the precomputed topology.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(CarStructure { topology: Arc::clone(&self.topology), rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn shape(&self) -> LatticeShape {
        self.topology.shape
    }

    pub fn len(&self) -> usize {
        self.topology.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.topology.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.topology.degree[i]
    }

    /// Dense `Q = M - ρE`.
    pub fn precision(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = self.topology.degree[i];
            for &j in &self.topology.neighbors[i] {
                q[(i, j)] = -self.rho;
            }
        }
        q
    }

    /// `log det Q = log det M + Σ log(1 - ρ λ_i)`.
    pub fn log_det(&self) -> f64 {
        self.topology.log_det_m
            + self.topology.spectrum.iter().map(|&l| (1.0 - self.rho * l).ln()).sum::<f64>()
    }

    /// `xᵀ Q x`, using the sparse structure.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.len());
        let t = &self.topology;
        let mut diag = 0.0;
        let mut off = 0.0;
        for i in 0..x.len() {
            diag += t.degree[i] * x[i] * x[i];
            for &j in &t.neighbors[i] {
                off += x[i] * x[j];
            }
        }
        diag - self.rho * off
    }

    /// `(Q x)_i`.
    pub fn precision_row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let t = &self.topology;
        t.degree[i] * x[i] - self.rho * t.neighbors[i].iter().map(|&j| x[j]).sum::<f64>()
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::domain(format!("CAR correlation {rho} outside [0, 1)")));
    }
    Ok(())
}

pub fn car_precision(structure: &CarStructure) -> DMatrix<f64> {
    structure.precision()
}

/// `log N(x; 0, scale · Q⁻¹)`.
pub fn car_gaussian_logpdf(x: &[f64], scale: f64, structure: &CarStructure) -> Result<f64> {
    if x.len() != structure.len() {
        return Err(Error::usage(format!(
            "coefficient vector has length {} but the lattice has {} nodes",
            x.len(),
            structure.len()
        )));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::domain(format!("CAR scale {scale} must be positive")));
    }
    let log_det = structure.log_det();
    if !log_det.is_finite() {
        return Err(Error::domain("CAR precision is not positive definite"));
    }
    let n = x.len() as f64;
    Ok(0.5 * log_det - 0.5 * n * (2.0 * PI * scale).ln() - structure.quad_form(x) / (2.0 * scale))
}

pub fn inv_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Half-normal on `[0, ∞)` whose underlying normal has variance `variance`.
pub fn half_normal_logpdf(x: f64, variance: f64) -> f64 {
    if !(x >= 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    0.5 * (2.0 / (PI * variance)).ln() - x * x / (2.0 * variance)
}

pub fn beta_logpdf(x: f64, a: f64, b: f64) -> f64 {
    if !(0.0..1.0).contains(&x) {
        return f64::NEG_INFINITY;
    }
    let norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    let left = if a == 1.0 { 0.0 } else { (a - 1.0) * x.ln() };
    let right = if b == 1.0 { 0.0 } else { (b - 1.0) * (1.0 - x).ln() };
    norm + left + right
}

/// Hyperparameters that carry a prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperParam {
    Sigma2,
    Sigma02,
    SigmaA2,
    Rho0,
    RhoA,
    RhoX,
}

/// Prior constants. The half-normal parameter is the variance of the
/// underlying normal, which puts the 99th percentile of `σ_a²` near 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperPriors {
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub sigma_a2_halfnormal: f64,
    pub rho_beta_a: f64,
    pub rho_beta_b: f64,
    pub tau2: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        HyperPriors {
            ig_shape: 0.01,
            ig_rate: 0.01,
            sigma_a2_halfnormal: 0.15,
            rho_beta_a: 10.0,
            rho_beta_b: 1.0,
            tau2: 10.0,
        }
    }
}

impl HyperPriors {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ig_shape,
            self.ig_rate,
            self.sigma_a2_halfnormal,
            self.rho_beta_a,
            self.rho_beta_b,
            self.tau2,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("all prior constants must be positive and finite"));
        }
        Ok(())
    }

    pub fn logpdf(&self, param: HyperParam, value: f64) -> f64 {
        match param {
            HyperParam::Sigma2 | HyperParam::Sigma02 => inv_gamma_logpdf(value, self.ig_shape, self.ig_rate),
            HyperParam::SigmaA2 => half_normal_logpdf(value, self.sigma_a2_halfnormal),
            HyperParam::Rho0 | HyperParam::RhoA | HyperParam::RhoX => {
                beta_logpdf(value, self.rho_beta_a, self.rho_beta_b)
            }
        }
    }
}
