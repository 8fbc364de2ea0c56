//! Dense design matrices and the likelihood pieces built on them.
//!
//! The sampler works from per-station sufficient statistics instead; the
//! dense forms here are the reference it is checked against and what
//! external callers use for one-off evaluations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::f64::consts::PI;

use super::sampler::reduced_quad;
use super::{Model, ModelState};
use crate::error::{Error, Result};
use crate::spatial::{tensor_eval_sparse, BSplineBasis, StationData};
use crate::spectral::SpectralLayers;
use crate::warp::WarpField;

/// Identifies one observation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObsKey {
    pub station: usize,
    pub time: usize,
}

/// Rows for every non-missing `(station, time)` pair of the chosen times.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub keys: Vec<ObsKey>,
    pub y: DVector<f64>,
    /// `N × L` layer covariates at the warped nearest cell.
    pub layer_cols: DMatrix<f64>,
    /// `N × (1 + J K)`: a column of ones, then the intercept basis.
    pub intercept_cols: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn n_obs(&self) -> usize {
        self.keys.len()
    }

    /// Intercept basis columns without the leading ones column.
    pub fn basis_cols(&self) -> DMatrix<f64> {
        let n = self.intercept_cols.ncols();
        self.intercept_cols.columns(1, n - 1).into_owned()
    }
}

pub fn build_design(
    layers: &SpectralLayers,
    warp: Option<&WarpField>,
    intercept: Option<(&BSplineBasis, &BSplineBasis)>,
    stations: &StationData,
    times: &[usize],
) -> Result<DesignMatrix> {
    for &t in times {
        if t >= layers.n_times() || t >= stations.n_times() {
            return Err(Error::usage(format!("time index {t} out of range")));
        }
    }
    let grid = layers.grid();
    let n_layers = layers.n_layers();
    let jk = intercept.map_or(0, |(bx, by)| bx.knot_count() * by.knot_count());

    let mut keys = Vec::new();
    for &t in times {
        for i in 0..stations.n_stations() {
            if stations.value(t, i).is_some() {
                keys.push(ObsKey { station: i, time: t });
            }
        }
    }
    if keys.is_empty() {
        return Err(Error::usage("no non-missing observations for the design"));
    }

    let n = keys.len();
    let mut y = DVector::zeros(n);
    let mut layer_cols = DMatrix::zeros(n, n_layers);
    let mut intercept_cols = DMatrix::zeros(n, 1 + jk);
    let mut cov = vec![0.0; n_layers];
    for (row, key) in keys.iter().enumerate() {
        let s = stations.locations()[key.station];
        y[row] = stations.value(key.time, key.station).unwrap_or_default();
        let target = warp.map_or(s, |w| w.eval(s));
        let cell = grid.flat_index(grid.nearest_cell(target));
        layers.covariates_into(key.time, cell, &mut cov);
        for (l, v) in cov.iter().enumerate() {
            layer_cols[(row, l)] = *v;
        }
        intercept_cols[(row, 0)] = 1.0;
        if let Some((bx, by)) = intercept {
            for (idx, w) in tensor_eval_sparse(bx, by, s)? {
                intercept_cols[(row, 1 + idx)] = w;
            }
        }
    }
    Ok(DesignMatrix { keys, y, layer_cols, intercept_cols })
}

/// Log density of `r ~ N(0, σ² I + W Λ⁻¹ Wᵀ)` from `WᵀW`, `Wᵀr` and `rᵀr`,
/// where `Λ` is the prior precision of the integrated coefficients.
pub(crate) fn collapsed_loglik(
    wtw: &DMatrix<f64>,
    wtr: &DVector<f64>,
    rr: f64,
    n: usize,
    sigma2: f64,
    prior_prec: &DMatrix<f64>,
    log_det_prior: f64,
) -> Result<f64> {
    let base = n as f64 * (2.0 * PI * sigma2).ln() + rr / sigma2;
    if wtw.nrows() == 0 {
        return Ok(-0.5 * base);
    }
    let f = prior_prec + wtw / sigma2;
    let chol = f
        .cholesky()
        .ok_or_else(|| Error::numerical("marginal covariance is not positive definite"))?;
    let log_det_f: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let g = wtr / sigma2;
    let quad = g.dot(&chol.solve(&g));
    let ll = -0.5 * (base + log_det_f - log_det_prior - quad);
    if !ll.is_finite() {
        return Err(Error::numerical("non-finite marginal likelihood"));
    }
    Ok(ll)
}

/// Block-diagonal precision of `(b, β)` and its log determinant, for
/// `b ~ N(0, σ0² Q0⁻¹)` and `β ~ N(0, σ² τ² Qx⁻¹)`.
pub(crate) fn coefficient_prior(
    model: &Model,
    state: &ModelState,
    include_intercept: bool,
) -> Result<(DMatrix<f64>, f64)> {
    let tau2 = model.priors().tau2;
    let qx = model.car_x(state.rhox)?;
    let l = qx.len();
    let car_b = if include_intercept { model.car_b(state.rho0)? } else { None };
    let jk = car_b.as_ref().map_or(0, |c| c.len());
    let mut prec = DMatrix::zeros(jk + l, jk + l);
    let mut log_det = 0.0;
    if let Some(cb) = &car_b {
        prec.view_mut((0, 0), (jk, jk)).copy_from(&(cb.precision() / state.sigma02));
        log_det += cb.log_det() - jk as f64 * state.sigma02.ln();
    }
    let beta_scale = state.sigma2 * tau2;
    prec.view_mut((jk, jk), (l, l)).copy_from(&(qx.precision() / beta_scale));
    log_det += qx.log_det() - l as f64 * beta_scale.ln();
    Ok((prec, log_det))
}

/// Draws `N(P⁻¹ rhs, P⁻¹)`.
pub(crate) fn draw_from_precision<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    rhs: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let chol = precision.cholesky()?;
    let mean = chol.solve(rhs);
    let z = DVector::from_fn(rhs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol.l().transpose().solve_upper_triangular(&z)?;
    Some(mean + noise)
}

/// One draw from `IG(shape, rate)`.
pub(crate) fn draw_inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::numerical(format!("invalid inverse-gamma ({shape}, {rate}): {e}")))?;
    let g: f64 = gamma.sample(rng);
    // shape 0.01 gammas underflow to zero with non-negligible probability
    Ok(1.0 / g.max(f64::MIN_POSITIVE))
}

/// `(b0, b, β)` drawn from their joint full conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub b0: f64,
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Model {
    /// `log p(y | b0, σ², σ0², ρ0, ρx, a)` with `β` integrated out, and `b`
    /// too when `integrate_intercept` is set (otherwise `b` is taken from
    /// `state`). `b0` is conditioned on.
    pub fn marginal_loglik(&self, design: &DesignMatrix, state: &ModelState, integrate_intercept: bool) -> Result<f64> {
        let integrate_b = integrate_intercept && self.dims().intercept_basis.is_some();
        let basis = design.basis_cols();
        let mut r = design.y.add_scalar(-state.b0);
        if !integrate_b && !state.b.is_empty() {
            r -= &basis * DVector::from_column_slice(&state.b);
        }
        let w = if integrate_b {
            let mut w = DMatrix::zeros(design.n_obs(), basis.ncols() + design.layer_cols.ncols());
            w.columns_mut(0, basis.ncols()).copy_from(&basis);
            w.columns_mut(basis.ncols(), design.layer_cols.ncols()).copy_from(&design.layer_cols);
            w
        } else {
            design.layer_cols.clone()
        };
        let (prec, log_det) = coefficient_prior(self, state, integrate_b)?;
        collapsed_loglik(&(w.transpose() * &w), &(w.transpose() * &r), r.norm_squared(), design.n_obs(), state.sigma2, &prec, log_det)
    }

    /// `Σ log N(y; b0 + B b + X β, σ²)` with every coefficient fixed.
    pub fn conditional_loglik(&self, design: &DesignMatrix, state: &ModelState) -> f64 {
        let mean = self.design_mean(design, state);
        let n = design.n_obs() as f64;
        let ssr = (&design.y - mean).norm_squared();
        -0.5 * (n * (2.0 * PI * state.sigma2).ln() + ssr / state.sigma2)
    }

    fn design_mean(&self, design: &DesignMatrix, state: &ModelState) -> DVector<f64> {
        let mut mean = DVector::from_element(design.n_obs(), state.b0);
        if !state.b.is_empty() {
            mean += design.basis_cols() * DVector::from_column_slice(&state.b);
        }
        mean + &design.layer_cols * DVector::from_column_slice(&state.beta)
    }

    /// Joint precision and right-hand side of the `(b0, b, β)` full
    /// conditional, `b0` carrying a flat prior.
    pub fn coefficient_conditional(&self, design: &DesignMatrix, state: &ModelState) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let ic = &design.intercept_cols;
        let p = ic.ncols() + design.layer_cols.ncols();
        let mut w = DMatrix::zeros(design.n_obs(), p);
        w.columns_mut(0, ic.ncols()).copy_from(ic);
        w.columns_mut(ic.ncols(), design.layer_cols.ncols()).copy_from(&design.layer_cols);
        let (prior, _) = coefficient_prior(self, state, true)?;
        let mut precision = w.transpose() * &w / state.sigma2;
        let mut sub = precision.view_mut((1, 1), (p - 1, p - 1));
        sub += prior;
        let rhs = w.transpose() * &design.y / state.sigma2;
        Ok((precision, rhs))
    }

    pub fn gibbs_draw_coefficients<R: Rng + ?Sized>(
        &self,
        design: &DesignMatrix,
        state: &ModelState,
        rng: &mut R,
    ) -> Result<Coefficients> {
        let (precision, rhs) = self.coefficient_conditional(design, state)?;
        let draw = draw_from_precision(precision, &rhs, rng)
            .ok_or_else(|| Error::numerical("coefficient conditional precision is singular"))?;
        let jk = state.b.len();
        Ok(Coefficients {
            b0: draw[0],
            b: draw.rows(1, jk).iter().copied().collect(),
            beta: draw.rows(1 + jk, state.beta.len()).iter().copied().collect(),
        })
    }

    /// `(σ², σ0²)` given the intercept coefficients in `state`. The layer
    /// prior scales with `σ²`, so `β` integrates out of the `σ²` conditional
    /// in closed form: `σ² | ⋯ ~ IG(a + N/2, b + rᵀ(I + τ² X Qx⁻¹ Xᵀ)⁻¹ r / 2)`
    /// with `r = y - b0 - B b`. `σ0²` is the usual conjugate update on `b`.
    pub fn gibbs_draw_variances<R: Rng + ?Sized>(
        &self,
        design: &DesignMatrix,
        state: &ModelState,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let mut r = design.y.add_scalar(-state.b0);
        if !state.b.is_empty() {
            r -= design.basis_cols() * DVector::from_column_slice(&state.b);
        }
        let x = &design.layer_cols;
        let xtx = x.transpose() * x;
        let xtr = x.transpose() * &r;
        let sigma2 = self.draw_sigma2(&xtx, &xtr, r.norm_squared(), design.n_obs(), state.rhox, rng)?;
        let sigma02 = self.draw_sigma02(state, rng)?;
        Ok((sigma2, sigma02))
    }

    pub(crate) fn draw_sigma2<R: Rng + ?Sized>(
        &self,
        xtx: &DMatrix<f64>,
        xtr: &DVector<f64>,
        rr: f64,
        n: usize,
        rhox: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let p = self.priors();
        let quad = reduced_quad(xtx, xtr, rr, &self.car_x(rhox)?, p.tau2)?;
        if !quad.is_finite() {
            return Err(Error::numerical("non-finite residual quadratic form"));
        }
        draw_inv_gamma(p.ig_shape + 0.5 * n as f64, p.ig_rate + 0.5 * quad.max(0.0), rng)
    }

    pub(crate) fn draw_sigma02<R: Rng + ?Sized>(&self, state: &ModelState, rng: &mut R) -> Result<f64> {
        match self.car_b(state.rho0)? {
            Some(q0) => {
                let p = self.priors();
                let shape = p.ig_shape + 0.5 * state.b.len() as f64;
                let rate = p.ig_rate + 0.5 * q0.quad_form(&state.b);
                draw_inv_gamma(shape, rate, rng)
            }
            None => Ok(state.sigma02),
        }
    }
}
