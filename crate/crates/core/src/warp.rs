//! Spatial warps of the unit square.
//!
//! [`WarpField`] is the model's tensor-product B-spline displacement field;
//! [`AnalyticWarp`] holds the closed-form warps used to generate synthetic
//! data. Both clamp their output componentwise onto the unit square, which
//! for a rectangle is the nearest boundary point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::spatial::{clamp01, BSplineBasis, UnitPoint};
use crate::stats::{equal_tailed_interval, sort_floats};

/// Anything that maps the unit square into itself.
pub trait Warp {
    fn apply(&self, s: UnitPoint) -> UnitPoint;
}

/// `w_l(s) = s_l + Σ_jk A_j(s1) B_k(s2) a_jkl`, clamped to the unit square.
///
/// Coefficients are stored axis-major: `a_jkl` lives at
/// `l * J1 * J2 + j * J2 + k`, so each axis block is laid out like the CAR
/// lattice it is penalized with.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    basis_x: BSplineBasis,
    basis_y: BSplineBasis,
    coeffs: Vec<f64>,
}

impl WarpField {
    pub fn new(basis_x: BSplineBasis, basis_y: BSplineBasis, coeffs: Vec<f64>) -> Result<Self> {
        let expected = 2 * basis_x.knot_count() * basis_y.knot_count();
        if coeffs.len() != expected {
            return Err(Error::usage(format!(
                "warp needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(WarpField { basis_x, basis_y, coeffs })
    }

    pub fn identity(basis_x: BSplineBasis, basis_y: BSplineBasis) -> Self {
        let n = 2 * basis_x.knot_count() * basis_y.knot_count();
        WarpField { basis_x, basis_y, coeffs: vec![0.0; n] }
    }

    pub fn basis_x(&self) -> &BSplineBasis {
        &self.basis_x
    }

    pub fn basis_y(&self) -> &BSplineBasis {
        &self.basis_y
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Number of lattice nodes per axis block, `J1 * J2`.
    pub fn nodes(&self) -> usize {
        self.basis_x.knot_count() * self.basis_y.knot_count()
    }

    pub fn coeff_index(&self, j: usize, k: usize, l: usize) -> usize {
        l * self.nodes() + j * self.basis_y.knot_count() + k
    }

    /// Unclamped displacement `w(s) - s`.
    pub fn displacement(&self, s: UnitPoint) -> [f64; 2] {
        let (j0, a) = self.basis_x.local_unchecked(clamp01(s.s1));
        let (k0, b) = self.basis_y.local_unchecked(clamp01(s.s2));
        let kk = self.basis_y.knot_count();
        let nodes = self.nodes();
        let mut d = [0.0; 2];
        for (dj, &wa) in a.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            for (dk, &wb) in b.iter().enumerate() {
                let w = wa * wb;
                let idx = (j0 + dj) * kk + k0 + dk;
                d[0] += w * self.coeffs[idx];
                d[1] += w * self.coeffs[nodes + idx];
            }
        }
        d
    }

    pub fn eval(&self, s: UnitPoint) -> UnitPoint {
        let d = self.displacement(s);
        UnitPoint::clamped(s.s1 + d[0], s.s2 + d[1])
    }
}

impl Warp for WarpField {
    fn apply(&self, s: UnitPoint) -> UnitPoint {
        self.eval(s)
    }
}

pub fn eval_warp(field: &WarpField, s: UnitPoint) -> UnitPoint {
    field.eval(s)
}

/// Closed-form reference warps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AnalyticWarp {
    Identity,
    Translation { dx: f64, dy: f64 },
    /// Boundary-preserving smooth deformation with two strength parameters.
    Diffeomorphism { theta1: f64, theta2: f64 },
}

impl AnalyticWarp {
    pub fn from_kind(kind: &str, params: &[f64]) -> Result<Self> {
        let want = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(Error::config(format!("warp '{kind}' takes {n} parameters, got {}", params.len())))
            }
        };
        match kind {
            "identity" => want(0).map(|_| AnalyticWarp::Identity),
            "translation" => want(2).map(|_| AnalyticWarp::Translation { dx: params[0], dy: params[1] }),
            "diffeomorphism" => {
                want(2).map(|_| AnalyticWarp::Diffeomorphism { theta1: params[0], theta2: params[1] })
            }
            other => Err(Error::config(format!("unknown warp kind '{other}'"))),
        }
    }

    /// Displacement before clamping.
    pub fn raw_displacement(&self, s: UnitPoint) -> [f64; 2] {
        match *self {
            AnalyticWarp::Identity => [0.0, 0.0],
            AnalyticWarp::Translation { dx, dy } => [dx, dy],
            AnalyticWarp::Diffeomorphism { theta1, theta2 } => {
                let (s1, s2) = (s.s1, s.s2);
                let d1 = -2.0
                    * theta1
                    * s2
                    * s1.sin()
                    * s2.cos()
                    * ((PI * s1).cos() + 1.0)
                    * ((PI * s2).cos() + 1.0);
                let d2 = -2.0
                    * theta2
                    * s1
                    * s1.sin()
                    * s2.sin()
                    * (PI * s1 / 2.0).cos()
                    * (3.0 * PI * s2 / 2.0).cos();
                [d1, d2]
            }
        }
    }

    pub fn eval(&self, s: UnitPoint) -> UnitPoint {
        let d = self.raw_displacement(s);
        UnitPoint::clamped(s.s1 + d[0], s.s2 + d[1])
    }
}

impl Warp for AnalyticWarp {
    fn apply(&self, s: UnitPoint) -> UnitPoint {
        self.eval(s)
    }
}

pub fn eval_analytic(warp: &AnalyticWarp, s: UnitPoint) -> UnitPoint {
    warp.eval(s)
}

/// Applies a warp to every point, preserving order.
pub fn warp_points<W: Warp + ?Sized>(warp: &W, points: &[UnitPoint]) -> Vec<UnitPoint> {
    points.iter().map(|&p| warp.apply(p)).collect()
}

/// Least-squares projection of an analytic warp's unclamped displacement onto
/// the spline basis, sampled on a `resolution × resolution` lattice.
pub fn fit_to_analytic(
    warp: &AnalyticWarp,
    basis_x: BSplineBasis,
    basis_y: BSplineBasis,
    resolution: usize,
) -> Result<WarpField> {
    let nodes = basis_x.knot_count() * basis_y.knot_count();
    if resolution * resolution < nodes {
        return Err(Error::usage("too few fitting points for the warp basis"));
    }
    let mut design = DMatrix::zeros(resolution * resolution, nodes);
    let mut rhs = DMatrix::zeros(resolution * resolution, 2);
    let kk = basis_y.knot_count();
    for r in 0..resolution {
        for c in 0..resolution {
            let row = r * resolution + c;
            let s = UnitPoint {
                s1: c as f64 / (resolution - 1) as f64,
                s2: r as f64 / (resolution - 1) as f64,
            };
            let (j0, a) = basis_x.local_unchecked(s.s1);
            let (k0, b) = basis_y.local_unchecked(s.s2);
            for (dj, wa) in a.iter().enumerate() {
                for (dk, wb) in b.iter().enumerate() {
                    design[(row, (j0 + dj) * kk + k0 + dk)] = wa * wb;
                }
            }
            let d = warp.raw_displacement(s);
            rhs[(row, 0)] = d[0];
            rhs[(row, 1)] = d[1];
        }
    }
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::numerical(format!("warp projection failed: {e}")))?;
    let mut coeffs = Vec::with_capacity(2 * nodes);
    coeffs.extend(sol.column(0).iter());
    coeffs.extend(sol.column(1).iter());
    WarpField::new(basis_x, basis_y, coeffs)
}

/// Credible-interval test of whether a displacement differs from zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Significance {
    /// Equal-tailed interval of `w_l(s) - s_l` for each coordinate.
    pub intervals: [(f64, f64); 2],
    pub per_coordinate: [bool; 2],
    /// True when either coordinate's interval excludes zero.
    pub significant: bool,
}

/// `draws` are posterior draws of `w(s) - s` at one location.
pub fn displacement_significance(draws: &[[f64; 2]], level: f64) -> Result<Significance> {
    if draws.len() < 2 {
        return Err(Error::usage(format!(
            "significance needs at least 2 draws, got {}",
            draws.len()
        )));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(Error::domain(format!("credible level {level} outside [0, 1)")));
    }
    let mut intervals = [(0.0, 0.0); 2];
    let mut per_coordinate = [false; 2];
    for l in 0..2 {
        let mut v: Vec<f64> = draws.iter().map(|d| d[l]).collect();
        sort_floats(&mut v);
        let (lo, hi) = equal_tailed_interval(&v, level);
        intervals[l] = (lo, hi);
        per_coordinate[l] = lo > 0.0 || hi < 0.0;
    }
    Ok(Significance { intervals, per_coordinate, significant: per_coordinate[0] || per_coordinate[1] })
}
