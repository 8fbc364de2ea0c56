//! Frequency-band decomposition of gridded forecasts.
//!
//! Each time slice is transformed with a normalized 2-D DFT, every frequency
//! is weighted by `L` Bernstein polynomials of its (aliased) magnitude, and
//! each weighted spectrum is transformed back. The weights sum to one at
//! every frequency, so the layers sum back to the input field.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spatial::{Cell, Grid};

/// Imaginary residue tolerated when reconstructing a real field.
pub const IMAG_TOLERANCE: f64 = 1e-9;

/// Forecast values on a grid over `n_times` timesteps, stored `[t][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    grid: Grid,
    n_times: usize,
    values: Vec<f64>,
}

impl GriddedField {
    pub fn new(grid: Grid, n_times: usize, values: Vec<f64>) -> Result<Self> {
        if n_times == 0 {
            return Err(Error::usage("a gridded field needs at least one timestep"));
        }
        if values.len() != n_times * grid.cell_count() {
            return Err(Error::usage(format!(
                "expected {} values for {} timesteps on a {}x{} grid, got {}",
                n_times * grid.cell_count(),
                n_times,
                grid.nx(),
                grid.ny(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("gridded field contains non-finite values".into()));
        }
        Ok(GriddedField { grid, n_times, values })
    }

    pub fn zeros(grid: Grid, n_times: usize) -> Self {
        GriddedField { grid, n_times, values: vec![0.0; n_times * grid.cell_count()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, cell: Cell) -> f64 {
        self.values[t * self.grid.cell_count() + self.grid.flat_index(cell)]
    }

    /// One timestep as an `ny × nx` matrix.
    pub fn slice(&self, t: usize) -> DMatrix<f64> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let base = t * nx * ny;
        DMatrix::from_fn(ny, nx, |r, c| self.values[base + r * nx + c])
    }
}

/// Angular frequency `ω_p = 2π (p1 / P1, p2 / P2)` of DFT index `(p2, p1)`,
/// `p1` running along x.
pub fn frequency(p1: usize, p2: usize, nx: usize, ny: usize) -> [f64; 2] {
    [2.0 * PI * p1 as f64 / nx as f64, 2.0 * PI * p2 as f64 / ny as f64]
}

struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Plans {
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        }
    }

    /// Unnormalized 2-D transform of a row-major `ny × nx` buffer, with
    /// kernel `exp(+i ω·s)` when `positive` and `exp(-i ω·s)` otherwise.
    fn transform(&self, buf: &mut [Complex64], nx: usize, ny: usize, positive: bool) {
        let (row, col) = if positive {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in buf.chunks_exact_mut(nx) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); ny];
        for c in 0..nx {
            for r in 0..ny {
                column[r] = buf[r * nx + c];
            }
            col.process(&mut column);
            for r in 0..ny {
                buf[r * nx + c] = column[r];
            }
        }
    }
}

/// `Z_p = (1/P) Σ_q exp(i ω_p·s_q) X(s_q)` for an `ny × nx` slice; the
/// result is indexed `(p2, p1)`.
pub fn dft2(slice: &DMatrix<f64>) -> DMatrix<Complex64> {
    let (ny, nx) = slice.shape();
    let plans = Plans::new(nx, ny);
    let mut buf: Vec<Complex64> = (0..ny * nx)
        .map(|i| Complex64::new(slice[(i / nx, i % nx)], 0.0))
        .collect();
    plans.transform(&mut buf, nx, ny, true);
    let scale = 1.0 / (nx * ny) as f64;
    DMatrix::from_fn(ny, nx, |r, c| buf[r * nx + c] * scale)
}

/// `X(s) = Σ_p exp(-i ω_p·s) Z_p`, requiring a real result.
pub fn idft2(z: &DMatrix<Complex64>) -> Result<DMatrix<f64>> {
    let (ny, nx) = z.shape();
    let plans = Plans::new(nx, ny);
    let mut buf: Vec<Complex64> = (0..ny * nx).map(|i| z[(i / nx, i % nx)]).collect();
    plans.transform(&mut buf, nx, ny, false);
    let out = real_part(&buf)?;
    Ok(DMatrix::from_fn(ny, nx, |r, c| out[r * nx + c]))
}

fn real_part(buf: &[Complex64]) -> Result<Vec<f64>> {
    let scale = buf.iter().fold(1.0f64, |m, v| m.max(v.re.abs()));
    let worst = buf.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    if worst > IMAG_TOLERANCE * scale {
        return Err(Error::numerical(format!(
            "inverse transform left an imaginary residue of {worst:e}"
        )));
    }
    Ok(buf.iter().map(|v| v.re).collect())
}

/// Folds each frequency component onto `[0, π]`: `δ_j = min(ω_j, 2π - ω_j)`.
///
/// This is the minimum-norm alias among `ω` and its reflections, so
/// `‖δ‖ / 2π ≤ √2 / 2`.
pub fn alias_map(omega: [f64; 2]) -> [f64; 2] {
    let fold = |w: f64| if w > PI { 2.0 * PI - w } else { w };
    [fold(omega[0]), fold(omega[1])]
}

/// Bernstein weights `V_l = C(L-1, l-1) x^(l-1) (1-x)^(L-l)` at
/// `x = ‖δ‖ / 2π`, for `l = 1..=L`.
pub fn bernstein_weights(n_layers: usize, delta: [f64; 2]) -> Result<Vec<f64>> {
    if n_layers == 0 {
        return Err(Error::usage("at least one layer is required"));
    }
    let x = (delta[0].hypot(delta[1]) / (2.0 * PI)).min(1.0);
    if !x.is_finite() {
        return Err(Error::domain("non-finite frequency"));
    }
    let n = n_layers - 1;
    let mut out = Vec::with_capacity(n_layers);
    let mut binom = 1.0;
    for k in 0..=n {
        out.push(binom * x.powi(k as i32) * (1.0 - x).powi((n - k) as i32));
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    Ok(out)
}

/// Layer weights for every DFT cell, `[p2 * nx + p1][l]`.
fn weight_table(nx: usize, ny: usize, n_layers: usize) -> Result<Vec<Vec<f64>>> {
    let mut table = Vec::with_capacity(nx * ny);
    for p2 in 0..ny {
        for p1 in 0..nx {
            table.push(bernstein_weights(n_layers, alias_map(frequency(p1, p2, nx, ny)))?);
        }
    }
    Ok(table)
}

/// `L` band layers for every timestep of a forecast, `[l][t][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLayers {
    grid: Grid,
    n_layers: usize,
    n_times: usize,
    data: Vec<f64>,
}

impl SpectralLayers {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    #[inline]
    fn offset(&self, l: usize, t: usize) -> usize {
        (l * self.n_times + t) * self.grid.cell_count()
    }

    #[inline]
    pub fn get(&self, l: usize, t: usize, cell: Cell) -> f64 {
        self.data[self.offset(l, t) + self.grid.flat_index(cell)]
    }

    /// Values of every layer at one cell and time, by flat cell index.
    #[inline]
    pub fn covariates_into(&self, t: usize, flat_cell: usize, out: &mut [f64]) {
        let stride = self.n_times * self.grid.cell_count();
        let base = t * self.grid.cell_count() + flat_cell;
        for (l, o) in out.iter_mut().enumerate() {
            *o = self.data[base + l * stride];
        }
    }

    /// Layer `l` as a field over all timesteps.
    pub fn layer(&self, l: usize) -> GriddedField {
        let n = self.n_times * self.grid.cell_count();
        let start = self.offset(l, 0);
        GriddedField { grid: self.grid, n_times: self.n_times, values: self.data[start..start + n].to_vec() }
    }
}

/// Decomposes `field` into `n_layers` frequency bands. With one layer the
/// field itself is returned, bit for bit.
pub fn build_layers(field: &GriddedField, n_layers: usize) -> Result<SpectralLayers> {
    if n_layers == 0 {
        return Err(Error::usage("at least one layer is required"));
    }
    let grid = field.grid;
    if n_layers == 1 {
        return Ok(SpectralLayers { grid, n_layers, n_times: field.n_times, data: field.values.clone() });
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let cells = grid.cell_count();
    let weights = weight_table(nx, ny, n_layers)?;
    let plans = Plans::new(nx, ny);

    let per_time: Vec<Vec<Vec<f64>>> = (0..field.n_times)
        .into_par_iter()
        .map(|t| {
            let src = &field.values[t * cells..(t + 1) * cells];
            let mut spectrum: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            plans.transform(&mut spectrum, nx, ny, true);
            let scale = 1.0 / cells as f64;
            spectrum.iter_mut().for_each(|z| *z *= scale);
            (0..n_layers)
                .map(|l| {
                    let mut buf: Vec<Complex64> =
                        spectrum.iter().zip(&weights).map(|(z, w)| z * w[l]).collect();
                    plans.transform(&mut buf, nx, ny, false);
                    real_part(&buf)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut data = vec![0.0; n_layers * field.n_times * cells];
    for (t, layers) in per_time.into_iter().enumerate() {
        for (l, layer) in layers.into_iter().enumerate() {
            let off = (l * field.n_times + t) * cells;
            data[off..off + cells].copy_from_slice(&layer);
        }
    }
    Ok(SpectralLayers { grid, n_layers, n_times: field.n_times, data })
}

/// `Σ_l α_l X̃_l`, pointwise.
pub fn smoothed_forecast(layers: &SpectralLayers, alpha: &[f64]) -> Result<GriddedField> {
    if alpha.len() != layers.n_layers {
        return Err(Error::usage(format!(
            "{} smoothing coefficients for {} layers",
            alpha.len(),
            layers.n_layers
        )));
    }
    let n = layers.n_times * layers.grid.cell_count();
    let mut values = vec![0.0; n];
    for (l, &a) in alpha.iter().enumerate() {
        let layer = &layers.data[l * n..(l + 1) * n];
        for (v, x) in values.iter_mut().zip(layer) {
            *v += a * x;
        }
    }
    Ok(GriddedField { grid: layers.grid, n_times: layers.n_times, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(P²) evaluation of the normalized forward sum.
    fn direct_dft(x: &DMatrix<f64>) -> DMatrix<Complex64> {
        let (ny, nx) = x.shape();
        DMatrix::from_fn(ny, nx, |p2, p1| {
            let w = frequency(p1, p2, nx, ny);
            let mut acc = Complex64::new(0.0, 0.0);
            for q2 in 0..ny {
                for q1 in 0..nx {
                    let phase = w[0] * q1 as f64 + w[1] * q2 as f64;
                    acc += Complex64::from_polar(1.0, phase) * x[(q2, q1)];
                }
            }
            acc / (nx * ny) as f64
        })
    }

    fn random_field(grid: Grid, t: usize, seed: u64) -> GriddedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..t * grid.cell_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
        GriddedField::new(grid, t, v).unwrap()
    }

    #[test]
    fn constant_field_is_dc_only() {
        let x = DMatrix::from_element(6, 5, 2.5);
        let z = dft2(&x);
        assert!((z[(0, 0)] - Complex64::new(2.5, 0.0)).norm() < 1e-14);
        for (i, v) in z.iter().enumerate() {
            if i != 0 {
                assert!(v.norm() < 1e-14);
            }
        }
    }

    #[test]
    fn cosine_has_two_conjugate_coefficients() {
        let x = DMatrix::from_fn(8, 8, |_, c| (2.0 * PI * c as f64 / 8.0).cos());
        let z = dft2(&x);
        let oracle = direct_dft(&x);
        for (a, b) in z.iter().zip(oracle.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        let big: Vec<(usize, f64)> =
            z.iter().enumerate().filter(|(_, v)| v.norm() > 1e-12).map(|(i, v)| (i, v.norm())).collect();
        assert_eq!(big.len(), 2);
        // column-major storage: (p2=0, p1=1) and (p2=0, p1=7)
        assert_eq!(big[0].0, 8);
        assert_eq!(big[1].0, 56);
        assert!(big.iter().all(|(_, m)| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn fft_matches_direct_sum_on_odd_shapes() {
        let grid = Grid::unit(7, 5).unwrap();
        let f = random_field(grid, 1, 8);
        let x = f.slice(0);
        for (a, b) in dft2(&x).iter().zip(direct_dft(&x).iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_spectrum_is_zero_field() {
        let z = DMatrix::from_element(4, 6, Complex64::new(0.0, 0.0));
        assert!(idft2(&z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_hermitian_spectrum_is_rejected() {
        let mut z = DMatrix::from_element(4, 4, Complex64::new(0.0, 0.0));
        z[(0, 1)] = Complex64::new(1.0, 0.0);
        assert!(matches!(idft2(&z), Err(Error::Numerical(_))));
    }

    #[test]
    fn roundtrip() {
        let grid = Grid::unit(32, 32).unwrap();
        let f = random_field(grid, 1, 1);
        let x = f.slice(0);
        let back = idft2(&dft2(&x)).unwrap();
        let err = (back - &x).abs().max();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn alias_examples() {
        assert_eq!(alias_map([0.0, 0.0]), [0.0, 0.0]);
        let a = alias_map([1.5 * PI, 0.0]);
        assert!((a[0] - 0.5 * PI).abs() < 1e-15 && a[1] == 0.0);
        assert_eq!(alias_map([0.5 * PI, 0.5 * PI]), [0.5 * PI, 0.5 * PI]);
    }

    #[test]
    fn bernstein_examples() {
        assert_eq!(bernstein_weights(1, [1.0, 2.0]).unwrap(), vec![1.0]);
        let w = bernstein_weights(7, [0.0, 0.0]).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[1..].iter().all(|&v| v == 0.0));
        let w = bernstein_weights(3, [PI, 0.0]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15 && (w[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weights_form_a_simplex_at_every_frequency() {
        for &(nx, ny) in &[(8, 8), (64, 48), (13, 7)] {
            for l in [1, 2, 5, 15] {
                for w in weight_table(nx, ny, l).unwrap() {
                    let sum: f64 = w.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                    assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
            for p2 in 0..ny {
                for p1 in 0..nx {
                    let d = alias_map(frequency(p1, p2, nx, ny));
                    assert!(d[0].hypot(d[1]) / (2.0 * PI) <= 2f64.sqrt() / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn layers_sum_to_field() {
        let grid = Grid::unit(20, 12).unwrap();
        let f = random_field(grid, 3, 2);
        for l in [1, 5, 15] {
            let layers = build_layers(&f, l).unwrap();
            let sum = smoothed_forecast(&layers, &vec![1.0; l]).unwrap();
            let err = sum.values().iter().zip(f.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "L={l}: {err}");
        }
        let one = build_layers(&f, 1).unwrap();
        assert_eq!(one.layer(0), f);
    }

    #[test]
    fn constant_field_lives_in_first_layer() {
        let grid = Grid::unit(9, 6).unwrap();
        let f = GriddedField::new(grid, 2, vec![1.7; 108]).unwrap();
        let layers = build_layers(&f, 4).unwrap();
        assert!(layers.layer(0).values().iter().all(|v| (v - 1.7).abs() < 1e-12));
        for l in 1..4 {
            assert!(layers.layer(l).values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn checkerboard_has_less_low_band_energy() {
        let grid = Grid::unit(16, 16).unwrap();
        let checker: Vec<f64> =
            (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let energy_fraction = |f: &GriddedField| {
            let layers = build_layers(f, 5).unwrap();
            let e: Vec<f64> = (0..5).map(|l| layers.layer(l).values().iter().map(|v| v * v).sum()).collect();
            e[0] / e.iter().sum::<f64>()
        };
        let hi = energy_fraction(&GriddedField::new(grid, 1, checker).unwrap());
        let lo = energy_fraction(&GriddedField::new(grid, 1, vec![1.0; 256]).unwrap());
        assert!(hi < lo, "{hi} vs {lo}");
    }

    #[test]
    fn smoothing_coefficient_examples() {
        let grid = Grid::unit(10, 8).unwrap();
        let f = random_field(grid, 2, 5);
        let layers = build_layers(&f, 3).unwrap();
        let zero = smoothed_forecast(&layers, &[0.0; 3]).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let second = smoothed_forecast(&layers, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(second, layers.layer(1));
        assert!(matches!(smoothed_forecast(&layers, &[1.0; 2]), Err(Error::Usage(_))));
    }
}
