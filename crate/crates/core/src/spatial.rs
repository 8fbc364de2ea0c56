//! Grids, unit-square coordinates, station records and cubic B-spline bases.
//!
//! All model math runs on the unit square. Geographic coordinates only appear
//! when reading or writing files, through [`BBox::normalize`] and
//! [`BBox::denormalize`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box `(xmin, xmax, ymin, ymax)` in raw coordinate units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let bbox = BBox { xmin, xmax, ymin, ymax };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn unit() -> Self {
        BBox { xmin: 0.0, xmax: 1.0, ymin: 0.0, ymax: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite());
        if !finite || !(self.xmax > self.xmin) || !(self.ymax > self.ymin) {
            return Err(Error::config(format!(
                "degenerate bounding box ({}, {}, {}, {})",
                self.xmin, self.xmax, self.ymin, self.ymax
            )));
        }
        Ok(())
    }

    /// Affine map onto the unit square; points outside the box are clamped
    /// componentwise.
    pub fn normalize(&self, x: f64, y: f64) -> Result<UnitPoint> {
        self.validate()?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::domain(format!("non-finite coordinate ({x}, {y})")));
        }
        let s1 = (x - self.xmin) / (self.xmax - self.xmin);
        let s2 = (y - self.ymin) / (self.ymax - self.ymin);
        Ok(UnitPoint::clamped(s1, s2))
    }

    pub fn denormalize(&self, p: UnitPoint) -> (f64, f64) {
        (
            self.xmin + p.s1 * (self.xmax - self.xmin),
            self.ymin + p.s2 * (self.ymax - self.ymin),
        )
    }
}

/// A point of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitPoint {
    pub s1: f64,
    pub s2: f64,
}

impl UnitPoint {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s1) || !(0.0..=1.0).contains(&s2) {
            return Err(Error::domain(format!("point ({s1}, {s2}) is outside the unit square")));
        }
        Ok(UnitPoint { s1, s2 })
    }

    /// Projects onto the unit square. NaN coordinates map to 0.
    pub fn clamped(s1: f64, s2: f64) -> Self {
        UnitPoint { s1: clamp01(s1), s2: clamp01(s2) }
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Index of a grid cell; `row` runs along y, `col` along x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

/// Regular grid of `nx × ny` cells whose centers span the bounding box, the
/// first and last centers sitting on its edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    ny: usize,
    bbox: BBox,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, bbox: BBox) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::config(format!("grid must be at least 2x2, got {nx}x{ny}")));
        }
        bbox.validate()?;
        Ok(Grid { nx, ny, bbox })
    }

    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, BBox::unit())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    /// Row-major flat index of a cell.
    #[inline]
    pub fn flat_index(&self, cell: Cell) -> usize {
        cell.row * self.nx + cell.col
    }

    pub fn cell_from_flat(&self, idx: usize) -> Cell {
        Cell { row: idx / self.nx, col: idx % self.nx }
    }

    pub fn normalize(&self, x: f64, y: f64) -> Result<UnitPoint> {
        self.bbox.normalize(x, y)
    }

    pub fn denormalize(&self, p: UnitPoint) -> (f64, f64) {
        self.bbox.denormalize(p)
    }

    pub fn cell_center(&self, cell: Cell) -> UnitPoint {
        UnitPoint {
            s1: cell.col as f64 / (self.nx - 1) as f64,
            s2: cell.row as f64 / (self.ny - 1) as f64,
        }
    }

    /// Cell whose center is nearest to `s`. Ties go to the lower row, then
    /// the lower column.
    ///
    /// Centers form a product lattice, so the Euclidean nearest center is the
    /// pair of per-axis nearest centers.
    #[inline]
    pub fn nearest_cell(&self, s: UnitPoint) -> Cell {
        Cell {
            row: nearest_index(s.s2, self.ny),
            col: nearest_index(s.s1, self.nx),
        }
    }
}

#[inline]
fn nearest_index(u: f64, n: usize) -> usize {
    let pos = clamp01(u) * (n - 1) as f64;
    let lower = pos.floor();
    let idx = if pos - lower > 0.5 { lower as usize + 1 } else { lower as usize };
    idx.min(n - 1)
}

/// Point observations for a set of stations over `n_times` timesteps.
///
/// Missing values are `None` and are left out of every likelihood sum.
#[derive(Debug, Clone, PartialEq)]
pub struct StationData {
    ids: Vec<String>,
    locations: Vec<UnitPoint>,
    n_times: usize,
    values: Vec<Option<f64>>,
}

impl StationData {
    /// `values` is time-major: entry `t * n_stations + i`.
    pub fn new(
        ids: Vec<String>,
        locations: Vec<UnitPoint>,
        n_times: usize,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        if ids.len() != locations.len() {
            return Err(Error::usage(format!(
                "{} station ids but {} locations",
                ids.len(),
                locations.len()
            )));
        }
        if values.len() != n_times * ids.len() {
            return Err(Error::usage(format!(
                "expected {} values for {} stations over {} times, got {}",
                n_times * ids.len(),
                ids.len(),
                n_times,
                values.len()
            )));
        }
        for p in &locations {
            UnitPoint::new(p.s1, p.s2)?;
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite observation value".into()));
        }
        Ok(StationData { ids, locations, n_times, values })
    }

    pub fn n_stations(&self) -> usize {
        self.ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn locations(&self) -> &[UnitPoint] {
        &self.locations
    }

    pub fn value(&self, t: usize, station: usize) -> Option<f64> {
        self.values[t * self.ids.len() + station]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Cubic B-spline basis on a clamped uniform knot vector over `[0, 1]`.
///
/// `knot_count` is the number of basis functions.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    knot_count: usize,
    knots: Vec<f64>,
}

pub const SPLINE_DEGREE: usize = 3;

impl BSplineBasis {
    pub fn new(knot_count: usize) -> Result<Self> {
        if knot_count < SPLINE_DEGREE + 1 {
            return Err(Error::config(format!(
                "a cubic basis needs at least 4 functions, got {knot_count}"
            )));
        }
        let spans = knot_count - SPLINE_DEGREE;
        let mut knots = Vec::with_capacity(knot_count + SPLINE_DEGREE + 1);
        knots.extend(std::iter::repeat_n(0.0, SPLINE_DEGREE + 1));
        for i in 1..spans {
            knots.push(i as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, SPLINE_DEGREE + 1));
        Ok(BSplineBasis { knot_count, knots })
    }

    pub fn knot_count(&self) -> usize {
        self.knot_count
    }

    pub fn degree(&self) -> usize {
        SPLINE_DEGREE
    }

    /// Full knot vector, `knot_count + 4` entries.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// All `knot_count` basis values at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let (first, local) = self.eval_local(x)?;
        let mut out = vec![0.0; self.knot_count];
        out[first..first + 4].copy_from_slice(&local);
        Ok(out)
    }

    /// The four possibly nonzero basis values at `x` and the index of the
    /// first of them.
    pub fn eval_local(&self, x: f64) -> Result<(usize, [f64; 4])> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::domain(format!("spline argument {x} outside [0, 1]")));
        }
        Ok(self.local_unchecked(x))
    }

    /// `eval_local` for arguments already known to lie in `[0, 1]`.
    pub(crate) fn local_unchecked(&self, x: f64) -> (usize, [f64; 4]) {
        let spans = self.knot_count - SPLINE_DEGREE;
        let span = (SPLINE_DEGREE + (x * spans as f64).floor() as usize).min(self.knot_count - 1);
        let t = &self.knots;
        let mut n = [0.0; 4];
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        n[0] = 1.0;
        for j in 1..=SPLINE_DEGREE {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span - SPLINE_DEGREE, n)
    }
}

/// Products `A_j(s1) B_k(s2)` as a `J × K` matrix.
pub fn tensor_eval(basis_x: &BSplineBasis, basis_y: &BSplineBasis, s: UnitPoint) -> Result<DMatrix<f64>> {
    let a = basis_x.eval(s.s1)?;
    let b = basis_y.eval(s.s2)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |j, k| a[j] * b[k]))
}

/// Sparse tensor-product weights: `(j * K + k, weight)` for the at most 16
/// nonzero products.
pub fn tensor_eval_sparse(
    basis_x: &BSplineBasis,
    basis_y: &BSplineBasis,
    s: UnitPoint,
) -> Result<Vec<(usize, f64)>> {
    let (jx, ax) = basis_x.eval_local(s.s1)?;
    let (ky, by) = basis_y.eval_local(s.s2)?;
    let k_count = basis_y.knot_count();
    let mut out = Vec::with_capacity(16);
    for (dj, &wa) in ax.iter().enumerate() {
        if wa == 0.0 {
            continue;
        }
        for (dk, &wb) in by.iter().enumerate() {
            if wb == 0.0 {
                continue;
            }
            out.push(((jx + dj) * k_count + ky + dk, wa * wb));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recursive definition on half-open spans, kept independent of
    /// `eval_local`. Valid for x < 1.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x);
        }
        v
    }

    fn oracle(basis: &BSplineBasis, x: f64) -> Vec<f64> {
        (0..basis.knot_count()).map(|i| cox_de_boor(basis.knots(), i, 3, x)).collect()
    }

    #[test]
    fn normalize_examples() {
        let bbox = BBox::new(0.0, 10.0, 0.0, 5.0).unwrap();
        assert_eq!(bbox.normalize(5.0, 2.5).unwrap(), UnitPoint { s1: 0.5, s2: 0.5 });
        assert_eq!(bbox.normalize(0.0, 0.0).unwrap(), UnitPoint { s1: 0.0, s2: 0.0 });
        assert_eq!(bbox.normalize(12.0, 2.5).unwrap(), UnitPoint { s1: 1.0, s2: 0.5 });
    }

    #[test]
    fn degenerate_bbox_is_config_error() {
        assert!(matches!(BBox::new(1.0, 1.0, 0.0, 2.0), Err(Error::Config(_))));
        let bad = BBox { xmin: 0.0, xmax: 1.0, ymin: 3.0, ymax: 3.0 };
        assert!(matches!(bad.normalize(0.5, 3.0), Err(Error::Config(_))));
        assert!(Grid::new(1, 5, BBox::unit()).is_err());
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let bbox = BBox::new(-124.7, -116.9, 45.5, 49.0).unwrap();
        for i in 1..50 {
            let x = -124.7 + 7.8 * i as f64 / 50.0;
            let y = 45.5 + 3.5 * (50 - i) as f64 / 50.0;
            let (x2, y2) = bbox.denormalize(bbox.normalize(x, y).unwrap());
            assert!((x - x2).abs() < 1e-12 && (y - y2).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_endpoints() {
        for n in 4..12 {
            let b = BSplineBasis::new(n).unwrap();
            let w0 = b.eval(0.0).unwrap();
            assert_eq!(w0[0], 1.0);
            assert!(w0[1..].iter().all(|&w| w == 0.0));
            let w1 = b.eval(1.0).unwrap();
            assert_eq!(w1[n - 1], 1.0);
            assert!(w1[..n - 1].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn spline_matches_cox_de_boor_at_037() {
        let b = BSplineBasis::new(6).unwrap();
        let got = b.eval(0.37).unwrap();
        let want = oracle(&b, 0.37);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn spline_domain_error() {
        let b = BSplineBasis::new(5).unwrap();
        assert!(matches!(b.eval(1.0 + 1e-9), Err(Error::Domain(_))));
        assert!(matches!(b.eval(-0.1), Err(Error::Domain(_))));
        assert!(BSplineBasis::new(3).is_err());
    }

    #[test]
    fn tensor_corners_and_outer_product() {
        let bx = BSplineBasis::new(6).unwrap();
        let by = BSplineBasis::new(4).unwrap();
        let t = tensor_eval(&bx, &by, UnitPoint { s1: 0.0, s2: 0.0 }).unwrap();
        assert_eq!(t[(0, 0)], 1.0);
        assert_eq!(t.sum(), 1.0);
        let t = tensor_eval(&bx, &by, UnitPoint { s1: 1.0, s2: 1.0 }).unwrap();
        assert_eq!(t[(5, 3)], 1.0);
        assert_eq!(t.sum(), 1.0);

        let s = UnitPoint { s1: 0.3, s2: 0.8 };
        let t = tensor_eval(&bx, &by, s).unwrap();
        let a = oracle(&bx, 0.3);
        let b = oracle(&by, 0.8);
        for j in 0..6 {
            for k in 0..4 {
                assert!((t[(j, k)] - a[j] * b[k]).abs() < 1e-12);
            }
        }
        let sparse = tensor_eval_sparse(&bx, &by, s).unwrap();
        for (idx, w) in sparse {
            assert!((t[(idx / 4, idx % 4)] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_cell_examples() {
        let g = Grid::unit(5, 3).unwrap();
        let c = Cell { row: 1, col: 3 };
        assert_eq!(g.nearest_cell(g.cell_center(c)), c);
        assert_eq!(g.nearest_cell(UnitPoint { s1: 0.0, s2: 0.0 }), Cell { row: 0, col: 0 });
        assert_eq!(g.nearest_cell(UnitPoint { s1: 1.0, s2: 1.0 }), Cell { row: 2, col: 4 });
        // halfway between col 1 (0.25) and col 2 (0.5), and between rows 0 and 1
        assert_eq!(g.nearest_cell(UnitPoint { s1: 0.375, s2: 0.25 }), Cell { row: 0, col: 1 });
    }

    #[test]
    fn nearest_cell_brute_force() {
        let g = Grid::unit(7, 4).unwrap();
        for i in 0..=40 {
            for j in 0..=40 {
                let s = UnitPoint { s1: i as f64 / 40.0 + 0.0031, s2: j as f64 / 40.0 + 0.0017 };
                let s = UnitPoint::clamped(s.s1, s.s2);
                let mut best = (f64::INFINITY, Cell { row: 0, col: 0 });
                for row in 0..4 {
                    for col in 0..7 {
                        let c = g.cell_center(Cell { row, col });
                        let d = (c.s1 - s.s1).powi(2) + (c.s2 - s.s2).powi(2);
                        if d < best.0 {
                            best = (d, Cell { row, col });
                        }
                    }
                }
                assert_eq!(g.nearest_cell(s), best.1);
            }
        }
    }

    #[test]
    fn station_data_validation() {
        let locs = vec![UnitPoint { s1: 0.1, s2: 0.2 }];
        assert!(StationData::new(vec!["a".into()], locs.clone(), 2, vec![Some(1.0), None]).is_ok());
        assert!(StationData::new(vec!["a".into()], locs.clone(), 2, vec![Some(1.0)]).is_err());
        assert!(StationData::new(vec!["a".into()], locs, 1, vec![Some(f64::NAN)]).is_err());
    }
}
