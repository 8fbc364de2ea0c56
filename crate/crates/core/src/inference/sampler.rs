//! Metropolis-within-Gibbs on per-station sufficient statistics.
//!
//! Each station keeps `Σ_t x xᵀ`, `Σ_t x` and `Σ_t x y` for the covariate
//! cell its warped location currently falls in. Warp proposals only touch
//! the stations inside the moved node's support, and a proposal that leaves
//! every cell unchanged needs no likelihood evaluation at all.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::design::{collapsed_loglik, draw_from_precision};
use super::{Model, ModelState, PosteriorSamples};
use crate::error::{Error, Result};
use crate::priors::{car_gaussian_logpdf, CarStructure, HyperParam};
use crate::spatial::{tensor_eval_sparse, StationData, UnitPoint};
use crate::spectral::SpectralLayers;

/// Metropolis blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// One lattice node of the warp, both axes jointly.
    Warp,
    /// Common translation of every warp node.
    WarpShift,
    /// Joint rescaling of `σ_a²` and the warp coefficients.
    WarpScale,
    SigmaA2,
    Rho0,
    RhoA,
    RhoX,
}

impl Block {
    pub const ALL: [Block; 7] =
        [Block::Warp, Block::WarpShift, Block::WarpScale, Block::SigmaA2, Block::Rho0, Block::RhoA, Block::RhoX];

    pub fn name(&self) -> &'static str {
        match self {
            Block::Warp => "warp",
            Block::WarpShift => "warp_shift",
            Block::WarpScale => "warp_scale",
            Block::SigmaA2 => "sigma_a2",
            Block::Rho0 => "rho0",
            Block::RhoA => "rhoa",
            Block::RhoX => "rhox",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Post-burn-in acceptance counts for one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: Block,
    pub proposed: u64,
    pub accepted: u64,
    pub rate: f64,
}

/// Result of [`random_walk_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub x: Vec<f64>,
    pub log_target: f64,
    pub accepted: bool,
}

/// One Gaussian random-walk Metropolis step. `target` returns `None` (or a
/// non-finite value) outside the support, which rejects the proposal.
pub fn random_walk_step<R, F>(x: &[f64], log_target: f64, scale: f64, mut target: F, rng: &mut R) -> Step
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Option<f64>,
{
    let proposal: Vec<f64> = x.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    match target(&proposal) {
        Some(lp) if lp.is_finite() && accept(lp - log_target, rng) => {
            Step { x: proposal, log_target: lp, accepted: true }
        }
        _ => Step { x: x.to_vec(), log_target, accepted: false },
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const LOG_SCALE_BOUNDS: (f64, f64) = (-18.0, 4.6);

#[derive(Debug, Clone)]
struct CellStats {
    g: Vec<f64>,
    h: Vec<f64>,
    gy: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Station {
    loc: UnitPoint,
    obs: Vec<(usize, f64)>,
    n: f64,
    yy: f64,
    ys: f64,
    /// Nonzero intercept basis products.
    basis: Vec<(usize, f64)>,
    disp: [f64; 2],
    cell: usize,
    stats: CellStats,
    /// `b0 + B(s) b`.
    c: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    proposed: u64,
    accepted: u64,
}

#[derive(Debug, Clone)]
struct Scales {
    warp: Vec<f64>,
    single: [f64; 7],
}

/// Prior precision and log determinant of the coefficients integrated out
/// of the warp likelihood, for the current variances and correlations.
#[derive(Debug, Clone)]
struct CollapsedPrior {
    prec: DMatrix<f64>,
    log_det: f64,
}

type Change = (usize, usize, Option<CellStats>);

pub struct Sampler<'a> {
    model: &'a Model,
    layers: &'a SpectralLayers,
    rng: ChaCha8Rng,
    state: ModelState,
    stations: Vec<Station>,
    /// Stations in the support of each warp node, with their weights.
    node_stations: Vec<Vec<(usize, f64)>>,
    n_obs: usize,
    n_layers: usize,
    ictic: DMatrix<f64>,
    icty: DVector<f64>,
    yy: f64,
    ys: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    /// `Σ_i [1; B_i] h_iᵀ`.
    ictx: DMatrix<f64>,
    xtc: DVector<f64>,
    /// `Σ (y - c)²`.
    rr: f64,
    car_b: Option<CarStructure>,
    car_a: Option<CarStructure>,
    car_x: CarStructure,
    collapsed_prior: Option<CollapsedPrior>,
    ll: f64,
    scales: Scales,
    counters: [Counter; 7],
    iter: usize,
    buf: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Model, layers: &'a SpectralLayers, stations: &StationData, times: &[usize]) -> Result<Self> {
        let n_layers = model.dims().n_layers;
        if layers.n_layers() != n_layers {
            return Err(Error::usage(format!(
                "model expects {n_layers} layers but {} were supplied",
                layers.n_layers()
            )));
        }
        for &t in times {
            if t >= layers.n_times() || t >= stations.n_times() {
                return Err(Error::usage(format!("time index {t} out of range")));
            }
        }
        let jk = model.dims().intercept_len();
        let p0 = 1 + jk;
        let mut ictic = DMatrix::zeros(p0, p0);
        let mut icty = DVector::zeros(p0);
        let mut list = Vec::with_capacity(stations.n_stations());
        let (mut n_obs, mut yy_all, mut ys_all) = (0, 0.0, 0.0);
        for (i, &loc) in stations.locations().iter().enumerate() {
            let obs: Vec<(usize, f64)> =
                times.iter().filter_map(|&t| stations.value(t, i).map(|y| (t, y))).collect();
            let basis = match model.intercept_bases() {
                Some((bx, by)) => tensor_eval_sparse(bx, by, loc)?,
                None => Vec::new(),
            };
            let n = obs.len() as f64;
            let yy: f64 = obs.iter().map(|(_, y)| y * y).sum();
            let ys: f64 = obs.iter().map(|(_, y)| y).sum();
            let mut row = vec![(0, 1.0)];
            row.extend(basis.iter().map(|&(k, w)| (k + 1, w)));
            for &(a, wa) in &row {
                icty[a] += wa * ys;
                for &(b, wb) in &row {
                    ictic[(a, b)] += n * wa * wb;
                }
            }
            n_obs += obs.len();
            yy_all += yy;
            ys_all += ys;
            list.push(Station {
                loc,
                obs,
                n,
                yy,
                ys,
                basis,
                disp: [0.0; 2],
                cell: 0,
                stats: CellStats { g: Vec::new(), h: Vec::new(), gy: Vec::new() },
                c: 0.0,
            });
        }

        let mut node_stations = Vec::new();
        if let Some((bx, by)) = model.warp_bases() {
            node_stations = vec![Vec::new(); bx.knot_count() * by.knot_count()];
            for (i, st) in list.iter().enumerate() {
                for (node, w) in tensor_eval_sparse(bx, by, st.loc)? {
                    node_stations[node].push((i, w));
                }
            }
        }

        let config = model.config();
        let p = config.proposals;
        let mut single = [0.0; 7];
        single[Block::WarpShift.index()] = p.warp_shift.ln();
        single[Block::WarpScale.index()] = p.sigma_a2.ln();
        single[Block::SigmaA2.index()] = p.sigma_a2.ln();
        single[Block::Rho0.index()] = p.rho.ln();
        single[Block::RhoA.index()] = p.rho.ln();
        single[Block::RhoX.index()] = p.rho.ln();
        let state = ModelState::initial(model.dims());

        let mut sampler = Sampler {
            model,
            layers,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            car_b: model.car_b(state.rho0)?,
            car_a: model.car_a(state.rhoa)?,
            car_x: model.car_x(state.rhox)?,
            state,
            stations: list,
            scales: Scales { warp: vec![p.warp.ln(); node_stations.len()], single },
            node_stations,
            n_obs,
            n_layers,
            ictic,
            icty,
            yy: yy_all,
            ys: ys_all,
            xtx: DMatrix::zeros(n_layers, n_layers),
            xty: DVector::zeros(n_layers),
            ictx: DMatrix::zeros(p0, n_layers),
            xtc: DVector::zeros(n_layers),
            rr: 0.0,
            collapsed_prior: None,
            ll: 0.0,
            counters: [Counter::default(); 7],
            iter: 0,
            buf: vec![0.0; n_layers],
        };
        sampler.sync()?;
        Ok(sampler)
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Replaces the current state and recomputes every cached quantity.
    pub fn set_state(&mut self, state: ModelState) -> Result<()> {
        let dims = self.model.dims();
        if state.b.len() != dims.intercept_len() || state.a.len() != dims.warp_len() || state.beta.len() != dims.n_layers
        {
            return Err(Error::usage("state dimensions do not match the model"));
        }
        self.state = state;
        self.car_b = self.model.car_b(self.state.rho0)?;
        self.car_a = self.model.car_a(self.state.rhoa)?;
        self.car_x = self.model.car_x(self.state.rhox)?;
        self.sync()
    }

    /// Log-likelihood with the layer coefficients integrated out (and the
    /// intercept coefficients too when the model is configured that way),
    /// from the running sufficient statistics.
    pub fn current_loglik(&mut self) -> Result<f64> {
        self.refresh_collapsed_prior()?;
        self.collapsed(&self.xtx, &self.xty, &self.xtc, &self.ictx)
    }

    /// Post-burn-in acceptance for the blocks active in this variant.
    pub fn acceptance(&self) -> Vec<BlockAcceptance> {
        self.active_blocks()
            .into_iter()
            .map(|block| {
                let c = self.counters[block.index()];
                let rate = if c.proposed == 0 { 0.0 } else { c.accepted as f64 / c.proposed as f64 };
                BlockAcceptance { block, proposed: c.proposed, accepted: c.accepted, rate }
            })
            .collect()
    }

    fn active_blocks(&self) -> Vec<Block> {
        let v = self.model.variant();
        Block::ALL
            .into_iter()
            .filter(|b| match b {
                Block::Warp | Block::WarpShift | Block::WarpScale | Block::SigmaA2 | Block::RhoA => v.has_warp(),
                Block::Rho0 => v.has_spatial_intercept(),
                Block::RhoX => v.has_smoothing(),
            })
            .collect()
    }

    fn cell_stats(&mut self, i: usize, cell: usize) -> CellStats {
        let l = self.n_layers;
        let mut s = CellStats { g: vec![0.0; l * l], h: vec![0.0; l], gy: vec![0.0; l] };
        for &(t, y) in &self.stations[i].obs {
            self.layers.covariates_into(t, cell, &mut self.buf);
            for a in 0..l {
                let xa = self.buf[a];
                s.h[a] += xa;
                s.gy[a] += xa * y;
                let row = &mut s.g[a * l..(a + 1) * l];
                for (g, xb) in row.iter_mut().zip(&self.buf) {
                    *g += xa * xb;
                }
            }
        }
        s
    }

    fn target_cell(&self, loc: UnitPoint, d: [f64; 2]) -> usize {
        let grid = self.layers.grid();
        grid.flat_index(grid.nearest_cell(UnitPoint::clamped(loc.s1 + d[0], loc.s2 + d[1])))
    }

    /// Recomputes displacements, cells, statistics and aggregates from the
    /// current state.
    fn sync(&mut self) -> Result<()> {
        let warp = self.model.warp_field(&self.state)?;
        for i in 0..self.stations.len() {
            let loc = self.stations[i].loc;
            let disp = warp.as_ref().map_or([0.0; 2], |w| w.displacement(loc));
            let cell = self.target_cell(loc, disp);
            let stats = self.cell_stats(i, cell);
            let st = &mut self.stations[i];
            st.disp = disp;
            st.cell = cell;
            st.stats = stats;
        }
        self.update_intercepts();
        self.rebuild_aggregates();
        Ok(())
    }

    fn update_intercepts(&mut self) {
        let (b0, b) = (self.state.b0, &self.state.b);
        for st in &mut self.stations {
            st.c = b0 + st.basis.iter().map(|&(k, w)| w * b[k]).sum::<f64>();
        }
    }

    fn rebuild_aggregates(&mut self) {
        let l = self.n_layers;
        self.xtx.fill(0.0);
        self.xty.fill(0.0);
        self.ictx.fill(0.0);
        self.xtc.fill(0.0);
        self.rr = 0.0;
        for st in &self.stations {
            if st.obs.is_empty() {
                continue;
            }
            add_station(&mut self.xtx, &mut self.xty, &mut self.xtc, Some(&mut self.ictx), st, &st.stats, 1.0, l);
            self.rr += st.yy - 2.0 * st.c * st.ys + st.n * st.c * st.c;
        }
    }

    fn refresh_collapsed_prior(&mut self) -> Result<()> {
        let s = &self.state;
        let tau2 = self.model.priors().tau2;
        let scale = s.sigma2 * tau2;
        let l = self.n_layers;
        let include_b = self.marginalize_b();
        let jk = if include_b { self.state.b.len() } else { 0 };
        let mut prec = DMatrix::zeros(jk + l, jk + l);
        let mut log_det = 0.0;
        if include_b {
            let cb = self.car_b.as_ref().expect("intercept lattice");
            prec.view_mut((0, 0), (jk, jk)).copy_from(&(cb.precision() / s.sigma02));
            log_det += cb.log_det() - jk as f64 * s.sigma02.ln();
        }
        prec.view_mut((jk, jk), (l, l)).copy_from(&(self.car_x.precision() / scale));
        log_det += self.car_x.log_det() - l as f64 * scale.ln();
        self.collapsed_prior = Some(CollapsedPrior { prec, log_det });
        Ok(())
    }

    fn marginalize_b(&self) -> bool {
        self.model.config().marginalize_intercept && !self.state.b.is_empty()
    }

    fn collapsed(
        &self,
        xtx: &DMatrix<f64>,
        xty: &DVector<f64>,
        xtc: &DVector<f64>,
        ictx: &DMatrix<f64>,
    ) -> Result<f64> {
        let prior = self.collapsed_prior.as_ref().expect("collapsed prior is refreshed before use");
        let sigma2 = self.state.sigma2;
        if !self.marginalize_b() {
            let xtr = xty - xtc;
            return collapsed_loglik(xtx, &xtr, self.rr, self.n_obs, sigma2, &prior.prec, prior.log_det);
        }
        let b0 = self.state.b0;
        let jk = self.state.b.len();
        let l = self.n_layers;
        let mut wtw = DMatrix::zeros(jk + l, jk + l);
        wtw.view_mut((0, 0), (jk, jk)).copy_from(&self.ictic.view((1, 1), (jk, jk)));
        let btx = ictx.rows(1, jk);
        wtw.view_mut((0, jk), (jk, l)).copy_from(&btx);
        wtw.view_mut((jk, 0), (l, jk)).copy_from(&btx.transpose());
        wtw.view_mut((jk, jk), (l, l)).copy_from(xtx);
        let mut wtr = DVector::zeros(jk + l);
        for k in 0..jk {
            wtr[k] = self.icty[1 + k] - b0 * self.ictic[(1 + k, 0)];
        }
        for k in 0..l {
            wtr[jk + k] = xty[k] - b0 * ictx[(0, k)];
        }
        let n = self.n_obs as f64;
        let rr = self.yy - 2.0 * b0 * self.ys + n * b0 * b0;
        collapsed_loglik(&wtw, &wtr, rr, self.n_obs, sigma2, &prior.prec, prior.log_det)
    }

    /// Likelihood after replacing the statistics of the listed stations.
    fn proposal_loglik(&self, changes: &[Change]) -> Result<f64> {
        let l = self.n_layers;
        let mut xtx = self.xtx.clone();
        let mut xty = self.xty.clone();
        let mut xtc = self.xtc.clone();
        let mut ictx = if self.marginalize_b() { Some(self.ictx.clone()) } else { None };
        for (i, _, new) in changes {
            let Some(new) = new else { continue };
            let st = &self.stations[*i];
            add_station(&mut xtx, &mut xty, &mut xtc, ictx.as_mut(), st, &st.stats, -1.0, l);
            add_station(&mut xtx, &mut xty, &mut xtc, ictx.as_mut(), st, new, 1.0, l);
        }
        self.collapsed(&xtx, &xty, &xtc, ictx.as_ref().unwrap_or(&self.ictx))
    }

    fn apply_changes(&mut self, changes: Vec<Change>) {
        let l = self.n_layers;
        for (i, cell, new) in changes {
            if let Some(new) = new {
                let st = &self.stations[i];
                add_station(&mut self.xtx, &mut self.xty, &mut self.xtc, Some(&mut self.ictx), st, &st.stats, -1.0, l);
                add_station(&mut self.xtx, &mut self.xty, &mut self.xtc, Some(&mut self.ictx), st, &new, 1.0, l);
                self.stations[i].stats = new;
            }
            self.stations[i].cell = cell;
        }
    }

    /// Cell changes implied by new displacements of the given stations.
    fn changes_for(&mut self, moved: &[(usize, [f64; 2])]) -> Vec<Change> {
        let mut changes = Vec::new();
        for &(i, d) in moved {
            let cell = self.target_cell(self.stations[i].loc, d);
            if cell != self.stations[i].cell {
                let stats = if self.stations[i].obs.is_empty() { None } else { Some(self.cell_stats(i, cell)) };
                changes.push((i, cell, stats));
            }
        }
        changes
    }

    fn changed_loglik(&self, changes: &[Change]) -> Option<f64> {
        if changes.iter().all(|c| c.2.is_none()) {
            return Some(self.ll);
        }
        self.proposal_loglik(changes).ok().filter(|v| v.is_finite())
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn record(&mut self, block: Block, node: Option<usize>, accepted: bool) {
        let config = self.model.config();
        if self.iter < config.n_burn {
            if config.adapt {
                let gain = ((self.iter + 1) as f64).powf(-0.6);
                let step = gain * (f64::from(u8::from(accepted)) - config.target_acceptance);
                let slot = match node {
                    Some(k) => &mut self.scales.warp[k],
                    None => &mut self.scales.single[block.index()],
                };
                *slot = (*slot + step).clamp(LOG_SCALE_BOUNDS.0, LOG_SCALE_BOUNDS.1);
            }
        } else {
            let c = &mut self.counters[block.index()];
            c.proposed += 1;
            c.accepted += u64::from(accepted);
        }
    }

    fn n_nodes(&self) -> usize {
        self.node_stations.len()
    }

    fn node_move(&mut self, node: usize) -> bool {
        let scale = self.scales.warp[node].exp();
        let delta = [scale * self.normal(), scale * self.normal()];
        let nn = self.n_nodes();
        let car = self.car_a.as_ref().expect("warp lattice");
        let mut dq = 0.0;
        for (l, d) in delta.iter().enumerate() {
            let a = &self.state.a[l * nn..(l + 1) * nn];
            dq += 2.0 * d * car.precision_row_dot(node, a) + d * d * car.degree(node);
        }
        let log_prior = -dq / (2.0 * self.state.sigmaa2);
        let moved: Vec<(usize, [f64; 2])> = self.node_stations[node]
            .iter()
            .map(|&(i, w)| {
                let d = self.stations[i].disp;
                (i, [d[0] + delta[0] * w, d[1] + delta[1] * w])
            })
            .collect();
        let changes = self.changes_for(&moved);
        let accepted = match self.changed_loglik(&changes) {
            Some(ll) => {
                let ok = accept(ll - self.ll + log_prior, &mut self.rng);
                if ok {
                    self.state.a[node] += delta[0];
                    self.state.a[nn + node] += delta[1];
                    for &(i, d) in &moved {
                        self.stations[i].disp = d;
                    }
                    self.apply_changes(changes);
                    self.ll = ll;
                }
                ok
            }
            None => false,
        };
        self.record(Block::Warp, Some(node), accepted);
        accepted
    }

    fn warp_quad(&self, a: &[f64]) -> f64 {
        let nn = self.n_nodes();
        let car = self.car_a.as_ref().expect("warp lattice");
        car.quad_form(&a[..nn]) + car.quad_form(&a[nn..])
    }

    /// Proposes new warp coefficients and station displacements together,
    /// with `extra` added to the log acceptance ratio.
    fn global_warp_move(
        &mut self,
        block: Block,
        a_new: Vec<f64>,
        disp_new: Vec<[f64; 2]>,
        sigmaa2_new: f64,
        extra: f64,
    ) -> bool {
        let moved: Vec<(usize, [f64; 2])> = disp_new.iter().copied().enumerate().collect();
        let changes = self.changes_for(&moved);
        let priors = self.model.priors();
        let log_prior_new = -self.warp_quad(&a_new) / (2.0 * sigmaa2_new);
        let log_prior_old = -self.warp_quad(&self.state.a) / (2.0 * self.state.sigmaa2);
        let accepted = match self.changed_loglik(&changes) {
            Some(ll) if sigmaa2_new.is_finite() && sigmaa2_new > 0.0 => {
                let ratio = ll - self.ll + log_prior_new - log_prior_old
                    + priors.logpdf(HyperParam::SigmaA2, sigmaa2_new)
                    - priors.logpdf(HyperParam::SigmaA2, self.state.sigmaa2)
                    + extra;
                let ok = accept(ratio, &mut self.rng);
                if ok {
                    self.state.a = a_new;
                    self.state.sigmaa2 = sigmaa2_new;
                    for (st, d) in self.stations.iter_mut().zip(disp_new) {
                        st.disp = d;
                    }
                    self.apply_changes(changes);
                    self.ll = ll;
                }
                ok
            }
            _ => false,
        };
        self.record(block, None, accepted);
        accepted
    }

    fn shift_move(&mut self) -> bool {
        let scale = self.scales.single[Block::WarpShift.index()].exp();
        let delta = [scale * self.normal(), scale * self.normal()];
        let nn = self.n_nodes();
        let a_new: Vec<f64> = self.state.a.iter().enumerate().map(|(k, v)| v + delta[k / nn]).collect();
        let disp: Vec<[f64; 2]> = self.stations.iter().map(|s| [s.disp[0] + delta[0], s.disp[1] + delta[1]]).collect();
        // σ_a² prior terms cancel in the ratio; only the coefficient prior moves
        self.global_warp_move(Block::WarpShift, a_new, disp, self.state.sigmaa2, 0.0)
    }

    fn scale_move(&mut self) -> bool {
        let u = self.scales.single[Block::WarpScale.index()].exp() * self.normal();
        let f = (0.5 * u).exp();
        let a_new: Vec<f64> = self.state.a.iter().map(|v| v * f).collect();
        let disp: Vec<[f64; 2]> = self.stations.iter().map(|s| [s.disp[0] * f, s.disp[1] * f]).collect();
        let sigmaa2 = self.state.sigmaa2 * u.exp();
        // Jacobian of (log σ_a², a) ↦ (log σ_a² + u, a e^{u/2}) cancels the
        // coefficient density normalizer; `u` converts the prior to log scale
        let n = self.state.a.len() as f64;
        self.global_warp_move(Block::WarpScale, a_new, disp, sigmaa2, u + 0.5 * n * u - 0.5 * n * u)
    }

    /// Log full conditional of a scalar hyperparameter, on the natural scale.
    fn scalar_log_target(&self, block: Block, value: f64) -> Option<f64> {
        let s = &self.state;
        let priors = self.model.priors();
        let nn = self.n_nodes();
        let lp = match block {
            Block::SigmaA2 => {
                let car = self.car_a.as_ref()?;
                car_gaussian_logpdf(&s.a[..nn], value, car).ok()?
                    + car_gaussian_logpdf(&s.a[nn..], value, car).ok()?
                    + priors.logpdf(HyperParam::SigmaA2, value)
            }
            Block::RhoA => {
                let car = self.car_a.as_ref()?.with_rho(value).ok()?;
                car_gaussian_logpdf(&s.a[..nn], s.sigmaa2, &car).ok()?
                    + car_gaussian_logpdf(&s.a[nn..], s.sigmaa2, &car).ok()?
                    + priors.logpdf(HyperParam::RhoA, value)
            }
            Block::Rho0 => {
                let car = self.car_b.as_ref()?.with_rho(value).ok()?;
                car_gaussian_logpdf(&s.b, s.sigma02, &car).ok()? + priors.logpdf(HyperParam::Rho0, value)
            }
            Block::RhoX => {
                let car = self.car_x.with_rho(value).ok()?;
                car_gaussian_logpdf(&s.beta, s.sigma2 * priors.tau2, &car).ok()?
                    + priors.logpdf(HyperParam::RhoX, value)
            }
            Block::Warp | Block::WarpShift | Block::WarpScale => return None,
        };
        lp.is_finite().then_some(lp)
    }

    fn scalar_value(&self, block: Block) -> f64 {
        match block {
            Block::SigmaA2 => self.state.sigmaa2,
            Block::RhoA => self.state.rhoa,
            Block::Rho0 => self.state.rho0,
            Block::RhoX => self.state.rhox,
            _ => unreachable!("not a scalar block"),
        }
    }

    /// Random walk on `log σ_a²` or `logit ρ`, Jacobian included.
    fn scalar_move(&mut self, block: Block) -> Result<bool> {
        let log_scale = block == Block::SigmaA2;
        let to_latent = |v: f64| if log_scale { v.ln() } else { logit(v) };
        let from_latent = |z: f64| if log_scale { z.exp() } else { logistic(z) };
        let log_jac = |v: f64| if log_scale { v.ln() } else { v.ln() + (1.0 - v).ln() };
        let current = self.scalar_value(block);
        let scale = self.scales.single[block.index()].exp();
        let z = to_latent(current) + scale * self.normal();
        let proposal = from_latent(z);
        let accepted = match (self.scalar_log_target(block, proposal), self.scalar_log_target(block, current)) {
            (Some(new), Some(old)) => {
                let ratio = new + log_jac(proposal) - old - log_jac(current);
                accept(ratio, &mut self.rng)
            }
            _ => false,
        };
        if accepted {
            match block {
                Block::SigmaA2 => self.state.sigmaa2 = proposal,
                Block::RhoA => {
                    self.state.rhoa = proposal;
                    self.car_a = self.model.car_a(proposal)?;
                }
                Block::Rho0 => {
                    self.state.rho0 = proposal;
                    self.car_b = self.model.car_b(proposal)?;
                }
                Block::RhoX => {
                    self.state.rhox = proposal;
                    self.car_x = self.model.car_x(proposal)?;
                }
                _ => unreachable!("not a scalar block"),
            }
        }
        self.record(block, None, accepted);
        Ok(accepted)
    }

    /// Runs one Metropolis update of `block` and returns the number of
    /// accepted proposals (a warp block sweeps every node).
    pub fn metropolis_block(&mut self, block: Block) -> Result<usize> {
        if !self.active_blocks().contains(&block) {
            return Err(Error::usage(format!("block '{}' is not part of this variant", block.name())));
        }
        match block {
            Block::Warp | Block::WarpShift | Block::WarpScale => {
                self.refresh_collapsed_prior()?;
                self.ll = self.collapsed(&self.xtx, &self.xty, &self.xtc, &self.ictx)?;
                Ok(match block {
                    Block::Warp => (0..self.n_nodes()).filter(|&k| self.node_move(k)).count(),
                    Block::WarpShift => usize::from(self.shift_move()),
                    _ => usize::from(self.scale_move()),
                })
            }
            _ => Ok(usize::from(self.scalar_move(block)?)),
        }
    }

    /// `σ²` from its conditional with the layer coefficients integrated out.
    fn draw_sigma2(&mut self) -> Result<()> {
        let xtr = &self.xty - &self.xtc;
        self.state.sigma2 =
            self.model.draw_sigma2(&self.xtx, &xtr, self.rr, self.n_obs, self.state.rhox, &mut self.rng)?;
        Ok(())
    }

    /// Joint draw of `(b0, b, β)`. Without observations `b0` has no
    /// information and stays where it is.
    fn draw_coefficients(&mut self) -> Result<()> {
        let s = &self.state;
        let priors = self.model.priors();
        let p0 = self.ictic.nrows();
        let l = self.n_layers;
        let p = p0 + l;
        let mut prec = DMatrix::zeros(p, p);
        prec.view_mut((0, 0), (p0, p0)).copy_from(&self.ictic);
        prec.view_mut((0, p0), (p0, l)).copy_from(&self.ictx);
        prec.view_mut((p0, 0), (l, p0)).copy_from(&self.ictx.transpose());
        prec.view_mut((p0, p0), (l, l)).copy_from(&self.xtx);
        prec /= s.sigma2;
        if let Some(cb) = &self.car_b {
            let mut v = prec.view_mut((1, 1), (p0 - 1, p0 - 1));
            v += cb.precision() / s.sigma02;
        }
        let mut v = prec.view_mut((p0, p0), (l, l));
        v += self.car_x.precision() / (s.sigma2 * priors.tau2);
        let mut rhs = DVector::zeros(p);
        rhs.rows_mut(0, p0).copy_from(&self.icty);
        rhs.rows_mut(p0, l).copy_from(&self.xty);
        rhs /= s.sigma2;

        let skip = usize::from(self.n_obs == 0);
        let prec = prec.view((skip, skip), (p - skip, p - skip)).into_owned();
        let rhs = rhs.rows(skip, p - skip).into_owned();
        let draw = draw_from_precision(prec, &rhs, &mut self.rng)
            .ok_or_else(|| Error::numerical("coefficient conditional precision is not positive definite"))?;
        let mut it = draw.iter().copied();
        if skip == 0 {
            self.state.b0 = it.next().unwrap_or_default();
        }
        for v in self.state.b.iter_mut() {
            *v = it.next().unwrap_or_default();
        }
        for v in self.state.beta.iter_mut() {
            *v = it.next().unwrap_or_default();
        }
        self.update_intercepts();
        self.rebuild_aggregates();
        Ok(())
    }

    fn draw_sigma02(&mut self) -> Result<()> {
        self.state.sigma02 = self.model.draw_sigma02(&self.state, &mut self.rng)?;
        Ok(())
    }

    fn diverged(&self, message: impl Into<String>) -> Error {
        Error::Diverged { message: message.into(), state: Box::new(self.state.clone()) }
    }

    /// One full sweep over every block.
    pub fn step(&mut self) -> Result<()> {
        let variant = self.model.variant();
        let result = (|| -> Result<()> {
            if variant.has_warp() {
                self.metropolis_block(Block::Warp)?;
                self.metropolis_block(Block::WarpShift)?;
                self.metropolis_block(Block::WarpScale)?;
                // keep incremental displacements from drifting
                self.sync()?;
                if self.marginalize_b() {
                    self.draw_coefficients()?;
                }
            }
            self.draw_sigma2()?;
            self.draw_coefficients()?;
            if variant.has_spatial_intercept() {
                self.draw_sigma02()?;
                self.scalar_move(Block::Rho0)?;
            }
            if variant.has_smoothing() {
                self.scalar_move(Block::RhoX)?;
            }
            if variant.has_warp() {
                self.scalar_move(Block::SigmaA2)?;
                self.scalar_move(Block::RhoA)?;
            }
            Ok(())
        })();
        self.iter += 1;
        match result {
            Err(Error::Numerical(msg)) => Err(self.diverged(msg)),
            Err(e) => Err(e),
            Ok(()) if !self.state.is_finite() => Err(self.diverged("non-finite parameter value")),
            Ok(()) => Ok(()),
        }
    }

    fn station_displacements(&self) -> Vec<[f64; 2]> {
        self.stations
            .iter()
            .map(|st| {
                let q = UnitPoint::clamped(st.loc.s1 + st.disp[0], st.loc.s2 + st.disp[1]);
                [q.s1 - st.loc.s1, q.s2 - st.loc.s2]
            })
            .collect()
    }

    /// Runs the configured number of iterations.
    pub fn run(mut self) -> Result<PosteriorSamples> {
        let config = *self.model.config();
        let has_warp = self.model.variant().has_warp();
        self.iter = 0;
        self.draw_coefficients().map_err(|e| match e {
            Error::Numerical(msg) => self.diverged(msg),
            other => other,
        })?;
        let kept = (config.n_iter - config.n_burn).div_ceil(config.thin);
        let mut states = Vec::with_capacity(kept);
        let mut displacements = Vec::with_capacity(if has_warp { kept } else { 0 });
        for it in 0..config.n_iter {
            self.step()?;
            if it >= config.n_burn && (it - config.n_burn).is_multiple_of(config.thin) {
                states.push(self.state.clone());
                if has_warp {
                    displacements.push(self.station_displacements());
                }
            }
        }
        Ok(PosteriorSamples {
            variant: self.model.variant(),
            dims: *self.model.dims(),
            states,
            station_displacements: displacements,
            acceptance: self.acceptance(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn add_station(
    xtx: &mut DMatrix<f64>,
    xty: &mut DVector<f64>,
    xtc: &mut DVector<f64>,
    ictx: Option<&mut DMatrix<f64>>,
    st: &Station,
    stats: &CellStats,
    sign: f64,
    l: usize,
) {
    for a in 0..l {
        for b in 0..l {
            xtx[(a, b)] += sign * stats.g[a * l + b];
        }
        xty[a] += sign * stats.gy[a];
        xtc[a] += sign * st.c * stats.h[a];
    }
    if let Some(ictx) = ictx {
        for a in 0..l {
            ictx[(0, a)] += sign * stats.h[a];
        }
        for &(k, w) in &st.basis {
            for a in 0..l {
                ictx[(1 + k, a)] += sign * w * stats.h[a];
            }
        }
    }
}

/// `rᵀ (I + τ² X Qx⁻¹ Xᵀ)⁻¹ r` from `XᵀX`, `Xᵀr` and `rᵀr`.
pub(crate) fn reduced_quad(
    xtx: &DMatrix<f64>,
    xtr: &DVector<f64>,
    rr: f64,
    car_x: &CarStructure,
    tau2: f64,
) -> Result<f64> {
    let f = car_x.precision() / tau2 + xtx;
    let chol = f.cholesky().ok_or_else(|| Error::numerical("layer conditional precision is not positive definite"))?;
    Ok(rr - xtr.dot(&chol.solve(xtr)))
}
