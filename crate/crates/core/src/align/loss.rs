//! Alignment, smoothness and flow objectives with analytic gradients.
//!
//! Residual norms are non-smooth at zero; below `ZERO_RESIDUAL` the
//! subgradient 0 is used so an exactly consistent state is a fixed point.

use nalgebra::{Matrix3, Vector2, Vector3};

use super::{AlignProblem, AlignState, WindowSet};
use crate::error::{Error, Result};
use crate::geometry::{quat_matrix_backward, quat_to_matrix, RawQuat};
use crate::grid::Grid;
use crate::masks::FrameMask;

const ZERO_RESIDUAL: f64 = 1e-12;
const ZERO_FLOW_RESIDUAL: f64 = 1e-9;

/// Gradient with the same layout as [`AlignState`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlignGrad {
    pub quats: Vec<RawQuat>,
    pub translations: Vec<Vector3<f64>>,
    pub log_depth: Vec<Grid<f64>>,
    pub log_scale: Vec<f64>,
    pub log_focal: f64,
}

impl AlignGrad {
    pub fn zeros_like(state: &AlignState) -> Self {
        Self {
            quats: vec![[0.0; 4]; state.num_frames()],
            translations: vec![Vector3::zeros(); state.num_frames()],
            log_depth: vec![Grid::filled(state.width, state.height, 0.0); state.num_frames()],
            log_scale: vec![0.0; state.log_scale.len()],
            log_focal: 0.0,
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for q in &self.quats {
            out.extend_from_slice(q);
        }
        for t in &self.translations {
            out.extend_from_slice(t.as_slice());
        }
        for d in &self.log_depth {
            out.extend_from_slice(d.as_slice());
        }
        out.extend_from_slice(&self.log_scale);
        out.push(self.log_focal);
        out
    }

    fn add_scaled(&mut self, other: &AlignGrad, k: f64) {
        for (a, b) in self.quats.iter_mut().zip(&other.quats) {
            for i in 0..4 {
                a[i] += k * b[i];
            }
        }
        for (a, b) in self.translations.iter_mut().zip(&other.translations) {
            *a += k * b;
        }
        for (a, b) in self.log_depth.iter_mut().zip(&other.log_depth) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.iter()) {
                *x += k * y;
            }
        }
        for (a, b) in self.log_scale.iter_mut().zip(&other.log_scale) {
            *a += k * b;
        }
        self.log_focal += k * other.log_focal;
    }
}

/// Per-term values of the objective. `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub align: f64,
    pub smooth: f64,
    pub flow: f64,
    pub total: f64,
}

struct FrameCache {
    rot: Vec<Matrix3<f64>>,
    cam: Vec<Vec<Vector3<f64>>>,
    world: Vec<Vec<Vector3<f64>>>,
}

impl FrameCache {
    fn new(state: &AlignState) -> Self {
        let n = state.num_frames();
        let mut rot = Vec::with_capacity(n);
        let mut cam = Vec::with_capacity(n);
        let mut world = Vec::with_capacity(n);
        for t in 0..n {
            let r = quat_to_matrix(&state.quats[t]);
            let c = state.camera_points(t).into_vec();
            let tr = state.translations[t];
            world.push(c.iter().map(|p| r * p + tr).collect());
            cam.push(c);
            rot.push(r);
        }
        Self { rot, cam, world }
    }
}

struct Accum {
    d_rot: Vec<Matrix3<f64>>,
    d_trans: Vec<Vector3<f64>>,
    d_world: Vec<Vec<Vector3<f64>>>,
    d_log_scale: Vec<f64>,
    d_log_focal: f64,
}

impl Accum {
    fn new(state: &AlignState) -> Self {
        let n = state.num_frames();
        let px = state.width * state.height;
        Self {
            d_rot: vec![Matrix3::zeros(); n],
            d_trans: vec![Vector3::zeros(); n],
            d_world: vec![vec![Vector3::zeros(); px]; n],
            d_log_scale: vec![0.0; state.log_scale.len()],
            d_log_focal: 0.0,
        }
    }

    /// Chains world-point gradients into pose, depth and focal gradients.
    fn finish(mut self, state: &AlignState, cache: &FrameCache) -> AlignGrad {
        let mut grad = AlignGrad::zeros_like(state);
        for t in 0..state.num_frames() {
            let r = &cache.rot[t];
            let ld = grad.log_depth[t].as_mut_slice();
            for (p, gw) in self.d_world[t].iter().enumerate() {
                if *gw == Vector3::zeros() {
                    continue;
                }
                let x = &cache.cam[t][p];
                self.d_trans[t] += gw;
                self.d_rot[t] += gw * x.transpose();
                let gc = r.transpose() * gw;
                ld[p] = gc.dot(x);
                self.d_log_focal -= gc.x * x.x + gc.y * x.y;
            }
            grad.translations[t] = self.d_trans[t];
            grad.quats[t] = quat_matrix_backward(&state.quats[t], &self.d_rot[t]);
        }
        grad.log_scale = self.d_log_scale;
        grad.log_focal = self.d_log_focal;
        grad
    }
}

fn check_problem(state: &AlignState, problem: &AlignProblem) -> Result<()> {
    if (state.width, state.height) != (problem.width, problem.height) {
        return Err(Error::ShapeMismatch {
            expected: (state.width, state.height),
            got: (problem.width, problem.height),
        });
    }
    if state.num_frames() != problem.graph.num_frames() || state.log_scale.len() != problem.graph.num_edges() {
        return Err(Error::InvalidInput(format!(
            "state has {} frames / {} edge scales, graph has {} frames / {} edges",
            state.num_frames(),
            state.log_scale.len(),
            problem.graph.num_frames(),
            problem.graph.num_edges()
        )));
    }
    Ok(())
}

fn align_impl(
    state: &AlignState,
    problem: &AlignProblem,
    cache: &FrameCache,
    mut acc: Option<&mut Accum>,
) -> Result<f64> {
    check_problem(state, problem)?;
    let mut total = 0.0;
    for (e, (&(n, m), pair)) in problem.graph.edges().iter().zip(&problem.pairs).enumerate() {
        let sigma = state.log_scale[e].exp();
        let r_n = cache.rot[n];
        let t_n = state.translations[n];
        let mut d_rot_n = Matrix3::zeros();
        let mut d_t_n = Vector3::zeros();
        let mut d_ls = 0.0;
        for (k, pts, conf) in [(n, &pair.x_nn, &pair.c_nn), (m, &pair.x_mn, &pair.c_mn)] {
            let world = &cache.world[k];
            for p in 0..world.len() {
                let c = conf[p];
                if c == 0.0 {
                    continue;
                }
                let sy = sigma * pts[p];
                let rsy = r_n * sy;
                let r = world[p] - (rsy + t_n);
                let norm = r.norm();
                total += c * norm;
                if let Some(acc) = acc.as_deref_mut() {
                    if norm > ZERO_RESIDUAL {
                        let g = (c / norm) * r;
                        acc.d_world[k][p] += g;
                        d_t_n -= g;
                        d_rot_n -= g * sy.transpose();
                        d_ls -= g.dot(&rsy);
                    }
                }
            }
        }
        if let Some(acc) = acc.as_deref_mut() {
            acc.d_rot[n] += d_rot_n;
            acc.d_trans[n] += d_t_n;
            acc.d_log_scale[e] += d_ls;
        }
    }
    Ok(total)
}

fn smooth_impl(state: &AlignState, cache: &FrameCache, mut acc: Option<&mut Accum>) -> f64 {
    let mut total = 0.0;
    for t in 0..state.num_frames().saturating_sub(1) {
        let (r0, r1) = (cache.rot[t], cache.rot[t + 1]);
        let a = r0.transpose() * r1 - Matrix3::identity();
        let an = a.norm();
        let delta = state.translations[t + 1] - state.translations[t];
        let b = r0.transpose() * delta;
        let bn = b.norm();
        total += an + bn;
        if let Some(acc) = acc.as_deref_mut() {
            if an > ZERO_RESIDUAL {
                let g = a / an;
                acc.d_rot[t] += r1 * g.transpose();
                acc.d_rot[t + 1] += r0 * g;
            }
            if bn > ZERO_RESIDUAL {
                let gb = b / bn;
                let gd = r0 * gb;
                acc.d_trans[t + 1] += gd;
                acc.d_trans[t] -= gd;
                acc.d_rot[t] += delta * gb.transpose();
            }
        }
    }
    total
}

fn flow_impl(
    state: &AlignState,
    windows: &WindowSet,
    masks: &[FrameMask],
    cache: &FrameCache,
    mut acc: Option<&mut Accum>,
) -> Result<f64> {
    let n_frames = state.num_frames();
    if masks.len() != n_frames {
        return Err(Error::InvalidInput(format!(
            "{} frame masks for {} frames",
            masks.len(),
            n_frames
        )));
    }
    for m in masks {
        if m.shape() != (state.width, state.height) {
            return Err(Error::ShapeMismatch {
                expected: (state.width, state.height),
                got: m.shape(),
            });
        }
    }
    let intr = state.intrinsics();
    let f = intr.fx;
    let mut total = 0.0;
    for (t, t2) in windows.pairs() {
        if t >= n_frames || t2 >= n_frames {
            return Err(Error::InvalidInput(format!("flow pair ({t}, {t2}) out of range")));
        }
        let est = windows
            .flows
            .get(&(t, t2))
            .ok_or(Error::MissingFlow { from: t, to: t2 })?;
        if est.shape() != (state.width, state.height) {
            return Err(Error::ShapeMismatch {
                expected: (state.width, state.height),
                got: est.shape(),
            });
        }
        let r2 = cache.rot[t2];
        let t2_trans = state.translations[t2];
        let mask = masks[t].values();
        let mut d_rot2 = Matrix3::zeros();
        let mut d_t2 = Vector3::zeros();
        for p in 0..est.flow.len() {
            if !est.valid[p] {
                continue;
            }
            let weight = 1.0 - mask[p];
            if weight == 0.0 {
                continue;
            }
            let w = cache.world[t][p];
            let rel = w - t2_trans;
            let z = r2.transpose() * rel;
            if z.z <= 0.0 {
                continue;
            }
            let proj = Vector2::new(f * z.x / z.z + intr.cx, f * z.y / z.z + intr.cy);
            if !intr.contains(&proj) {
                continue;
            }
            let (u, v) = ((p % state.width) as f64, (p / state.width) as f64);
            let rho = proj - Vector2::new(u, v) - est.flow[p];
            total += weight * (rho.x.abs() + rho.y.abs());
            if let Some(acc) = acc.as_deref_mut() {
                let sgn = |x: f64| if x.abs() > ZERO_FLOW_RESIDUAL { x.signum() } else { 0.0 };
                let h = weight * Vector2::new(sgn(rho.x), sgn(rho.y));
                if h == Vector2::zeros() {
                    continue;
                }
                let iz = 1.0 / z.z;
                let gz = Vector3::new(
                    h.x * f * iz,
                    h.y * f * iz,
                    -(h.x * f * z.x + h.y * f * z.y) * iz * iz,
                );
                acc.d_log_focal += h.x * (proj.x - intr.cx) + h.y * (proj.y - intr.cy);
                let gw = r2 * gz;
                d_t2 -= gw;
                d_rot2 += rel * gz.transpose();
                acc.d_world[t][p] += gw;
            }
        }
        if let Some(acc) = acc.as_deref_mut() {
            acc.d_rot[t2] += d_rot2;
            acc.d_trans[t2] += d_t2;
        }
    }
    Ok(total)
}

/// Confidence-weighted distance between global pointmaps and the scaled,
/// posed pair pointmaps, summed over both terms of every edge.
pub fn loss_align(state: &AlignState, problem: &AlignProblem) -> Result<f64> {
    let cache = FrameCache::new(state);
    align_impl(state, problem, &cache, None)
}

pub fn loss_align_grad(state: &AlignState, problem: &AlignProblem) -> Result<(f64, AlignGrad)> {
    let cache = FrameCache::new(state);
    let mut acc = Accum::new(state);
    let l = align_impl(state, problem, &cache, Some(&mut acc))?;
    Ok((l, acc.finish(state, &cache)))
}

/// `Σ_t ‖R_tᵀR_{t+1} − I‖_F + ‖R_tᵀ(T_{t+1} − T_t)‖₂`.
pub fn loss_smooth(state: &AlignState) -> f64 {
    let cache = FrameCache::new(state);
    smooth_impl(state, &cache, None)
}

pub fn loss_smooth_grad(state: &AlignState) -> (f64, AlignGrad) {
    let cache = FrameCache::new(state);
    let mut acc = Accum::new(state);
    let l = smooth_impl(state, &cache, Some(&mut acc));
    (l, acc.finish(state, &cache))
}

/// L1 distance between induced and estimated flow, weighted by `1 − M^t`.
pub fn loss_flow(state: &AlignState, windows: &WindowSet, masks: &[FrameMask]) -> Result<f64> {
    let cache = FrameCache::new(state);
    flow_impl(state, windows, masks, &cache, None)
}

pub fn loss_flow_grad(
    state: &AlignState,
    windows: &WindowSet,
    masks: &[FrameMask],
) -> Result<(f64, AlignGrad)> {
    let cache = FrameCache::new(state);
    let mut acc = Accum::new(state);
    let l = flow_impl(state, windows, masks, &cache, Some(&mut acc))?;
    Ok((l, acc.finish(state, &cache)))
}

/// Weighted objective `L_align + w_smooth·L_smooth + w_flow·L_flow`, with its
/// gradient if requested. Zero weights skip their term entirely.
pub fn total_loss(
    state: &AlignState,
    problem: &AlignProblem,
    windows: &WindowSet,
    masks: &[FrameMask],
    w_smooth: f64,
    w_flow: f64,
    want_grad: bool,
) -> Result<(LossTerms, Option<AlignGrad>)> {
    let cache = FrameCache::new(state);
    let mut acc_align = want_grad.then(|| Accum::new(state));
    let align = align_impl(state, problem, &cache, acc_align.as_mut())?;
    let mut terms = LossTerms {
        align,
        ..Default::default()
    };
    let mut grad = acc_align.map(|a| a.finish(state, &cache));
    if w_smooth != 0.0 {
        let mut acc = want_grad.then(|| Accum::new(state));
        terms.smooth = smooth_impl(state, &cache, acc.as_mut());
        if let (Some(g), Some(a)) = (grad.as_mut(), acc) {
            g.add_scaled(&a.finish(state, &cache), w_smooth);
        }
    }
    if w_flow != 0.0 && !windows.is_empty() {
        let mut acc = want_grad.then(|| Accum::new(state));
        terms.flow = flow_impl(state, windows, masks, &cache, acc.as_mut())?;
        if let (Some(g), Some(a)) = (grad.as_mut(), acc) {
            g.add_scaled(&a.finish(state, &cache), w_flow);
        }
    }
    terms.total = terms.align + w_smooth * terms.smooth + w_flow * terms.flow;
    Ok((terms, grad))
}
