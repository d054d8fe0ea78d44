//! Global alignment of pairwise pointmaps into per-frame poses, depths and a
//! shared focal, with smoothness and mask-weighted flow terms.

mod init;
mod loss;
mod optimize;

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, CoordFrame, DepthMap, FlowField, Intrinsics, Pointmap, Pose, RawQuat};
use crate::grid::Grid;
use crate::masks::PairMask;

pub use init::initialize_state;
pub use loss::{
    loss_align, loss_align_grad, loss_flow, loss_flow_grad, loss_smooth, loss_smooth_grad, total_loss,
    AlignGrad, LossTerms,
};
pub use optimize::{optimize_alignment, AlignConfig, AlignResult};
pub(crate) use optimize::cosine_lr;

/// Directed frame-pair graph. Edge order is significant: pair predictions and
/// per-edge scales are indexed by it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameGraph {
    num_frames: usize,
    edges: Vec<(usize, usize)>,
}

impl FrameGraph {
    /// Validates that every frame starts at least one edge and that the graph
    /// is connected.
    pub fn from_edges(num_frames: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_frames < 2 {
            return Err(Error::InvalidInput(format!(
                "a frame graph needs at least 2 frames, got {num_frames}"
            )));
        }
        let mut adj = vec![Vec::new(); num_frames];
        let mut has_first = vec![false; num_frames];
        for &(n, m) in &edges {
            if n >= num_frames || m >= num_frames || n == m {
                return Err(Error::InvalidInput(format!("invalid edge ({n}, {m})")));
            }
            adj[n].push(m);
            adj[m].push(n);
            has_first[n] = true;
        }
        if let Some(t) = has_first.iter().position(|&b| !b) {
            return Err(Error::NoEdgesForFrame(t));
        }
        let mut seen = vec![false; num_frames];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(t) = seen.iter().position(|&b| !b) {
            return Err(Error::DisconnectedGraph(t));
        }
        Ok(Self { num_frames, edges })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_edge(&self, e: (usize, usize)) -> bool {
        self.edges.contains(&e)
    }

    pub fn edge_index(&self, e: (usize, usize)) -> Option<usize> {
        self.edges.iter().position(|&x| x == e)
    }
}

/// Sliding-window pair graph: both orderings of `(n, n+k)` for every stride `k`.
pub fn build_graph(num_frames: usize, strides: &[usize]) -> Result<FrameGraph> {
    if num_frames < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 frames to build a graph, got {num_frames}"
        )));
    }
    if strides.iter().any(|&k| k == 0) {
        return Err(Error::InvalidInput("strides must be positive".into()));
    }
    let mut edges = Vec::new();
    for n in 0..num_frames {
        for &k in strides {
            if n + k < num_frames {
                edges.push((n, n + k));
                edges.push((n + k, n));
            }
        }
    }
    FrameGraph::from_edges(num_frames, edges)
}

/// Network output for one ordered frame pair `(n, m)`; both pointmaps are in
/// frame `n`'s camera coordinates and pixel-aligned with their own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub x_nn: Grid<Vector3<f64>>,
    pub x_mn: Grid<Vector3<f64>>,
    pub c_nn: Grid<f64>,
    pub c_mn: Grid<f64>,
    pub mask: PairMask,
}

impl PairPrediction {
    pub fn validate(&self) -> Result<()> {
        self.x_nn.same_shape(&self.x_mn)?;
        self.x_nn.same_shape(&self.c_nn)?;
        self.x_nn.same_shape(&self.c_mn)?;
        self.x_nn.same_shape(&self.mask.values)?;
        for c in self.c_nn.iter().chain(self.c_mn.iter()) {
            if !(c.is_finite() && *c >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "confidence {c} on edge {:?} is not finite and non-negative",
                    self.mask.edge
                )));
            }
        }
        for p in self.x_nn.iter().chain(self.x_mn.iter()) {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite pointmap value on edge {:?}",
                    self.mask.edge
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.x_nn.shape()
    }
}

/// Graph plus one prediction per edge, in edge order.
#[derive(Clone, Debug)]
pub struct AlignProblem {
    pub graph: FrameGraph,
    pub pairs: Vec<PairPrediction>,
    pub width: usize,
    pub height: usize,
}

impl AlignProblem {
    pub fn new(graph: FrameGraph, pairs: Vec<PairPrediction>) -> Result<Self> {
        if pairs.len() != graph.num_edges() {
            return Err(Error::InvalidInput(format!(
                "{} pair predictions for {} edges",
                pairs.len(),
                graph.num_edges()
            )));
        }
        let (width, height) = pairs
            .first()
            .map(|p| p.shape())
            .ok_or_else(|| Error::InvalidInput("no pair predictions".into()))?;
        for (p, &e) in pairs.iter().zip(graph.edges()) {
            p.validate()?;
            if p.shape() != (width, height) {
                return Err(Error::ShapeMismatch {
                    expected: (width, height),
                    got: p.shape(),
                });
            }
            if p.mask.edge != e {
                return Err(Error::InvalidInput(format!(
                    "pair prediction for {:?} stored at edge {:?}",
                    p.mask.edge, e
                )));
            }
        }
        Ok(Self {
            graph,
            pairs,
            width,
            height,
        })
    }

    pub fn pair_masks(&self) -> Vec<PairMask> {
        self.pairs.iter().map(|p| p.mask.clone()).collect()
    }
}

/// Optimizable alignment variables. Depths, edge scales and focal are stored
/// in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignState {
    pub width: usize,
    pub height: usize,
    pub cx: f64,
    pub cy: f64,
    pub quats: Vec<RawQuat>,
    pub translations: Vec<Vector3<f64>>,
    pub log_depth: Vec<Grid<f64>>,
    pub log_scale: Vec<f64>,
    pub log_focal: f64,
}

impl AlignState {
    pub fn from_parts(
        poses: &[Pose],
        depths: &[DepthMap],
        intr: &Intrinsics,
        num_edges: usize,
    ) -> Result<Self> {
        if poses.len() != depths.len() {
            return Err(Error::InvalidInput(format!(
                "{} poses for {} depth maps",
                poses.len(),
                depths.len()
            )));
        }
        if (intr.fx - intr.fy).abs() > 1e-12 * intr.fx {
            return Err(Error::InvalidInput("alignment assumes square pixels".into()));
        }
        for d in depths {
            if d.shape() != (intr.width, intr.height) {
                return Err(Error::ShapeMismatch {
                    expected: (intr.width, intr.height),
                    got: d.shape(),
                });
            }
        }
        Ok(Self {
            width: intr.width,
            height: intr.height,
            cx: intr.cx,
            cy: intr.cy,
            quats: poses.iter().map(|p| p.raw_quat()).collect(),
            translations: poses.iter().map(|p| p.translation).collect(),
            log_depth: depths.iter().map(|d| d.values().map(|x| x.ln())).collect(),
            log_scale: vec![0.0; num_edges],
            log_focal: intr.fx.ln(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.quats.len()
    }

    pub fn focal(&self) -> f64 {
        self.log_focal.exp()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.focal();
        Intrinsics {
            fx: f,
            fy: f,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose::from_raw(self.quats[t], self.translations[t])
    }

    pub fn poses(&self) -> Vec<Pose> {
        (0..self.num_frames()).map(|t| self.pose(t)).collect()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scale.iter().map(|s| s.exp()).collect()
    }

    pub fn depth(&self, t: usize) -> DepthMap {
        DepthMap::new(self.log_depth[t].map(|x| x.exp())).expect("exp of a finite log-depth is positive")
    }

    pub fn camera_points(&self, t: usize) -> Grid<Vector3<f64>> {
        let intr = self.intrinsics();
        let ld = &self.log_depth[t];
        Grid::from_fn(self.width, self.height, |u, v| {
            ld.get(u, v).exp() * intr.ray(u as f64, v as f64)
        })
    }

    /// Global pointmap of frame `t`, derived from its depth, pose and focal.
    pub fn global_pointmap(&self, t: usize) -> Pointmap {
        let r = quat_to_matrix(&self.quats[t]);
        let tr = self.translations[t];
        Pointmap {
            points: self.camera_points(t).map(|p| r * p + tr),
            frame: CoordFrame::World,
        }
    }

    pub fn num_params(&self) -> usize {
        let n = self.num_frames();
        7 * n + n * self.width * self.height + self.log_scale.len() + 1
    }

    /// Flattens into `[quats | translations | log_depths | log_scales | log_focal]`.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
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

    pub fn unpack(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.num_params(), "packed parameter length");
        let mut it = x.iter().copied();
        for q in &mut self.quats {
            for c in q.iter_mut() {
                *c = it.next().unwrap();
            }
        }
        for t in &mut self.translations {
            for c in t.iter_mut() {
                *c = it.next().unwrap();
            }
        }
        for d in &mut self.log_depth {
            for c in d.as_mut_slice() {
                *c = it.next().unwrap();
            }
        }
        for s in &mut self.log_scale {
            *s = it.next().unwrap();
        }
        self.log_focal = it.next().unwrap();
    }

    pub fn normalize_quats(&mut self) {
        for q in &mut self.quats {
            crate::geometry::normalize_quat(q);
        }
    }

    /// Enforces `Σ log σ = 0` by moving the common log-scale offset into the
    /// world scale (depths and translations), which leaves every residual
    /// direction unchanged.
    pub fn project_scale_gauge(&mut self) {
        if self.log_scale.is_empty() {
            return;
        }
        let mean = self.log_scale.iter().sum::<f64>() / self.log_scale.len() as f64;
        for s in &mut self.log_scale {
            *s -= mean;
        }
        for d in &mut self.log_depth {
            for x in d.as_mut_slice() {
                *x -= mean;
            }
        }
        let k = (-mean).exp();
        for t in &mut self.translations {
            *t *= k;
        }
    }
}

/// Frame pairs with estimated flow, grouped into sliding windows.
#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    pub windows: Vec<Vec<(usize, usize)>>,
    pub flows: BTreeMap<(usize, usize), FlowField>,
}

impl WindowSet {
    /// Groups the given pairs into consecutive windows of `window_len` source
    /// frames.
    pub fn from_pairs(
        pairs: Vec<((usize, usize), FlowField)>,
        window_len: usize,
    ) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::InvalidInput("window length must be positive".into()));
        }
        let mut windows: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut flows = BTreeMap::new();
        for (pair, flow) in pairs {
            let w = pair.0 / window_len;
            if windows.len() <= w {
                windows.resize(w + 1, Vec::new());
            }
            windows[w].push(pair);
            flows.insert(pair, flow);
        }
        windows.retain(|w| !w.is_empty());
        Ok(Self { windows, flows })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.windows.iter().flatten().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.iter().all(|w| w.is_empty())
    }

    /// Largest `|t - t'|` over all pairs.
    pub fn span(&self) -> usize {
        self.pairs().map(|(a, b)| a.abs_diff(b)).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_frames_stride_one() {
        let g = build_graph(3, &[1]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn five_frames_two_strides() {
        // brute-force enumeration of ordered pairs with |n-m| in {1, 2}
        let expected = (0..5usize)
            .flat_map(|n| (0..5usize).map(move |m| (n, m)))
            .filter(|(n, m)| matches!(n.abs_diff(*m), 1 | 2))
            .count();
        let g = build_graph(5, &[1, 2]).unwrap();
        assert_eq!(g.num_edges(), expected);
        assert_eq!(expected, 14);
    }

    #[test]
    fn single_frame_is_rejected() {
        assert!(build_graph(1, &[1]).is_err());
    }

    #[test]
    fn too_large_stride_disconnects() {
        assert!(build_graph(3, &[5]).is_err());
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let e = FrameGraph::from_edges(4, vec![(0, 1), (1, 0), (2, 3), (3, 2)]);
        assert!(matches!(e, Err(Error::DisconnectedGraph(2))));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let intr = Intrinsics::centered(10.0, 4, 3).unwrap();
        let d = DepthMap::new(Grid::from_fn(4, 3, |u, v| 1.0 + (u + v) as f64)).unwrap();
        let mut s = AlignState::from_parts(&[Pose::identity(), Pose::identity()], &[d.clone(), d], &intr, 2).unwrap();
        s.log_scale = vec![0.3, -0.3];
        let x = s.pack();
        let mut t = s.clone();
        t.log_focal = 0.0;
        t.unpack(&x);
        assert_eq!(s, t);
    }

    #[test]
    fn gauge_projection_zeroes_mean_log_scale() {
        let intr = Intrinsics::centered(10.0, 4, 3).unwrap();
        let d = DepthMap::new(Grid::filled(4, 3, 2.0)).unwrap();
        let mut s = AlignState::from_parts(&[Pose::identity(), Pose::identity()], &[d.clone(), d], &intr, 3).unwrap();
        s.log_scale = vec![0.1, 0.5, 0.9];
        s.project_scale_gauge();
        assert!(s.log_scale.iter().sum::<f64>().abs() < 1e-15);
    }
}
