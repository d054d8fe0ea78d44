//! Closed-form starting point for alignment.

use nalgebra::{UnitQuaternion, Vector3};

use super::{AlignProblem, AlignState};
use crate::error::{Error, Result};
use crate::geometry::{umeyama, DepthMap, Intrinsics, Pose};
use crate::grid::Grid;

pub(crate) fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = ((s.len() - 1) as f64 * q).floor() as usize;
    s[idx]
}

fn focal_estimate(points: &Grid<Vector3<f64>>, cx: f64, cy: f64) -> Option<f64> {
    let est: Vec<f64> = points
        .indexed()
        .filter_map(|(u, v, p)| {
            if p.z <= 0.0 {
                return None;
            }
            let (a, b) = (p.x / p.z, p.y / p.z);
            let (du, dv) = (u as f64 - cx, v as f64 - cy);
            let den = a * a + b * b;
            (den > 1e-12 && du * du + dv * dv >= 1.0).then(|| (du * a + dv * b) / den)
        })
        .filter(|f| f.is_finite() && *f > 0.0)
        .collect();
    median(est)
}

/// Depths from each frame's first outgoing edge, focal from frame 0, poses by
/// chaining similarity registrations along consecutive frames, then per-edge
/// scales as median depth ratios.
pub fn initialize_state(problem: &AlignProblem) -> Result<AlignState> {
    let graph = &problem.graph;
    let (w, h) = (problem.width, problem.height);
    let n = graph.num_frames();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let canonical: Vec<usize> = (0..n)
        .map(|t| {
            graph
                .edges()
                .iter()
                .position(|e| e.0 == t)
                .ok_or(Error::NoEdgesForFrame(t))
        })
        .collect::<Result<_>>()?;

    let mut depths: Vec<Grid<f64>> = canonical
        .iter()
        .map(|&e| {
            let z = problem.pairs[e].x_nn.map(|p| p.z);
            let floor = 1e-6 * median(z.iter().copied().filter(|x| *x > 0.0).collect()).unwrap_or(1.0);
            z.map(|x| x.max(floor))
        })
        .collect();

    let focal = focal_estimate(&problem.pairs[canonical[0]].x_nn, cx, cy)
        .ok_or_else(|| Error::InvalidInput("cannot estimate focal from frame 0".into()))?;
    let intr = Intrinsics::new(focal, focal, cx, cy, w, h)?;
    let rays = Grid::from_fn(w, h, |u, v| intr.ray(u as f64, v as f64));

    let mut poses = vec![Pose::identity(); n];
    for t in 0..n - 1 {
        let e = graph.edge_index((t, t + 1)).ok_or_else(|| {
            Error::InvalidInput(format!("initialization needs edge ({t}, {})", t + 1))
        })?;
        let pair = &problem.pairs[e];
        // bring the edge into frame t's current depth scale
        let ratio = median(
            depths[t]
                .iter()
                .zip(pair.x_nn.iter())
                .filter(|(_, p)| p.z > 0.0)
                .map(|(d, p)| d / p.z)
                .collect(),
        )
        .unwrap_or(1.0);
        let q75 = quantile(pair.c_mn.as_slice(), 0.75);
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for i in 0..w * h {
            if pair.c_mn[i] >= q75 {
                src.push(depths[t + 1][i] * rays[i]);
                dst.push(ratio * pair.x_mn[i]);
            }
        }
        let sim = umeyama(&src, &dst, true)?;
        for d in depths[t + 1].as_mut_slice() {
            *d *= sim.scale;
        }
        let rel = Pose::new(
            UnitQuaternion::from_matrix(&sim.rotation),
            sim.translation,
        );
        poses[t + 1] = poses[t].compose(&rel);
    }

    let depth_maps = depths
        .into_iter()
        .map(DepthMap::new)
        .collect::<Result<Vec<_>>>()?;
    let mut state = AlignState::from_parts(&poses, &depth_maps, &intr, graph.num_edges())?;
    for (e, (&(a, _), pair)) in graph.edges().iter().zip(&problem.pairs).enumerate() {
        let ratio = median(
            depth_maps[a]
                .values()
                .iter()
                .zip(pair.x_nn.iter())
                .filter(|(_, p)| p.z > 0.0)
                .map(|(d, p)| d / p.z)
                .collect(),
        )
        .unwrap_or(1.0);
        state.log_scale[e] = ratio.ln();
    }
    state.project_scale_gauge();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_graph, PairPrediction};
    use crate::masks::PairMask;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn recovers_consistent_two_frame_setup() {
        let (w, h) = (10, 8);
        let intr = Intrinsics::centered(12.0, w, h).unwrap();
        let poses = [
            Pose::identity(),
            Pose::from_axis_angle(Vector3::new(0.0, 0.05, 0.0), Vector3::new(0.2, 0.0, 0.05)),
        ];
        let depth = |t: usize| Grid::from_fn(w, h, |u, v| 3.0 + 0.1 * u as f64 + 0.05 * (v * (t + 1)) as f64);
        let cam = |t: usize| {
            let d = depth(t);
            Grid::from_fn(w, h, |u, v| *d.get(u, v) * intr.ray(u as f64, v as f64))
        };
        let graph = build_graph(2, &[1]).unwrap();
        let pairs = graph
            .edges()
            .iter()
            .map(|&(a, b)| {
                let to_a = poses[a].inverse().compose(&poses[b]);
                PairPrediction {
                    x_nn: cam(a),
                    x_mn: cam(b).map(|p| to_a.transform_point(p)),
                    c_nn: Grid::filled(w, h, 1.0),
                    c_mn: Grid::from_fn(w, h, |u, _| u as f64),
                    mask: PairMask::new((a, b), Grid::filled(w, h, 0.0)).unwrap(),
                }
            })
            .collect();
        let problem = AlignProblem::new(graph, pairs).unwrap();
        let s = initialize_state(&problem).unwrap();
        assert!((s.focal() - 12.0).abs() < 1e-9);
        let p1 = s.pose(1);
        assert!(p1.rotation_angle_to(&poses[1]) < 1e-9);
        assert!((p1.translation - poses[1].translation).norm() < 1e-9);
        assert!(s.log_scale.iter().all(|x| x.abs() < 1e-12));
    }
}
