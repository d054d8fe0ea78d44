//! Acceptance gate: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use staticsplat::align::{
    build_graph, initialize_state, loss_align, loss_align_grad, loss_flow, loss_flow_grad, loss_smooth,
    loss_smooth_grad, optimize_alignment, total_loss, AlignConfig, AlignGrad, AlignProblem, AlignState,
    PairPrediction, WindowSet,
};
use staticsplat::eval::{masked_psnr, split_frames, trajectory_metrics, PSNR_CAP};
use staticsplat::geometry::{DepthMap, FlowField, Intrinsics, Pose};
use staticsplat::io::write_trajectory;
use staticsplat::masks::{mask_iou, staticness_from_mask, FrameMask, PairMask};
use staticsplat::splat::{render, render_backward, write_cloud, CloudGrad, Gaussian, GaussianCloud, RenderMode};
use staticsplat::synth::{corrupt_masks, generate, SceneSpec, SyntheticDataset};
use staticsplat::trainer::{
    frame_confidences, init_cloud, refine_test_poses, train, FrameDataset, LearningRates, TrainConfig,
};
use staticsplat::{Grid, Image};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let elapsed = t0.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    println!(
        "criterion {id} [{}] {name}: {} ({:.1}s of {}s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

// ---------------------------------------------------------------- criterion 1

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    GaussianCloud::new(
        (0..n)
            .map(|_| Gaussian {
                mu: Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(2.0..3.0)),
                log_scale: Vector3::new(
                    rng.random_range(-2.5..-1.5),
                    rng.random_range(-2.5..-1.5),
                    rng.random_range(-2.5..-1.5),
                ),
                rotation: [
                    rng.random_range(0.5..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ],
                color: [rng.random(), rng.random(), rng.random()],
                opacity_logit: rng.random_range(-1.0..2.0),
                staticness_logit: rng.random_range(-1.0..2.0),
            })
            .collect(),
    )
}

fn pack_cloud(cloud: &GaussianCloud, pose: &Pose) -> Vec<f64> {
    let mut x = Vec::new();
    for g in &cloud.gaussians {
        x.extend_from_slice(g.mu.as_slice());
        x.extend_from_slice(g.log_scale.as_slice());
        x.extend_from_slice(&g.rotation);
        x.extend_from_slice(&g.color);
        x.push(g.opacity_logit);
        x.push(g.staticness_logit);
    }
    x.extend_from_slice(&pose.raw_quat());
    x.extend_from_slice(pose.translation.as_slice());
    x
}

fn unpack_cloud(x: &[f64], n: usize) -> (GaussianCloud, Pose) {
    let gs = (0..n)
        .map(|i| {
            let c = &x[i * 15..(i + 1) * 15];
            Gaussian {
                mu: Vector3::new(c[0], c[1], c[2]),
                log_scale: Vector3::new(c[3], c[4], c[5]),
                rotation: [c[6], c[7], c[8], c[9]],
                color: [c[10], c[11], c[12]],
                opacity_logit: c[13],
                staticness_logit: c[14],
            }
        })
        .collect();
    let p = &x[n * 15..];
    (GaussianCloud::new(gs), Pose::from_raw([p[0], p[1], p[2], p[3]], Vector3::new(p[4], p[5], p[6])))
}

fn pack_cloud_grad(g: &CloudGrad) -> Vec<f64> {
    let mut x = Vec::new();
    for i in 0..g.mu.len() {
        x.extend_from_slice(g.mu[i].as_slice());
        x.extend_from_slice(g.log_scale[i].as_slice());
        x.extend_from_slice(&g.rotation[i]);
        x.extend_from_slice(&g.color[i]);
        x.push(g.opacity_logit[i]);
        x.push(g.staticness_logit[i]);
    }
    x.extend_from_slice(&g.pose_rotation);
    x.extend_from_slice(g.pose_translation.as_slice());
    x
}

fn render_fd_error(seed: u64, mode: RenderMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.random_range(1..=5);
    let cloud = random_cloud(&mut rng, n);
    let pose = Pose::from_axis_angle(
        Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
    );
    let intr = Intrinsics::centered(20.0, 16, 16).unwrap();
    let up: Image = Grid::from_fn(16, 16, |_, _| {
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    });
    let loss = |c: &GaussianCloud, p: &Pose| -> f64 {
        render(c, p, &intr, mode)
            .image
            .iter()
            .zip(up.iter())
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum()
    };
    let analytic = pack_cloud_grad(&render_backward(&cloud, &pose, &intr, mode, &up));
    let x0 = pack_cloud(&cloud, &pose);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut x = x0.clone();
        x[i] += h;
        let (c, p) = unpack_cloud(&x, n);
        let fp = loss(&c, &p);
        x[i] -= 2.0 * h;
        let (c, p) = unpack_cloud(&x, n);
        let fm = loss(&c, &p);
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * h), 1e-6));
    }
    worst
}

const AW: usize = 8;
const AH: usize = 8;

fn random_align_instance(seed: u64) -> (AlignState, AlignProblem, WindowSet, Vec<FrameMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let n = 3;
    let graph = build_graph(n, &[1]).unwrap();
    let intr = Intrinsics::centered(9.0, AW, AH).unwrap();
    let poses: Vec<Pose> = (0..n)
        .map(|i| {
            Pose::from_axis_angle(
                Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                Vector3::new(0.3 * i as f64 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0),
            )
        })
        .collect();
    let depths: Vec<DepthMap> = (0..n)
        .map(|_| DepthMap::new(Grid::from_fn(AW, AH, |_, _| rng.random_range(2.0..4.0))).unwrap())
        .collect();
    let mut state = AlignState::from_parts(&poses, &depths, &intr, graph.num_edges()).unwrap();
    for s in &mut state.log_scale {
        *s = rng.random_range(-0.2..0.2);
    }
    let pairs = graph
        .edges()
        .iter()
        .map(|&e| {
            let mut pts = || {
                Grid::from_fn(AW, AH, |_, _| {
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0))
                })
            };
            let (x_nn, x_mn) = (pts(), pts());
            PairPrediction {
                x_nn,
                x_mn,
                c_nn: Grid::from_fn(AW, AH, |_, _| rng.random_range(0.5..1.5)),
                c_mn: Grid::from_fn(AW, AH, |_, _| rng.random_range(0.5..1.5)),
                mask: PairMask::new(e, Grid::from_fn(AW, AH, |_, _| rng.random_range(0.0..1.0))).unwrap(),
            }
        })
        .collect();
    let problem = AlignProblem::new(graph.clone(), pairs).unwrap();
    let flows = graph
        .edges()
        .iter()
        .map(|&e| {
            let mut f = FlowField::zeros(AW, AH);
            for x in f.flow.as_mut_slice() {
                *x = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
            (e, f)
        })
        .collect();
    let windows = WindowSet::from_pairs(flows, 2).unwrap();
    let masks = (0..n)
        .map(|_| FrameMask::new(Grid::from_fn(AW, AH, |_, _| rng.random_range(0.0..1.0))).unwrap())
        .collect();
    (state, problem, windows, masks)
}

fn align_fd_error(state: &AlignState, analytic: &AlignGrad, f: impl Fn(&AlignState) -> f64) -> f64 {
    let x0 = state.pack();
    let g = analytic.pack();
    let h = 1e-5;
    let mut s = state.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut x = x0.clone();
        x[i] += h;
        s.unpack(&x);
        let fp = f(&s);
        x[i] -= 2.0 * h;
        s.unpack(&x);
        let fm = f(&s);
        worst = worst.max(rel_err(g[i], (fp - fm) / (2.0 * h), 1e-2));
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let mut worst_render: f64 = 0.0;
    for seed in 0..10 {
        for mode in [RenderMode::Plain, RenderMode::Staticness] {
            worst_render = worst_render.max(render_fd_error(seed, mode));
        }
    }
    let (mut wa, mut ws, mut wf): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..10 {
        let (state, problem, windows, masks) = random_align_instance(seed);
        let (_, g) = loss_align_grad(&state, &problem).unwrap();
        wa = wa.max(align_fd_error(&state, &g, |s| loss_align(s, &problem).unwrap()));
        let (_, g) = loss_smooth_grad(&state);
        ws = ws.max(align_fd_error(&state, &g, loss_smooth));
        let (_, g) = loss_flow_grad(&state, &windows, &masks).unwrap();
        wf = wf.max(align_fd_error(&state, &g, |s| loss_flow(s, &windows, &masks).unwrap()));
    }
    let worst = worst_render.max(wa).max(ws).max(wf);
    Outcome {
        pass: worst < 1e-4,
        detail: format!(
            "max rel err render {worst_render:.2e}, align {wa:.2e}, smooth {ws:.2e}, flow {wf:.2e} (limit 1e-4)"
        ),
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_degeneracy() -> Outcome {
    let intr = Intrinsics::centered(20.0, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let (mut d_static, mut d_removed): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let n = rng.random_range(2..=8);
        let mut cloud = random_cloud(&mut rng, n);
        let pose = Pose::from_axis_angle(
            Vector3::new(rng.random_range(-0.05..0.05), 0.0, 0.0),
            Vector3::new(0.0, rng.random_range(-0.1..0.1), 0.0),
        );
        for g in &mut cloud.gaussians {
            g.staticness_logit = f64::INFINITY;
        }
        let plain = render(&cloud, &pose, &intr, RenderMode::Plain).image;
        let stat = render(&cloud, &pose, &intr, RenderMode::Staticness).image;
        d_static = d_static.max(max_abs_diff(&plain, &stat));

        let k = rng.random_range(0..n);
        cloud.gaussians[k].staticness_logit = f64::NEG_INFINITY;
        let with = render(&cloud, &pose, &intr, RenderMode::Staticness).image;
        let mut without = cloud.clone();
        without.gaussians.remove(k);
        without.sources.remove(k);
        let without = render(&without, &pose, &intr, RenderMode::Staticness).image;
        d_removed = d_removed.max(max_abs_diff(&with, &without));
    }
    Outcome {
        pass: d_static <= 1e-7 && d_removed <= 1e-7,
        detail: format!("all-static vs plain {d_static:.1e}, s=0 removal {d_removed:.1e} (limit 1e-7)"),
    }
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs()))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criterion 3

fn alignment_scene() -> SyntheticDataset {
    let mut spec = SceneSpec::standard(32, 24, 20, 2, 7);
    spec.coverage = Some(0.1);
    generate(&spec).unwrap()
}

fn perturb(state: &AlignState, seed: u64) -> AlignState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = state.clone();
    let mut unit = || {
        Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5).normalize()
    };
    for t in 0..out.num_frames() {
        let p = state.pose(t);
        let rot = p.rotation * UnitQuaternion::from_scaled_axis(unit() * 1f64.to_radians());
        let trans = p.translation + unit() * 0.01 * p.translation.norm().max(0.1);
        let q = Pose::new(rot, trans);
        out.quats[t] = q.raw_quat();
        out.translations[t] = q.translation;
    }
    out
}

struct AlignRuns {
    fixed_point: AlignState,
    recovered: AlignState,
}

fn run_alignment(ds: &SyntheticDataset) -> (AlignRuns, String, bool) {
    let problem = ds.align_problem().unwrap();
    let gt = ds.gt_state().unwrap();
    let fixed_cfg = AlignConfig {
        w_smooth: 0.0,
        ..Default::default()
    };
    let fixed = optimize_alignment(&problem, &ds.flows, &ds.masks, gt.clone(), &fixed_cfg).unwrap();
    let (terms, _) = total_loss(&fixed.state, &problem, &ds.flows, &ds.masks, 0.0, fixed_cfg.w_flow, false).unwrap();
    let drift = fixed
        .state
        .pack()
        .iter()
        .zip(gt.pack())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let start = perturb(&gt, 11);
    let before = trajectory_metrics(&start.poses(), &ds.poses).unwrap().ate;
    let rec = optimize_alignment(&problem, &ds.flows, &ds.masks, start, &AlignConfig::default()).unwrap();
    let after = trajectory_metrics(&rec.state.poses(), &ds.poses).unwrap().ate;
    let pass = terms.total < 1e-8 && drift < 1e-6 && after < 1e-2;
    let detail = format!(
        "fixed point loss {:.1e} (<1e-8), drift {drift:.1e} (<1e-6); perturbed ATE {before:.4} -> {after:.2e} (<1e-2)",
        terms.total
    );
    (
        AlignRuns {
            fixed_point: fixed.state,
            recovered: rec.state,
        },
        detail,
        pass,
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_mask_necessity() -> Outcome {
    let mut spec = SceneSpec::standard(32, 24, 20, 2, 11);
    spec.coverage = Some(0.3);
    spec.pointmap_noise = 0.02;
    let ds = generate(&spec).unwrap();
    let problem = ds.align_problem().unwrap();
    let init = initialize_state(&problem).unwrap();
    let none: Vec<FrameMask> = ds.masks.iter().map(|m| FrameMask::zeros(m.shape().0, m.shape().1)).collect();
    let cfg = AlignConfig::default();
    let with = optimize_alignment(&problem, &ds.flows, &ds.masks, init.clone(), &cfg).unwrap();
    let without = optimize_alignment(&problem, &ds.flows, &none, init, &cfg).unwrap();
    let a = trajectory_metrics(&with.state.poses(), &ds.poses).unwrap().ate;
    let b = trajectory_metrics(&without.state.poses(), &ds.poses).unwrap().ate;
    Outcome {
        pass: b >= 2.0 * a,
        detail: format!(
            "coverage {:.3}; ATE with GT masks {a:.5}, with M=0 {b:.5}, ratio {:.2} (>= 2)",
            ds.coverage,
            b / a
        ),
    }
}

// ------------------------------------------------------------- criteria 5, 6

struct Reconstruction {
    psnr: f64,
    cloud: GaussianCloud,
    poses: Vec<Pose>,
}

fn reconstruction_spec() -> SceneSpec {
    let mut spec = SceneSpec::standard(64, 64, 50, 2, 3);
    spec.coverage = Some(0.15);
    spec
}

/// Same scene with the camera slowed to a quarter of its motion, so the
/// image-anchored false-positive blocks keep covering the same surfaces for
/// many consecutive frames.
fn false_positive_spec() -> SceneSpec {
    let mut spec = reconstruction_spec();
    spec.mask_fp_rate = 0.1;
    spec.camera.travel *= 0.25;
    spec.camera.forward *= 0.25;
    spec.camera.yaw_deg *= 0.25;
    spec
}

/// Align, initialize, train and score held-out frames against the static
/// background. `masks` feed both alignment and training.
fn reconstruct(ds: &SyntheticDataset, masks: &[FrameMask], lr_staticness: f64) -> Reconstruction {
    let problem = ds.align_problem().unwrap();
    let init = initialize_state(&problem).unwrap();
    let aligned = optimize_alignment(&problem, &ds.flows, masks, init, &AlignConfig::default()).unwrap().state;
    let n = ds.num_frames();
    let (train_frames, test_frames) = split_frames(n);
    let cfg = TrainConfig {
        confidence_percentile: 90.0,
        lr: LearningRates {
            staticness: lr_staticness,
            ..Default::default()
        },
        ..Default::default()
    };
    let conf = frame_confidences(&problem);
    let cloud = init_cloud(&aligned, &conf, masks, &ds.frames, &train_frames, &cfg).unwrap();
    let staticness: Vec<_> = masks.iter().map(staticness_from_mask).collect();
    let intr = aligned.intrinsics();
    let data = FrameDataset::new(intr, ds.frames.clone(), aligned.poses(), staticness.clone()).unwrap();
    let out = train(cloud, &data, &cfg).unwrap();
    let mut poses = out.poses;
    let imgs: Vec<_> = test_frames.iter().map(|&t| ds.frames[t].clone()).collect();
    let stat: Vec<_> = test_frames.iter().map(|&t| staticness[t].clone()).collect();
    let start: Vec<_> = test_frames.iter().map(|&t| poses[t]).collect();
    let refined = refine_test_poses(&out.cloud, &imgs, &stat, &start, &intr, &cfg).unwrap();
    let mut total = 0.0;
    for (k, &t) in test_frames.iter().enumerate() {
        poses[t] = refined[k];
        let img = render(&out.cloud, &refined[k], &intr, RenderMode::Staticness).image;
        total += masked_psnr(&img, &ds.static_frames[t], &ds.masks[t], 0.5).unwrap();
    }
    Reconstruction {
        psnr: total / test_frames.len() as f64,
        cloud: out.cloud,
        poses,
    }
}

// ---------------------------------------------------------------- criterion 7

fn criterion_metrics() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let img = |v: f64| Grid::filled(8, 8, [v; 3]);
    let zeros = FrameMask::zeros(8, 8);
    ok &= masked_psnr(&img(0.3), &img(0.3), &zeros, 0.5).unwrap() == PSNR_CAP;
    ok &= (masked_psnr(&img(0.4), &img(0.3), &zeros, 0.5).unwrap() - 20.0).abs() < 1e-9;
    let ones = FrameMask::new(Grid::filled(8, 8, 1.0)).unwrap();
    ok &= masked_psnr(&img(0.4), &img(0.3), &ones, 0.5).is_err();
    ok &= mask_iou(&ones, &ones, 0.5).unwrap() == 1.0;
    ok &= mask_iou(&zeros, &zeros, 0.5).unwrap() == 1.0;
    let left = FrameMask::new(Grid::from_fn(8, 8, |u, _| (u < 4) as u8 as f64)).unwrap();
    let right = FrameMask::new(Grid::from_fn(8, 8, |u, _| (u >= 4) as u8 as f64)).unwrap();
    ok &= mask_iou(&left, &right, 0.5).unwrap() == 0.0;
    ok &= mask_iou(&ones, &left, 0.5).unwrap() == 0.5;
    notes.push(format!("examples {}", if ok { "exact" } else { "MISMATCH" }));

    let gt: Vec<Pose> = (0..10)
        .map(|i| {
            let t = i as f64;
            Pose::from_axis_angle(
                Vector3::new(0.02 * t, 0.1 * (0.3 * t).sin(), 0.01),
                Vector3::new(0.2 * t, (0.5 * t).sin(), 0.1 * t * t),
            )
        })
        .collect();
    let id = trajectory_metrics(&gt, &gt).unwrap();
    ok &= id.ate < 1e-12 && id.rpe_trans < 1e-12 && id.rpe_rot < 1e-9;
    let mut acc = Pose::identity();
    let step = Pose::from_axis_angle(Vector3::new(0.0, 0.0, 1f64.to_radians()), Vector3::zeros());
    let straight: Vec<Pose> = gt.iter().map(|p| Pose::new(UnitQuaternion::identity(), p.translation)).collect();
    let drifted: Vec<Pose> = straight
        .iter()
        .map(|p| {
            let q = p.compose(&acc);
            acc = acc.compose(&step);
            q
        })
        .collect();
    let rot_err = trajectory_metrics(&drifted, &straight).unwrap().rpe_rot;
    ok &= (rot_err - 1.0).abs() < 1e-6;
    notes.push(format!("1 deg per-step offset gives rpe_rot {rot_err:.9}"));
    let g = Pose::from_axis_angle(Vector3::new(0.4, -0.3, 1.0), Vector3::new(3.0, -1.0, 2.0));
    let base = trajectory_metrics(&perturbed_trajectory(&gt), &gt).unwrap();
    let mut worst: f64 = 0.0;
    // rigid part of the shared transform: every metric is unchanged
    let moved_est: Vec<Pose> = perturbed_trajectory(&gt).iter().map(|p| g.compose(p)).collect();
    let moved_gt: Vec<Pose> = gt.iter().map(|p| g.compose(p)).collect();
    let m = trajectory_metrics(&moved_est, &moved_gt).unwrap();
    worst = worst.max((m.ate - base.ate).abs()).max((m.rpe_trans - base.rpe_trans).abs());
    worst = worst.max((m.rpe_rot - base.rpe_rot).abs());
    // a similarity applied to the estimate alone is removed entirely
    let s = 2.5;
    let sim_est: Vec<Pose> = gt.iter().map(|p| g.compose(&Pose::new(p.rotation, p.translation * s))).collect();
    let m = trajectory_metrics(&sim_est, &gt).unwrap();
    worst = worst.max(m.ate).max(m.rpe_trans);
    // a shared scale scales the translational errors by the same factor
    let scaled_est: Vec<Pose> = perturbed_trajectory(&gt).iter().map(|p| Pose::new(p.rotation, p.translation * s)).collect();
    let scaled_gt: Vec<Pose> = gt.iter().map(|p| Pose::new(p.rotation, p.translation * s)).collect();
    let m = trajectory_metrics(&scaled_est, &scaled_gt).unwrap();
    worst = worst.max((m.ate - s * base.ate).abs()).max((m.rpe_trans - s * base.rpe_trans).abs());
    worst = worst.max((m.rpe_rot - base.rpe_rot).abs());
    ok &= worst < 1e-9;
    notes.push(format!("similarity deviation {worst:.1e} (limit 1e-9)"));
    Outcome {
        pass: ok,
        detail: notes.join(", "),
    }
}

fn perturbed_trajectory(gt: &[Pose]) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    gt.iter()
        .map(|p| {
            let d = Pose::from_axis_angle(
                Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0),
                Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            );
            p.compose(&d)
        })
        .collect()
}

// ---------------------------------------------------------------- criterion 8

fn save(dir: &Path, tag: &str, poses: &[Pose], cloud: Option<&GaussianCloud>) -> Vec<Vec<u8>> {
    let traj = dir.join(format!("{tag}_trajectory.txt"));
    write_trajectory(&traj, poses).unwrap();
    let mut out = vec![std::fs::read(&traj).unwrap()];
    if let Some(c) = cloud {
        let p = dir.join(format!("{tag}_cloud.ply"));
        write_cloud(&p, c).unwrap();
        out.push(std::fs::read(&p).unwrap());
    }
    out
}

fn main() {
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let want = |id: u32| filter.is_none_or(|f| f == id);
    let tmp = tempfile::tempdir().unwrap();
    let mut all = true;
    let min = |m: u64| Duration::from_secs(60 * m);

    if want(1) {
        all &= report(1, "gradient fidelity", Duration::from_secs(60), criterion_gradients);
    }
    if want(2) {
        all &= report(2, "staticness degeneracy", Duration::from_secs(5), criterion_degeneracy);
    }
    let mut first_alignment = None;
    if want(3) || want(8) {
        all &= report(3, "alignment fixed point and recovery", min(5), || {
            let (runs, detail, pass) = run_alignment(&alignment_scene());
            first_alignment = Some(runs);
            Outcome { pass, detail }
        });
    }
    if want(4) {
        all &= report(4, "mask weighting necessity", min(10), criterion_mask_necessity);
    }
    let mut first_recon = None;
    if want(5) || want(8) {
        all &= report(5, "end-to-end static reconstruction", min(15), || {
            let ds = generate(&reconstruction_spec()).unwrap();
            let r = reconstruct(&ds, &ds.masks, LearningRates::default().staticness);
            let psnr = r.psnr;
            first_recon = Some(r);
            Outcome {
                pass: psnr >= 35.0,
                detail: format!("held-out masked PSNR {psnr:.2} dB (>= 35)"),
            }
        });
    }
    if want(6) {
        all &= report(6, "staticness self-correction", min(30), || {
            let ds = generate(&false_positive_spec()).unwrap();
            let masks = corrupt_masks(&ds.masks, 0.1, 0.0, 99).unwrap();
            let learned = reconstruct(&ds, &masks, LearningRates::default().staticness).psnr;
            let frozen = reconstruct(&ds, &masks, 0.0).psnr;
            Outcome {
                pass: learned - frozen > 0.5,
                detail: format!("learned {learned:.2} dB vs frozen {frozen:.2} dB, gain {:.2} (> 0.5)", learned - frozen),
            }
        });
    }
    if want(7) {
        all &= report(7, "metric sanity", Duration::from_secs(5), criterion_metrics);
    }
    if want(8) {
        all &= report(8, "determinism", min(20), || {
            let mut same = true;
            if let Some(a) = &first_alignment {
                let (b, _, _) = run_alignment(&alignment_scene());
                same &= save(tmp.path(), "a3fix", &a.fixed_point.poses(), None) == save(tmp.path(), "b3fix", &b.fixed_point.poses(), None);
                same &= save(tmp.path(), "a3rec", &a.recovered.poses(), None) == save(tmp.path(), "b3rec", &b.recovered.poses(), None);
            }
            if let Some(a) = &first_recon {
                let ds = generate(&reconstruction_spec()).unwrap();
                let b = reconstruct(&ds, &ds.masks, LearningRates::default().staticness);
                same &= save(tmp.path(), "a5", &a.poses, Some(&a.cloud)) == save(tmp.path(), "b5", &b.poses, Some(&b.cloud));
            }
            Outcome {
                pass: same,
                detail: format!("repeated criteria 3 and 5: trajectory and cloud files {}", if same { "byte-identical" } else { "DIFFER" }),
            }
        });
    }
    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
