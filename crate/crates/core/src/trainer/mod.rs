//! Cloud initialization from aligned pointmaps and staticness-aware training.

mod knn;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{AlignProblem, AlignState};
use crate::error::{Error, Result};
use crate::eval::split_frames;
use crate::geometry::{Intrinsics, Pose, RawQuat};
use crate::grid::{Grid, Image};
use crate::masks::{FrameMask, StaticnessMap};
use crate::splat::{logit, rasterize, Gaussian, GaussianCloud, RenderMode, SourceTag};
use crate::ssim::weighted_ssim_grad;

pub use knn::mean_knn_distance;

/// Staticness is kept inside this interval during optimization.
pub const STATICNESS_MIN: f64 = 1e-4;
pub const STATICNESS_MAX: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// `S·|I_r − I_gt|`: dynamic pixels are ignored.
    Masked,
    /// `|I_r − S·I_gt|`: dynamic pixels are pulled towards black.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub opacity: f64,
    /// Zero freezes staticness.
    pub staticness: f64,
    pub pose_rotation: f64,
    pub pose_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            opacity: 0.05,
            staticness: 0.05,
            pose_rotation: 1e-4,
            pose_translation: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub lambda_ssim: f64,
    /// Pixels below this confidence percentile are not turned into Gaussians.
    pub confidence_percentile: f64,
    pub loss_form: LossForm,
    pub refine_poses: bool,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            lr: LearningRates::default(),
            lambda_ssim: 0.2,
            confidence_percentile: 50.0,
            loss_form: LossForm::Masked,
            refine_poses: true,
            refine_iterations: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            log::warn!("train.iterations = 0: the cloud is returned unchanged");
        }
        if !(self.lambda_ssim >= 0.0 && self.lambda_ssim.is_finite()) {
            return Err(Error::InvalidInput(format!("train.lambda_ssim must be >= 0, got {}", self.lambda_ssim)));
        }
        if !(0.0..=100.0).contains(&self.confidence_percentile) {
            return Err(Error::InvalidInput(format!(
                "train.confidence_percentile must lie in [0, 100], got {}",
                self.confidence_percentile
            )));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("train.lr_position", lr.position),
            ("train.lr_opacity", lr.opacity),
            ("train.lr_staticness", lr.staticness),
            ("train.lr_rotation", lr.pose_rotation),
            ("train.lr_translation", lr.pose_translation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Frames, their poses and staticness maps, with the fixed 90/10 split.
#[derive(Clone, Debug)]
pub struct FrameDataset {
    pub intrinsics: Intrinsics,
    pub images: Vec<Image>,
    pub poses: Vec<Pose>,
    pub staticness: Vec<StaticnessMap>,
    pub split: Vec<Split>,
}

impl FrameDataset {
    pub fn new(intrinsics: Intrinsics, images: Vec<Image>, poses: Vec<Pose>, staticness: Vec<StaticnessMap>) -> Result<Self> {
        let n = images.len();
        if poses.len() != n || staticness.len() != n {
            return Err(Error::InvalidInput(format!(
                "{n} images, {} poses and {} staticness maps",
                poses.len(),
                staticness.len()
            )));
        }
        let shape = (intrinsics.width, intrinsics.height);
        for (img, s) in images.iter().zip(&staticness) {
            if img.shape() != shape || s.values().shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    got: if img.shape() != shape { img.shape() } else { s.values().shape() },
                });
            }
        }
        let (_, test) = split_frames(n);
        let split = (0..n)
            .map(|i| if test.contains(&i) { Split::Test } else { Split::Train })
            .collect();
        Ok(Self {
            intrinsics,
            images,
            poses,
            staticness,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == Split::Train).collect()
    }

    pub fn test_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == Split::Test).collect()
    }
}

/// Per-frame confidence: mean of `C^(n,n)` over edges starting at the frame.
pub fn frame_confidences(problem: &AlignProblem) -> Vec<Grid<f64>> {
    let n = problem.graph.num_frames();
    let (w, h) = (problem.width, problem.height);
    let mut sums = vec![Grid::filled(w, h, 0.0); n];
    let mut counts = vec![0usize; n];
    for (&(a, _), pair) in problem.graph.edges().iter().zip(&problem.pairs) {
        for (s, c) in sums[a].as_mut_slice().iter_mut().zip(pair.c_nn.iter()) {
            *s += c;
        }
        counts[a] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let c = c.max(1) as f64;
        for x in s.as_mut_slice() {
            *x /= c;
        }
    }
    sums
}

fn clamp_staticness(s: f64) -> f64 {
    s.clamp(STATICNESS_MIN, STATICNESS_MAX)
}

/// One Gaussian per surviving pixel of the given frames. Pixels are ranked
/// by confidence (ties broken by a seeded shuffle) and the top
/// `100 − percentile` percent are kept.
pub fn init_cloud(
    state: &AlignState,
    confidences: &[Grid<f64>],
    frame_masks: &[FrameMask],
    images: &[Image],
    frames: &[usize],
    cfg: &TrainConfig,
) -> Result<GaussianCloud> {
    let n = state.num_frames();
    if n < 2 {
        return Err(Error::InvalidInput("cloud initialization needs at least 2 frames".into()));
    }
    if confidences.len() != n || frame_masks.len() != n || images.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} confidence maps, masks and images, got {}, {} and {}",
            confidences.len(),
            frame_masks.len(),
            images.len()
        )));
    }
    let shape = (state.width, state.height);
    for t in 0..n {
        for s in [confidences[t].shape(), frame_masks[t].shape(), images[t].shape()] {
            if s != shape {
                return Err(Error::ShapeMismatch { expected: shape, got: s });
            }
        }
    }
    if !(0.0..=100.0).contains(&cfg.confidence_percentile) {
        return Err(Error::InvalidInput(format!(
            "confidence percentile {} outside [0, 100]",
            cfg.confidence_percentile
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ranked: Vec<(f64, u64, usize, usize)> = Vec::new();
    for &t in frames {
        if t >= n {
            return Err(Error::InvalidInput(format!("frame {t} out of range")));
        }
        for (i, &c) in confidences[t].iter().enumerate() {
            ranked.push((c, rng.random(), t, i));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep = ((ranked.len() as f64) * (100.0 - cfg.confidence_percentile) / 100.0).round() as usize;
    if keep == 0 {
        return Err(Error::NoSurvivingPoints);
    }
    ranked.truncate(keep);
    ranked.sort_by_key(|r| (r.2, r.3));

    let world: Vec<Grid<Vector3<f64>>> = (0..n)
        .map(|t| {
            if frames.contains(&t) {
                state.global_pointmap(t).points
            } else {
                Grid::filled(0, 0, Vector3::zeros())
            }
        })
        .collect();
    let points: Vec<Vector3<f64>> = ranked.iter().map(|&(_, _, t, i)| world[t][i]).collect();
    let spacing = mean_knn_distance(&points, 3);
    let floor = 1e-6 * spacing.iter().copied().fold(0.0, f64::max).max(1e-6);
    let opacity_logit = logit(1.0 / n as f64);
    let mut cloud = GaussianCloud::default();
    for (k, &(_, _, t, i)) in ranked.iter().enumerate() {
        let s = clamp_staticness(1.0 - frame_masks[t].values()[i]);
        let g = Gaussian {
            mu: points[k],
            log_scale: Vector3::repeat(spacing[k].max(floor).ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            color: images[t][i],
            opacity_logit,
            staticness_logit: logit(s),
        };
        cloud.push(
            g,
            Some(SourceTag {
                frame: t,
                u: i % state.width,
                v: i / state.width,
            }),
        );
    }
    Ok(cloud)
}

/// Value of the image loss split into its photometric and SSIM parts, and
/// its gradient with respect to the rendered image.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: Image,
}

/// Photometric term only; see [`LossForm`].
pub fn loss_image(rendered: &Image, gt: &Image, s: &StaticnessMap, form: LossForm) -> Result<f64> {
    rendered.same_shape(gt)?;
    rendered.same_shape(s.values())?;
    let mut sum = 0.0;
    for ((r, g), &w) in rendered.iter().zip(gt.iter()).zip(s.values().iter()) {
        for ch in 0..3 {
            sum += match form {
                LossForm::Masked => w * (r[ch] - g[ch]).abs(),
                LossForm::Literal => (r[ch] - w * g[ch]).abs(),
            };
        }
    }
    Ok(sum / rendered.len() as f64)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `loss_image + λ·Σ_p w(p)(1 − ssim(p))/|Ω|` with the same weighting as the
/// photometric term.
pub fn image_loss_grad(rendered: &Image, gt: &Image, s: &StaticnessMap, form: LossForm, lambda_ssim: f64) -> Result<ImageLoss> {
    let l1 = loss_image(rendered, gt, s, form)?;
    let (w, h) = rendered.shape();
    let np = (w * h) as f64;
    let mut grad = Grid::filled(w, h, [0.0; 3]);
    for i in 0..rendered.len() {
        let (r, g, wt) = (rendered[i], gt[i], s.values()[i]);
        for ch in 0..3 {
            grad[i][ch] = match form {
                LossForm::Masked => wt * sign(r[ch] - g[ch]),
                LossForm::Literal => sign(r[ch] - wt * g[ch]),
            } / np;
        }
    }
    let mut ssim_term = 0.0;
    if lambda_ssim > 0.0 {
        let (target, weight) = match form {
            LossForm::Masked => (gt.clone(), s.values().clone()),
            LossForm::Literal => (
                Grid::from_fn(w, h, |u, v| {
                    let k = *s.values().get(u, v);
                    gt.get(u, v).map(|c| k * c)
                }),
                Grid::filled(w, h, 1.0),
            ),
        };
        let (val, sg) = weighted_ssim_grad(rendered, &target, &weight)?;
        ssim_term = (weight.iter().sum::<f64>() - val) / np;
        for i in 0..grad.len() {
            for ch in 0..3 {
                grad[i][ch] -= lambda_ssim * sg[i][ch] / np;
            }
        }
    }
    Ok(ImageLoss {
        total: l1 + lambda_ssim * ssim_term,
        l1,
        ssim: ssim_term,
        grad,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let (bc1, bc2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for i in 0..x.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
}

struct PoseOptimizer {
    adam: Adam,
}

impl PoseOptimizer {
    fn new() -> Self {
        Self { adam: Adam::new(7) }
    }

    fn step(&mut self, pose: &mut Pose, d_rot: &RawQuat, d_trans: &Vector3<f64>, lr_rot: f64, lr_trans: f64) {
        let q = pose.raw_quat();
        let mut x = [q[0], q[1], q[2], q[3], pose.translation.x, pose.translation.y, pose.translation.z];
        let g = [d_rot[0], d_rot[1], d_rot[2], d_rot[3], d_trans.x, d_trans.y, d_trans.z];
        let before = x;
        self.adam.step(&mut x, &g, 1.0);
        // per-block learning rates on a unit-rate Adam step
        for i in 0..7 {
            let lr = if i < 4 { lr_rot } else { lr_trans };
            x[i] = before[i] + lr * (x[i] - before[i]);
        }
        *pose = Pose::from_raw([x[0], x[1], x[2], x[3]], Vector3::new(x[4], x[5], x[6]));
    }
}

/// Radius used to scale the position learning rate: RMS distance of the
/// Gaussians from their centroid.
pub fn scene_extent(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        return 1.0;
    }
    let n = cloud.len() as f64;
    let c = cloud.gaussians.iter().map(|g| g.mu).sum::<Vector3<f64>>() / n;
    let r = (cloud.gaussians.iter().map(|g| (g.mu - c).norm_squared()).sum::<f64>() / n).sqrt();
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub frame: usize,
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub cloud: GaussianCloud,
    /// All frames; only training frames are refined.
    pub poses: Vec<Pose>,
    pub trace: Vec<TrainLogEntry>,
}

/// Optimizes positions, opacities, staticness and (optionally) training
/// poses. Colors, rotations and scales stay fixed and the cloud size never
/// changes.
pub fn train(cloud: GaussianCloud, dataset: &FrameDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut cloud = cloud;
    let mut poses = dataset.poses.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(TrainOutput { cloud, poses, trace });
    }
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot train an empty cloud".into()));
    }
    let train_frames = dataset.train_frames();
    if train_frames.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let n = cloud.len();
    let lr_mu = cfg.lr.position * scene_extent(&cloud);
    let s_lo = logit(STATICNESS_MIN);
    let s_hi = logit(STATICNESS_MAX);
    let mut adam_mu = Adam::new(3 * n);
    let mut adam_op = Adam::new(n);
    let mut adam_st = Adam::new(n);
    let mut pose_opt: Vec<PoseOptimizer> = (0..dataset.len()).map(|_| PoseOptimizer::new()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let intr = &dataset.intrinsics;
    let mut mu = vec![0.0; 3 * n];
    let mut op = vec![0.0; n];
    let mut st = vec![0.0; n];
    let mut g_mu = vec![0.0; 3 * n];

    for it in 0..cfg.iterations {
        let t = train_frames[rng.random_range(0..train_frames.len())];
        let pose = poses[t];
        let rast = rasterize(&cloud, &pose, intr, RenderMode::Staticness);
        let loss = image_loss_grad(
            &rast.output.image,
            &dataset.images[t],
            &dataset.staticness[t],
            cfg.loss_form,
            cfg.lambda_ssim,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        trace.push(TrainLogEntry {
            iteration: it,
            frame: t,
            total: loss.total,
            l1: loss.l1,
            ssim: loss.ssim,
        });
        let grad = rast.backward(&cloud, &pose, intr, &loss.grad);

        for (i, g) in cloud.gaussians.iter().enumerate() {
            mu[3 * i..3 * i + 3].copy_from_slice(g.mu.as_slice());
            g_mu[3 * i..3 * i + 3].copy_from_slice(grad.mu[i].as_slice());
            op[i] = g.opacity_logit;
            st[i] = g.staticness_logit;
        }
        adam_mu.step(&mut mu, &g_mu, lr_mu);
        adam_op.step(&mut op, &grad.opacity_logit, cfg.lr.opacity);
        if cfg.lr.staticness > 0.0 {
            adam_st.step(&mut st, &grad.staticness_logit, cfg.lr.staticness);
        }
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            g.mu = Vector3::new(mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]);
            g.opacity_logit = op[i];
            if cfg.lr.staticness > 0.0 {
                g.staticness_logit = st[i].clamp(s_lo, s_hi);
            }
        }
        if cfg.refine_poses {
            pose_opt[t].step(
                &mut poses[t],
                &grad.pose_rotation,
                &grad.pose_translation,
                cfg.lr.pose_rotation,
                cfg.lr.pose_translation,
            );
        }
        if cloud.gaussians.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        if it % 500 == 0 {
            log::info!("train iter {it}: loss {:.5} (l1 {:.5}, ssim {:.5})", loss.total, loss.l1, loss.ssim);
        }
    }
    Ok(TrainOutput { cloud, poses, trace })
}

/// Optimizes each listed frame's pose against the frozen cloud for
/// `cfg.refine_iterations` steps with cosine-decayed step sizes.
pub fn refine_test_poses(
    cloud: &GaussianCloud,
    images: &[Image],
    staticness: &[StaticnessMap],
    initial: &[Pose],
    intr: &Intrinsics,
    cfg: &TrainConfig,
) -> Result<Vec<Pose>> {
    if images.len() != initial.len() || staticness.len() != initial.len() {
        return Err(Error::InvalidInput(format!(
            "{} images, {} staticness maps and {} poses",
            images.len(),
            staticness.len(),
            initial.len()
        )));
    }
    let mut out = Vec::with_capacity(initial.len());
    for (k, &start) in initial.iter().enumerate() {
        let mut pose = start;
        let mut opt = PoseOptimizer::new();
        let iters = cfg.refine_iterations;
        for it in 0..iters {
            let rast = rasterize(cloud, &pose, intr, RenderMode::Staticness);
            let loss = image_loss_grad(&rast.output.image, &images[k], &staticness[k], cfg.loss_form, cfg.lambda_ssim)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { iteration: it });
            }
            let grad = rast.backward(cloud, &pose, intr, &loss.grad);
            let decay = crate::align::cosine_lr(1.0, it, iters);
            opt.step(
                &mut pose,
                &grad.pose_rotation,
                &grad.pose_translation,
                cfg.lr.pose_rotation * decay,
                cfg.lr.pose_translation * decay,
            );
        }
        out.push(pose);
    }
    Ok(out)
}
