//! Ray-cast synthetic scenes with exact ground truth: poses, depths, masks,
//! pair pointmaps, optical flow and dynamic-free background renders.

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::align::{build_graph, AlignProblem, AlignState, FrameGraph, PairPrediction, WindowSet};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, FlowField, Intrinsics, Pose};
use crate::grid::{Grid, Image};
use crate::masks::{FrameMask, PairMask};

type V3 = Vector3<f64>;

const MAX_COVERAGE: f64 = 0.9;
const BLOCK: usize = 8;

/// Smooth procedural color: `base + Σ amp·sin(freq·p + phase)`, clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<(V3, f64, [f64; 3])>,
}

impl Texture {
    pub fn flat(color: [f64; 3]) -> Self {
        Self {
            base: color,
            waves: Vec::new(),
        }
    }

    fn random(rng: &mut ChaCha8Rng, base: [f64; 3], freq: f64, amp: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let dir = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let k = dir.normalize() * freq * rng.random_range(0.5..1.0);
                let a = [
                    amp * rng.random_range(0.3..1.0),
                    amp * rng.random_range(0.3..1.0),
                    amp * rng.random_range(0.3..1.0),
                ];
                (k, rng.random_range(0.0..std::f64::consts::TAU), a)
            })
            .collect();
        Self { base, waves }
    }

    pub fn eval(&self, p: &V3) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, a) in &self.waves {
            let s = (k.dot(p) + phase).sin();
            for ch in 0..3 {
                c[ch] += a[ch] * s;
            }
        }
        c.map(|x| x.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StaticShape {
    /// Infinite plane through `point` with unit `normal`.
    Plane { point: V3, normal: V3 },
    /// Axis-aligned box.
    Box { min: V3, max: V3 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticSurface {
    pub shape: StaticShape,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DynamicShape {
    /// Rectangle spanned by two half-extent vectors.
    Quad { half_u: V3, half_v: V3 },
    Ellipsoid { radii: V3 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Center moves by `velocity` over the whole sequence.
    Linear { velocity: V3 },
    /// Center orbits in the x-y plane.
    Circular { radius: f64, turns: f64, phase: f64 },
}

impl Motion {
    fn offset(&self, tau: f64) -> V3 {
        match *self {
            Motion::Linear { velocity } => velocity * tau,
            Motion::Circular { radius, turns, phase } => {
                let a = phase + turns * std::f64::consts::TAU * tau;
                let b = phase;
                radius * V3::new(a.cos() - b.cos(), a.sin() - b.sin(), 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicObject {
    pub shape: DynamicShape,
    pub center: V3,
    pub motion: Motion,
    /// Evaluated in object-local coordinates so it moves with the object.
    pub texture: Texture,
}

/// Camera-to-world motion over normalized time `tau ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPath {
    /// Total sideways travel (scene units).
    pub travel: f64,
    /// Forward travel along the viewing axis.
    pub forward: f64,
    /// Peak-to-peak yaw in degrees.
    pub yaw_deg: f64,
    /// Amplitude of a slow pitch oscillation in degrees.
    pub pitch_deg: f64,
}

impl CameraPath {
    pub fn still() -> Self {
        Self {
            travel: 0.0,
            forward: 0.0,
            yaw_deg: 0.0,
            pitch_deg: 0.0,
        }
    }

    pub fn pose(&self, tau: f64) -> Pose {
        let s = tau - 0.5;
        let yaw = self.yaw_deg.to_radians() * s;
        let pitch = self.pitch_deg.to_radians() * (std::f64::consts::PI * tau).sin();
        let rot = Rotation3::from_axis_angle(&V3::y_axis(), yaw) * Rotation3::from_axis_angle(&V3::x_axis(), pitch);
        let pos = V3::new(self.travel * s, 0.1 * self.travel * (std::f64::consts::PI * tau).sin(), self.forward * tau);
        Pose::new(UnitQuaternion::from_rotation_matrix(&rot), pos)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub focal: f64,
    pub background: Vec<StaticSurface>,
    pub dynamic: Vec<DynamicObject>,
    /// Target mean fraction of pixels showing dynamic objects. `None` keeps
    /// the objects at their given size.
    pub coverage: Option<f64>,
    pub camera: CameraPath,
    /// Std-dev of iid Gaussian noise on pair pointmaps (scene units).
    pub pointmap_noise: f64,
    pub mask_fp_rate: f64,
    pub mask_fn_rate: f64,
    pub strides: Vec<usize>,
    pub window: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// A room corner with a box, smooth textures and `num_dynamic` moving
    /// objects, all drawn from `seed`.
    pub fn standard(width: usize, height: usize, num_frames: usize, num_dynamic: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ca1e);
        let mut tex = |base: [f64; 3], freq: f64| Texture::random(&mut rng, base, freq, 0.12);
        let background = vec![
            StaticSurface {
                shape: StaticShape::Plane {
                    point: V3::new(0.0, 0.0, 6.0),
                    normal: V3::new(0.0, 0.0, -1.0),
                },
                texture: tex([0.55, 0.5, 0.45], 1.2),
            },
            StaticSurface {
                shape: StaticShape::Plane {
                    point: V3::new(0.0, 1.4, 0.0),
                    normal: V3::new(0.0, -1.0, 0.0),
                },
                texture: tex([0.4, 0.45, 0.5], 1.5),
            },
            StaticSurface {
                shape: StaticShape::Plane {
                    point: V3::new(-3.2, 0.0, 0.0),
                    normal: V3::new(1.0, 0.0, 0.0),
                },
                texture: tex([0.5, 0.55, 0.42], 1.2),
            },
            StaticSurface {
                shape: StaticShape::Box {
                    min: V3::new(0.6, 0.5, 4.2),
                    max: V3::new(1.8, 1.4, 5.2),
                },
                texture: tex([0.6, 0.48, 0.4], 2.0),
            },
        ];
        let dynamic = (0..num_dynamic)
            .map(|i| {
                let center = V3::new(rng.random_range(-1.2..1.2), rng.random_range(-0.6..0.4), rng.random_range(3.0..4.0));
                let shape = if i % 2 == 0 {
                    DynamicShape::Quad {
                        half_u: V3::new(0.35, 0.0, 0.0),
                        half_v: V3::new(0.0, 0.35, 0.05),
                    }
                } else {
                    DynamicShape::Ellipsoid {
                        radii: V3::new(0.35, 0.3, 0.3),
                    }
                };
                let motion = if i % 2 == 0 {
                    let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    Motion::Linear {
                        velocity: V3::new(dir * rng.random_range(0.8..1.4), rng.random_range(-0.2..0.2), 0.0),
                    }
                } else {
                    Motion::Circular {
                        radius: rng.random_range(0.4..0.7),
                        turns: rng.random_range(0.5..1.0),
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    }
                };
                let base = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
                DynamicObject {
                    shape,
                    center,
                    motion,
                    texture: Texture::random(&mut rng, base, 4.0, 0.1),
                }
            })
            .collect();
        Self {
            width,
            height,
            num_frames,
            focal: width as f64,
            background,
            dynamic,
            coverage: None,
            camera: CameraPath {
                travel: 0.8,
                forward: 0.3,
                yaw_deg: 8.0,
                pitch_deg: 2.0,
            },
            pointmap_noise: 0.0,
            mask_fp_rate: 0.0,
            mask_fn_rate: 0.0,
            strides: vec![1],
            window: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::InvalidInput(format!("scene.frames must be at least 2, got {}", self.num_frames)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("scene.width and scene.height must be positive".into()));
        }
        if let Some(c) = self.coverage {
            if !(0.0..=MAX_COVERAGE).contains(&c) {
                return Err(Error::InvalidInput(format!("scene.coverage must lie in [0, {MAX_COVERAGE}], got {c}")));
            }
            if c > 0.0 && self.dynamic.is_empty() {
                return Err(Error::Infeasible("scene.coverage > 0 needs at least one dynamic object".into()));
            }
        }
        if !(self.pointmap_noise >= 0.0 && self.pointmap_noise.is_finite()) {
            return Err(Error::InvalidInput("scene.noise must be finite and non-negative".into()));
        }
        for (name, r) in [("scene.fp_rate", self.mask_fp_rate), ("scene.fn_rate", self.mask_fn_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if self.window == 0 {
            return Err(Error::InvalidInput("scene.window must be positive".into()));
        }
        Intrinsics::centered(self.focal, self.width, self.height)?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.focal, self.width, self.height).expect("validated spec")
    }

    pub fn tau(&self, t: usize) -> f64 {
        t as f64 / (self.num_frames - 1) as f64
    }
}

#[derive(Clone, Copy)]
struct Hit {
    depth: f64,
    point: V3,
    color: [f64; 3],
    dynamic: Option<usize>,
}

fn intersect_static(s: &StaticSurface, o: &V3, d: &V3) -> Option<(f64, V3)> {
    match &s.shape {
        StaticShape::Plane { point, normal } => {
            let den = d.dot(normal);
            if den.abs() < 1e-12 {
                return None;
            }
            let t = (point - o).dot(normal) / den;
            (t > 1e-9).then(|| (t, o + d * t))
        }
        StaticShape::Box { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k] < min[k] || o[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            let t = if t0 > 1e-9 { t0 } else { t1 };
            (t0 <= t1 && t > 1e-9).then(|| (t, o + d * t))
        }
    }
}

fn intersect_dynamic(obj: &DynamicObject, scale: f64, center: &V3, o: &V3, d: &V3) -> Option<(f64, V3)> {
    let rel = o - center;
    match &obj.shape {
        DynamicShape::Quad { half_u, half_v } => {
            let (hu, hv) = (half_u * scale, half_v * scale);
            let n = hu.cross(&hv);
            let den = d.dot(&n);
            if den.abs() < 1e-15 {
                return None;
            }
            let t = -rel.dot(&n) / den;
            if t <= 1e-9 {
                return None;
            }
            let local = rel + d * t;
            let a = local.dot(&hu) / hu.norm_squared();
            let b = local.dot(&hv) / hv.norm_squared();
            (a.abs() <= 1.0 && b.abs() <= 1.0).then_some((t, local))
        }
        DynamicShape::Ellipsoid { radii } => {
            let r = radii * scale;
            let (os, ds) = (rel.component_div(&r), d.component_div(&r));
            let (a, b, c) = (ds.norm_squared(), 2.0 * os.dot(&ds), os.norm_squared() - 1.0);
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let (t0, t1) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
            let t = if t0 > 1e-9 { t0 } else { t1 };
            (t > 1e-9).then(|| (t, rel + d * t))
        }
    }
}

/// Closest surface along the ray `o + λ·d`; with a unit-z camera ray `λ` is the z-depth.
fn cast(spec: &SceneSpec, scale: f64, tau: f64, o: &V3, d: &V3, with_dynamic: bool) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for s in &spec.background {
        if let Some((t, p)) = intersect_static(s, o, d) {
            if best.is_none_or(|b| t < b.depth) {
                best = Some(Hit {
                    depth: t,
                    point: p,
                    color: s.texture.eval(&p),
                    dynamic: None,
                });
            }
        }
    }
    if with_dynamic {
        for (i, obj) in spec.dynamic.iter().enumerate() {
            let center = obj.center + obj.motion.offset(tau);
            if let Some((t, local)) = intersect_dynamic(obj, scale, &center, o, d) {
                if best.is_none_or(|b| t < b.depth) {
                    best = Some(Hit {
                        depth: t,
                        point: o + d * t,
                        color: obj.texture.eval(&local),
                        dynamic: Some(i),
                    });
                }
            }
        }
    }
    best
}

struct FrameRender {
    image: Image,
    static_image: Image,
    depth: Grid<f64>,
    world: Grid<V3>,
    object: Grid<Option<usize>>,
}

fn render_frame(spec: &SceneSpec, scale: f64, t: usize, pose: &Pose) -> Result<FrameRender> {
    let intr = spec.intrinsics();
    let tau = spec.tau(t);
    let r = pose.rotation_matrix();
    let o = pose.translation;
    let (w, h) = (spec.width, spec.height);
    let mut image = Grid::filled(w, h, [0.0; 3]);
    let mut static_image = Grid::filled(w, h, [0.0; 3]);
    let mut depth = Grid::filled(w, h, 0.0);
    let mut world = Grid::filled(w, h, V3::zeros());
    let mut object = Grid::filled(w, h, None);
    for v in 0..h {
        for u in 0..w {
            let d = r * intr.ray(u as f64, v as f64);
            let hit = cast(spec, scale, tau, &o, &d, true)
                .ok_or_else(|| Error::Infeasible(format!("frame {t} pixel ({u}, {v}) sees no surface")))?;
            let i = image.index(u, v);
            image[i] = hit.color;
            depth[i] = hit.depth;
            world[i] = hit.point;
            object[i] = hit.dynamic;
            static_image[i] = if hit.dynamic.is_some() {
                cast(spec, scale, tau, &o, &d, false).map(|b| b.color).unwrap_or([0.0; 3])
            } else {
                hit.color
            };
        }
    }
    Ok(FrameRender {
        image,
        static_image,
        depth,
        world,
        object,
    })
}

fn coverage_at(spec: &SceneSpec, scale: f64, poses: &[Pose]) -> f64 {
    let intr = spec.intrinsics();
    let total: usize = (0..spec.num_frames)
        .into_par_iter()
        .map(|t| {
            let tau = spec.tau(t);
            let r = poses[t].rotation_matrix();
            let mut n = 0;
            for v in 0..spec.height {
                for u in 0..spec.width {
                    let d = r * intr.ray(u as f64, v as f64);
                    if cast(spec, scale, tau, &poses[t].translation, &d, true).is_some_and(|h| h.dynamic.is_some()) {
                        n += 1;
                    }
                }
            }
            n
        })
        .sum();
    total as f64 / (spec.num_frames * spec.width * spec.height) as f64
}

fn calibrate_scale(spec: &SceneSpec, poses: &[Pose]) -> Result<f64> {
    let Some(target) = spec.coverage else { return Ok(1.0) };
    if target == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while coverage_at(spec, hi, poses) < target {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Infeasible(format!("dynamic coverage {target} cannot be reached")));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if coverage_at(spec, mid, poses) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Image>,
    /// Every frame rendered with the dynamic objects removed.
    pub static_frames: Vec<Image>,
    pub poses: Vec<Pose>,
    pub depths: Vec<DepthMap>,
    /// Exact dynamic masks.
    pub masks: Vec<FrameMask>,
    pub graph: FrameGraph,
    /// Edge-ordered; masks carry any configured corruption.
    pub pairs: Vec<PairPrediction>,
    pub flows: WindowSet,
    /// Size multiplier applied to the dynamic objects.
    pub object_scale: f64,
    pub coverage: f64,
}

impl SyntheticDataset {
    pub fn align_problem(&self) -> Result<AlignProblem> {
        AlignProblem::new(self.graph.clone(), self.pairs.clone())
    }

    /// Alignment state at ground truth with unit edge scales.
    pub fn gt_state(&self) -> Result<AlignState> {
        AlignState::from_parts(&self.poses, &self.depths, &self.intrinsics, self.graph.num_edges())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let intr = spec.intrinsics();
    let poses: Vec<Pose> = (0..spec.num_frames).map(|t| spec.camera.pose(spec.tau(t))).collect();
    let scale = calibrate_scale(spec, &poses)?;
    let renders: Vec<FrameRender> = (0..spec.num_frames)
        .into_par_iter()
        .map(|t| render_frame(spec, scale, t, &poses[t]))
        .collect::<Result<_>>()?;

    let masks: Vec<FrameMask> = renders
        .iter()
        .map(|r| FrameMask(r.object.map(|o| if o.is_some() { 1.0 } else { 0.0 })))
        .collect();
    let coverage = masks.iter().map(|m| m.0.iter().sum::<f64>()).sum::<f64>()
        / (spec.num_frames * spec.width * spec.height) as f64;
    let noisy_masks = corrupt_masks(&masks, spec.mask_fp_rate, spec.mask_fn_rate, spec.seed ^ 0xc0_22_07)?;

    let depths: Vec<DepthMap> = renders
        .iter()
        .map(|r| DepthMap::new(r.depth.clone()))
        .collect::<Result<_>>()?;
    let cams: Vec<Grid<V3>> = depths
        .iter()
        .map(|d| Grid::from_fn(spec.width, spec.height, |u, v| *d.values().get(u, v) * intr.ray(u as f64, v as f64)))
        .collect();

    let graph = build_graph(spec.num_frames, &spec.strides)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.pointmap_noise.max(f64::MIN_POSITIVE)).expect("valid std-dev");
    let mut jitter = |p: V3| {
        if spec.pointmap_noise == 0.0 {
            p
        } else {
            p + V3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
        }
    };
    let mut pairs = Vec::with_capacity(graph.num_edges());
    for &(n, m) in graph.edges() {
        let to_n = poses[n].relative_from(&poses[m]);
        let x_nn = cams[n].map(|p| *p);
        let x_mn = cams[m].map(|p| to_n.transform_point(p));
        let x_nn = x_nn.map(|p| jitter(*p));
        let x_mn = x_mn.map(|p| jitter(*p));
        pairs.push(PairPrediction {
            x_nn,
            x_mn,
            c_nn: Grid::filled(spec.width, spec.height, 1.0),
            c_mn: Grid::filled(spec.width, spec.height, 1.0),
            mask: PairMask::new((n, m), noisy_masks[n].0.clone())?,
        });
    }

    let flows = graph
        .edges()
        .iter()
        .map(|&(a, b)| ((a, b), gt_flow(spec, &renders[a], a, b, &poses[b])))
        .collect();
    let flows = WindowSet::from_pairs(flows, spec.window)?;

    Ok(SyntheticDataset {
        spec: spec.clone(),
        intrinsics: intr,
        frames: renders.iter().map(|r| r.image.clone()).collect(),
        static_frames: renders.iter().map(|r| r.static_image.clone()).collect(),
        poses,
        depths,
        masks,
        graph,
        pairs,
        flows,
        object_scale: scale,
        coverage,
    })
}

/// True optical flow: every surface point follows its own motion.
fn gt_flow(spec: &SceneSpec, src: &FrameRender, t: usize, t2: usize, pose2: &Pose) -> FlowField {
    let intr = spec.intrinsics();
    let inv = pose2.inverse();
    let (tau, tau2) = (spec.tau(t), spec.tau(t2));
    let mut out = FlowField {
        flow: Grid::filled(spec.width, spec.height, Vector2::zeros()),
        valid: Grid::filled(spec.width, spec.height, false),
    };
    for (i, (p, obj)) in src.world.iter().zip(src.object.iter()).enumerate() {
        let moved = match obj {
            Some(k) => {
                let m = &spec.dynamic[*k].motion;
                p + m.offset(tau2) - m.offset(tau)
            }
            None => *p,
        };
        let c = inv.transform_point(&moved);
        if c.z <= 0.0 {
            continue;
        }
        let px = intr.project(&c);
        if !intr.contains(&px) {
            continue;
        }
        let (u, v) = ((i % spec.width) as f64, (i / spec.width) as f64);
        out.flow[i] = px - Vector2::new(u, v);
        out.valid[i] = true;
    }
    out
}

/// Flips whole 8×8 blocks: `round(fp_rate·B)` blocks become dynamic and
/// `round(fn_rate·B)` blocks become static, out of `B` blocks per frame.
/// One block pattern is drawn per call and shared by all masks.
pub fn corrupt_masks(masks: &[FrameMask], fp_rate: f64, fn_rate: f64, seed: u64) -> Result<Vec<FrameMask>> {
    for (name, r) in [("fp_rate", fp_rate), ("fn_rate", fn_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidInput(format!("{name} must lie in [0, 1], got {r}")));
        }
    }
    let Some(first) = masks.first() else { return Ok(Vec::new()) };
    let (w, h) = first.shape();
    let (bx, by) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let nb = bx * by;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |rate: f64| {
        let mut ids: Vec<usize> = (0..nb).collect();
        ids.shuffle(&mut rng);
        let mut chosen = vec![false; nb];
        for &i in &ids[..((rate * nb as f64).round() as usize).min(nb)] {
            chosen[i] = true;
        }
        chosen
    };
    let fp = pick(fp_rate);
    let fn_ = pick(fn_rate);
    masks
        .iter()
        .map(|m| {
            if m.shape() != (w, h) {
                return Err(Error::ShapeMismatch {
                    expected: (w, h),
                    got: m.shape(),
                });
            }
            Ok(FrameMask(Grid::from_fn(w, h, |u, v| {
                let b = (v / BLOCK) * bx + u / BLOCK;
                let x = *m.0.get(u, v);
                if fp[b] {
                    1.0
                } else if fn_[b] {
                    0.0
                } else {
                    x
                }
            })))
        })
        .collect()
}
