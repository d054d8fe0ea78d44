//! Tile-binned forward and backward rasterization.
//!
//! Everything runs in `f64`. Gaussians are sorted once per image by camera
//! depth with the index as tie-break; each 16×16 tile walks its own sorted
//! list, so per-pixel blending order is independent of storage order.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{sigmoid, GaussianCloud};
use crate::geometry::{quat_matrix_backward, quat_to_matrix, Intrinsics, Pose, RawQuat};
use crate::grid::{Grid, Image};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV_REGULARIZER: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// Opacity alone.
    Plain,
    /// Opacity multiplied by staticness in both weight and transmittance.
    Staticness,
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vector2<f64>,
    /// Regularized 2D covariance in px².
    pub cov: Matrix2<f64>,
    pub depth: f64,
    cam: Vector3<f64>,
    conic: Matrix2<f64>,
    jac: Matrix2x3<f64>,
    sigma3: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    bbox: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    /// Transmittance left after the last contributing sample.
    pub transmittance: Grid<f64>,
}

fn project_with(
    g: &super::Gaussian,
    w: &Matrix3<f64>,
    t: &Vector3<f64>,
    intr: &Intrinsics,
) -> Option<Projection> {
    let cam = w * (g.mu - t);
    if cam.z <= NEAR_PLANE {
        return None;
    }
    let (fx, fy) = (intr.fx, intr.fy);
    let iz = 1.0 / cam.z;
    let jac = Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * cam.x * iz * iz,
        0.0,
        fy * iz,
        -fy * cam.y * iz * iz,
    );
    let rot = quat_to_matrix(&g.rotation);
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma3 = m * m.transpose();
    let tm = jac * w;
    let cov = tm * sigma3 * tm.transpose() + Matrix2::identity() * COV_REGULARIZER;
    let conic = cov.try_inverse()?;
    let mean = Vector2::new(fx * cam.x * iz + intr.cx, fy * cam.y * iz + intr.cy);
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let r = (3.0 * lambda.sqrt()).ceil();
    let x0 = (mean.x - r).floor().max(0.0);
    let y0 = (mean.y - r).floor().max(0.0);
    let x1 = (mean.x + r).ceil().min(intr.width as f64 - 1.0);
    let y1 = (mean.y + r).ceil().min(intr.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(Projection {
        mean,
        cov,
        depth: cam.z,
        cam,
        conic,
        jac,
        sigma3,
        rot,
        scale,
        bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
    })
}

/// Perspective projection of one Gaussian. `None` if it is behind the near
/// plane or its 3σ footprint misses the image.
pub fn project_gaussian(g: &super::Gaussian, pose: &Pose, intr: &Intrinsics) -> Option<Projection> {
    let w = pose.rotation_matrix().transpose();
    project_with(g, &w, &pose.translation, intr)
}

fn effective_opacity(g: &super::Gaussian, mode: RenderMode) -> f64 {
    match mode {
        RenderMode::Plain => sigmoid(g.opacity_logit),
        RenderMode::Staticness => sigmoid(g.staticness_logit) * sigmoid(g.opacity_logit),
    }
}

#[inline]
fn gaussian_weight(conic: &Matrix2<f64>, dx: f64, dy: f64) -> f64 {
    let power = -0.5 * (conic[(0, 0)] * dx * dx + conic[(1, 1)] * dy * dy) - conic[(0, 1)] * dx * dy;
    power.min(0.0).exp()
}

/// Forward pass plus the bookkeeping needed by [`Rasterization::backward`].
#[derive(Clone, Debug)]
pub struct Rasterization {
    pub output: RenderedImage,
    pub projections: Vec<Option<Projection>>,
    opacities: Vec<f64>,
    tiles: Vec<Vec<u32>>,
    last: Vec<u32>,
    mode: RenderMode,
    width: usize,
    height: usize,
}

struct TileRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl TileRect {
    fn new(tile: usize, width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE);
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        Self {
            x0: tx * TILE,
            y0: ty * TILE,
            x1: ((tx + 1) * TILE).min(width) - 1,
            y1: ((ty + 1) * TILE).min(height) - 1,
        }
    }

    fn local(&self, u: usize, v: usize) -> usize {
        (v - self.y0) * TILE + (u - self.x0)
    }

    /// Intersection with a bbox, inclusive bounds.
    fn clip(&self, b: &[usize; 4]) -> Option<(usize, usize, usize, usize)> {
        let (x0, y0) = (b[0].max(self.x0), b[1].max(self.y0));
        let (x1, y1) = (b[2].min(self.x1), b[3].min(self.y1));
        (x0 <= x1 && y0 <= y1).then_some((x0, y0, x1, y1))
    }
}

/// Renders `cloud` from `pose` and keeps the state needed for gradients.
pub fn rasterize(cloud: &GaussianCloud, pose: &Pose, intr: &Intrinsics, mode: RenderMode) -> Rasterization {
    let (width, height) = (intr.width, intr.height);
    let w = pose.rotation_matrix().transpose();
    let projections: Vec<Option<Projection>> = cloud
        .gaussians
        .par_iter()
        .map(|g| project_with(g, &w, &pose.translation, intr))
        .collect();
    let opacities: Vec<f64> = cloud.gaussians.iter().map(|g| effective_opacity(g, mode)).collect();

    let mut order: Vec<u32> = (0..cloud.len() as u32)
        .filter(|&i| projections[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (
            projections[a as usize].as_ref().unwrap().depth,
            projections[b as usize].as_ref().unwrap().depth,
        );
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let (tiles_x, tiles_y) = (width.div_ceil(TILE), height.div_ceil(TILE));
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let b = projections[i as usize].as_ref().unwrap().bbox;
        for ty in b[1] / TILE..=b[3] / TILE {
            for tx in b[0] / TILE..=b[2] / TILE {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }

    let tile_out: Vec<(Vec<[f64; 3]>, Vec<f64>, Vec<u32>)> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let rect = TileRect::new(ti, width, height);
            let mut color = vec![[0.0; 3]; TILE * TILE];
            let mut trans = vec![1.0; TILE * TILE];
            let mut last = vec![0u32; TILE * TILE];
            let mut done = vec![false; TILE * TILE];
            let mut remaining = (rect.x1 - rect.x0 + 1) * (rect.y1 - rect.y0 + 1);
            for (pos, &gi) in list.iter().enumerate() {
                if remaining == 0 {
                    break;
                }
                let p = projections[gi as usize].as_ref().unwrap();
                let Some((x0, y0, x1, y1)) = rect.clip(&p.bbox) else { continue };
                let e = opacities[gi as usize];
                let c = cloud.gaussians[gi as usize].color;
                for v in y0..=y1 {
                    for u in x0..=x1 {
                        let l = rect.local(u, v);
                        if done[l] {
                            continue;
                        }
                        let gw = gaussian_weight(&p.conic, u as f64 - p.mean.x, v as f64 - p.mean.y);
                        let a = (e * gw).min(ALPHA_MAX);
                        let t = trans[l];
                        for ch in 0..3 {
                            color[l][ch] += c[ch] * a * t;
                        }
                        trans[l] = t * (1.0 - a);
                        last[l] = pos as u32 + 1;
                        if trans[l] < TRANSMITTANCE_MIN {
                            done[l] = true;
                            remaining -= 1;
                        }
                    }
                }
            }
            (color, trans, last)
        })
        .collect();

    let mut image = Grid::filled(width, height, [0.0; 3]);
    let mut transmittance = Grid::filled(width, height, 1.0);
    let mut last = vec![0u32; width * height];
    for (ti, (color, trans, tl)) in tile_out.into_iter().enumerate() {
        let rect = TileRect::new(ti, width, height);
        for v in rect.y0..=rect.y1 {
            for u in rect.x0..=rect.x1 {
                let l = rect.local(u, v);
                let idx = v * width + u;
                image[idx] = color[l];
                transmittance[idx] = trans[l];
                last[idx] = tl[l];
            }
        }
    }

    Rasterization {
        output: RenderedImage {
            image,
            transmittance,
        },
        projections,
        opacities,
        tiles,
        last,
        mode,
        width,
        height,
    }
}

pub fn render(cloud: &GaussianCloud, pose: &Pose, intr: &Intrinsics, mode: RenderMode) -> RenderedImage {
    rasterize(cloud, pose, intr, mode).output
}

/// Gradients of a scalar loss with respect to every cloud parameter and the
/// camera pose (raw quaternion and translation).
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrad {
    pub mu: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<RawQuat>,
    pub color: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub staticness_logit: Vec<f64>,
    pub pose_rotation: RawQuat,
    pub pose_translation: Vector3<f64>,
}

impl CloudGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            color: vec![[0.0; 3]; n],
            opacity_logit: vec![0.0; n],
            staticness_logit: vec![0.0; n],
            pose_rotation: [0.0; 4],
            pose_translation: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct GaussianGrad {
    mu: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: RawQuat,
    opacity_logit: f64,
    staticness_logit: f64,
    d_w: Matrix3<f64>,
    d_t: Vector3<f64>,
}

impl Rasterization {
    fn tile_backward(&self, ti: usize, cloud: &GaussianCloud, upstream: &Image) -> Vec<ScreenGrad> {
        let list = &self.tiles[ti];
        let rect = TileRect::new(ti, self.width, self.height);
        let mut grads = vec![ScreenGrad::default(); list.len()];
        let mut trans = vec![0.0; TILE * TILE];
        let mut behind = vec![[0.0; 3]; TILE * TILE];
        let mut last_local = vec![0u32; TILE * TILE];
        let mut max_last = 0;
        for v in rect.y0..=rect.y1 {
            for u in rect.x0..=rect.x1 {
                let l = rect.local(u, v);
                let idx = v * self.width + u;
                trans[l] = self.output.transmittance[idx];
                last_local[l] = self.last[idx];
                max_last = max_last.max(self.last[idx]);
            }
        }
        for pos in (0..max_last as usize).rev() {
            let gi = list[pos] as usize;
            let p = self.projections[gi].as_ref().unwrap();
            let Some((x0, y0, x1, y1)) = rect.clip(&p.bbox) else { continue };
            let e = self.opacities[gi];
            let c = cloud.gaussians[gi].color;
            let sg = &mut grads[pos];
            for v in y0..=y1 {
                for u in x0..=x1 {
                    let l = rect.local(u, v);
                    if pos as u32 >= last_local[l] {
                        continue;
                    }
                    let (dx, dy) = (u as f64 - p.mean.x, v as f64 - p.mean.y);
                    let gw = gaussian_weight(&p.conic, dx, dy);
                    let raw = e * gw;
                    let a = raw.min(ALPHA_MAX);
                    let t = trans[l] / (1.0 - a);
                    let g = upstream[v * self.width + u];
                    let mut d_a = 0.0;
                    for ch in 0..3 {
                        sg.color[ch] += g[ch] * a * t;
                        d_a += g[ch] * (c[ch] * t - behind[l][ch] / (1.0 - a));
                        behind[l][ch] += c[ch] * a * t;
                    }
                    trans[l] = t;
                    if raw < ALPHA_MAX {
                        sg.opacity += d_a * gw;
                        let d_g = d_a * e * gw;
                        let q = &p.conic;
                        sg.mean += d_g * Vector2::new(q[(0, 0)] * dx + q[(0, 1)] * dy, q[(0, 1)] * dx + q[(1, 1)] * dy);
                        sg.conic[0] -= 0.5 * d_g * dx * dx;
                        sg.conic[1] -= d_g * dx * dy;
                        sg.conic[2] -= 0.5 * d_g * dy * dy;
                    }
                }
            }
        }
        grads
    }

    fn chain_gaussian(
        &self,
        gi: usize,
        sg: &ScreenGrad,
        cloud: &GaussianCloud,
        w: &Matrix3<f64>,
        t: &Vector3<f64>,
        intr: &Intrinsics,
    ) -> GaussianGrad {
        let g = &cloud.gaussians[gi];
        let p = self.projections[gi].as_ref().unwrap();
        let q = &p.conic;
        let g_q = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
        let g_cov = -(q * g_q * q);
        let tm = p.jac * w;
        let g_tm = 2.0 * g_cov * tm * p.sigma3;
        let g_sigma3 = tm.transpose() * g_cov * tm;
        let g_m = 2.0 * g_sigma3 * p.rot * Matrix3::from_diagonal(&p.scale);
        let g_rot = g_m * Matrix3::from_diagonal(&p.scale);
        let mut log_scale = Vector3::zeros();
        for k in 0..3 {
            log_scale[k] = p.scale[k] * (0..3).map(|i| g_m[(i, k)] * p.rot[(i, k)]).sum::<f64>();
        }
        let g_jac = g_tm * w.transpose();
        let mut d_w = p.jac.transpose() * g_tm;

        let (fx, fy) = (intr.fx, intr.fy);
        let c = p.cam;
        let iz = 1.0 / c.z;
        let iz2 = iz * iz;
        let mut d_cam = p.jac.transpose() * sg.mean;
        d_cam.x -= g_jac[(0, 2)] * fx * iz2;
        d_cam.y -= g_jac[(1, 2)] * fy * iz2;
        d_cam.z += -g_jac[(0, 0)] * fx * iz2 + 2.0 * g_jac[(0, 2)] * fx * c.x * iz2 * iz
            - g_jac[(1, 1)] * fy * iz2
            + 2.0 * g_jac[(1, 2)] * fy * c.y * iz2 * iz;

        let rel = g.mu - t;
        let mu = w.transpose() * d_cam;
        d_w += d_cam * rel.transpose();

        let (opacity_logit, staticness_logit) = {
            let alpha = sigmoid(g.opacity_logit);
            let da = alpha * (1.0 - alpha);
            match self.mode {
                RenderMode::Plain => (sg.opacity * da, 0.0),
                RenderMode::Staticness => {
                    let s = sigmoid(g.staticness_logit);
                    (sg.opacity * s * da, sg.opacity * alpha * s * (1.0 - s))
                }
            }
        };
        GaussianGrad {
            mu,
            log_scale,
            rotation: quat_matrix_backward(&g.rotation, &g_rot),
            opacity_logit,
            staticness_logit,
            d_w,
            d_t: -mu,
        }
    }

    /// Gradients given `upstream` = dLoss/dPixel for every channel.
    pub fn backward(&self, cloud: &GaussianCloud, pose: &Pose, intr: &Intrinsics, upstream: &Image) -> CloudGrad {
        assert_eq!(upstream.shape(), (self.width, self.height), "upstream gradient shape");
        let n = cloud.len();
        let tile_grads: Vec<Vec<ScreenGrad>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|ti| self.tile_backward(ti, cloud, upstream))
            .collect();
        let mut screen = vec![ScreenGrad::default(); n];
        let mut touched = vec![false; n];
        for (list, grads) in self.tiles.iter().zip(&tile_grads) {
            for (&gi, sg) in list.iter().zip(grads) {
                screen[gi as usize].add(sg);
                touched[gi as usize] = true;
            }
        }

        let w = pose.rotation_matrix().transpose();
        let t = pose.translation;
        let per: Vec<Option<GaussianGrad>> = (0..n)
            .into_par_iter()
            .map(|gi| touched[gi].then(|| self.chain_gaussian(gi, &screen[gi], cloud, &w, &t, intr)))
            .collect();

        let mut out = CloudGrad::zeros(n);
        let mut d_w = Matrix3::zeros();
        for (gi, g) in per.into_iter().enumerate() {
            out.color[gi] = screen[gi].color;
            if let Some(g) = g {
                out.mu[gi] = g.mu;
                out.log_scale[gi] = g.log_scale;
                out.rotation[gi] = g.rotation;
                out.opacity_logit[gi] = g.opacity_logit;
                out.staticness_logit[gi] = g.staticness_logit;
                d_w += g.d_w;
                out.pose_translation += g.d_t;
            }
        }
        out.pose_rotation = quat_matrix_backward(&pose.raw_quat(), &d_w.transpose());
        out
    }
}

/// Forward render followed by the backward pass for `upstream`.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &Pose,
    intr: &Intrinsics,
    mode: RenderMode,
    upstream: &Image,
) -> CloudGrad {
    rasterize(cloud, pose, intr, mode).backward(cloud, pose, intr, upstream)
}

#[cfg(test)]
mod tests {
    use super::super::Gaussian;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr16() -> Intrinsics {
        Intrinsics::centered(20.0, 16, 16).unwrap()
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let intr = intr16();
        for (z, sigma) in [(2.0, 0.1), (4.0, 0.1), (3.0, 0.05)] {
            let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, z), sigma, [1.0; 3], 0.5);
            let p = project_gaussian(&g, &Pose::identity(), &intr).unwrap();
            let expected = (intr.fx * sigma / z).powi(2);
            let raw = p.cov - Matrix2::identity() * COV_REGULARIZER;
            assert!((raw - Matrix2::identity() * expected).abs().max() < 1e-6);
        }
    }

    #[test]
    fn doubling_depth_halves_projected_std() {
        let intr = intr16();
        let std_at = |z: f64| {
            let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.2, [1.0; 3], 0.5);
            let p = project_gaussian(&g, &Pose::identity(), &intr).unwrap();
            (p.cov[(0, 0)] - COV_REGULARIZER).sqrt()
        };
        assert!((std_at(2.0) / 2.0 - std_at(4.0)).abs() < 1e-6);
    }

    #[test]
    fn behind_camera_is_culled() {
        let intr = intr16();
        for z in [-1.0, 0.0, 0.005] {
            let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.1, [1.0; 3], 0.5);
            assert!(project_gaussian(&g, &Pose::identity(), &intr).is_none());
        }
    }

    #[test]
    fn opaque_splat_at_its_mean() {
        let intr = intr16();
        let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, [1.0, 0.0, 0.0], 0.5);
        g.opacity_logit = 12.0;
        let cloud = GaussianCloud::new(vec![g]);
        let img = render(&cloud, &Pose::identity(), &Intrinsics { cx: 7.0, cy: 7.0, ..intr }, RenderMode::Staticness);
        let px = img.image.get(7, 7);
        assert!((px[0] - 0.999).abs() < 1e-5 && px[1] == 0.0 && px[2] == 0.0);
    }

    #[test]
    fn empty_cloud_is_black() {
        let img = render(&GaussianCloud::default(), &Pose::identity(), &intr16(), RenderMode::Plain);
        assert!(img.image.iter().all(|p| *p == [0.0; 3]));
        assert!(img.transmittance.iter().all(|t| *t == 1.0));
    }

    pub(crate) fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let gs = (0..n)
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
            .collect();
        GaussianCloud::new(gs)
    }

    #[test]
    fn all_static_equals_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = random_cloud(&mut rng, 40);
        for g in &mut cloud.gaussians {
            g.staticness_logit = f64::INFINITY;
        }
        let a = render(&cloud, &Pose::identity(), &intr16(), RenderMode::Plain);
        let b = render(&cloud, &Pose::identity(), &intr16(), RenderMode::Staticness);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_staticness_is_removal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cloud = random_cloud(&mut rng, 30);
        cloud.gaussians[7].staticness_logit = f64::NEG_INFINITY;
        let with = render(&cloud, &Pose::identity(), &intr16(), RenderMode::Staticness);
        let mut without = cloud.clone();
        without.gaussians.remove(7);
        without.sources.remove(7);
        let without = render(&without, &Pose::identity(), &intr16(), RenderMode::Staticness);
        assert_eq!(with.image, without.image);
    }

    #[test]
    fn storage_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 50);
        let mut rev = cloud.clone();
        rev.gaussians.reverse();
        let a = render(&cloud, &Pose::identity(), &intr16(), RenderMode::Staticness);
        let b = render(&rev, &Pose::identity(), &intr16(), RenderMode::Staticness);
        for (x, y) in a.image.iter().zip(b.image.iter()) {
            for ch in 0..3 {
                assert!((x[ch] - y[ch]).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 5);
        let up = Grid::filled(16, 16, [0.0; 3]);
        let g = render_backward(&cloud, &Pose::identity(), &intr16(), RenderMode::Staticness, &up);
        assert_eq!(g, CloudGrad::zeros(5));
    }

    #[test]
    fn occluded_staticness_gradient_vanishes() {
        let intr = intr16();
        let mut front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 3.0, [1.0, 1.0, 1.0], 0.5);
        front.opacity_logit = 30.0;
        let back = Gaussian {
            staticness_logit: 0.3,
            ..Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.05, [0.2, 0.5, 0.9], 0.8)
        };
        let cloud = GaussianCloud::new(vec![front, front, back]);
        let up = Grid::filled(16, 16, [1.0; 3]);
        let g = render_backward(&cloud, &Pose::identity(), &intr, RenderMode::Staticness, &up);
        assert!(g.staticness_logit[2].abs() < 1e-8);
    }

    #[test]
    fn lower_staticness_never_raises_own_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 12);
        let intr = intr16();
        let mut lowered = cloud.clone();
        lowered.gaussians[4].staticness_logit -= 1.5;
        // under a one-hot upstream the color gradient is the blending weight
        for idx in 0..256 {
            let mut up = Grid::filled(16, 16, [0.0; 3]);
            up[idx] = [1.0, 0.0, 0.0];
            let w = |c: &GaussianCloud| render_backward(c, &Pose::identity(), &intr, RenderMode::Staticness, &up).color[4][0];
            assert!(w(&lowered) <= w(&cloud));
        }
    }

    fn pack(cloud: &GaussianCloud, pose: &Pose) -> Vec<f64> {
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

    fn unpack(x: &[f64], n: usize) -> (GaussianCloud, Pose) {
        let mut gs = Vec::new();
        for i in 0..n {
            let c = &x[i * 15..(i + 1) * 15];
            gs.push(Gaussian {
                mu: Vector3::new(c[0], c[1], c[2]),
                log_scale: Vector3::new(c[3], c[4], c[5]),
                rotation: [c[6], c[7], c[8], c[9]],
                color: [c[10], c[11], c[12]],
                opacity_logit: c[13],
                staticness_logit: c[14],
            });
        }
        let p = &x[n * 15..];
        (GaussianCloud::new(gs), Pose::from_raw([p[0], p[1], p[2], p[3]], Vector3::new(p[4], p[5], p[6])))
    }

    fn pack_grad(g: &CloudGrad) -> Vec<f64> {
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

    /// Worst relative error between analytic and central-difference gradients
    /// of `Σ upstream · image`.
    pub(crate) fn gradient_check(seed: u64, mode: RenderMode) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=5);
        let cloud = random_cloud(&mut rng, n);
        let pose = Pose::from_axis_angle(
            Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
        );
        let intr = intr16();
        let up = Grid::from_fn(16, 16, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let loss = |c: &GaussianCloud, p: &Pose| {
            let img = render(c, p, &intr, mode).image;
            img.iter().zip(up.iter()).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum::<f64>()
        };
        let analytic = pack_grad(&render_backward(&cloud, &pose, &intr, mode, &up));
        let x0 = pack(&cloud, &pose);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x0.len() {
            let mut x = x0.clone();
            x[i] += h;
            let (c, p) = unpack(&x, n);
            let fp = loss(&c, &p);
            x[i] -= 2.0 * h;
            let (c, p) = unpack(&x, n);
            let fm = loss(&c, &p);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        for seed in 0..4 {
            for mode in [RenderMode::Plain, RenderMode::Staticness] {
                let err = gradient_check(seed, mode);
                assert!(err < 1e-4, "seed {seed} {mode:?}: {err}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn any_permutation_renders_the_same(seed in 0u64..200) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 12);
            let mut shuffled = cloud.clone();
            shuffled.gaussians.shuffle(&mut rng);
            let a = render(&cloud, &Pose::identity(), &intr16(), RenderMode::Staticness);
            let b = render(&shuffled, &Pose::identity(), &intr16(), RenderMode::Staticness);
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                for ch in 0..3 {
                    proptest::prop_assert!((x[ch] - y[ch]).abs() <= 1e-7);
                }
            }
        }
    }
}
