//! Rigid poses, pinhole projection, depth/pointmap conversion and induced flow.
//!
//! Poses are camera-to-world: a camera-frame point `x` maps to `R·x + T` in
//! world coordinates. Pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Raw quaternion in `[w, x, y, z]` order. Need not be normalized.
pub type RawQuat = [f64; 4];

/// Rotation matrix of `q / |q|`, written as the homogeneous quadratic form
/// divided by `|q|²` so it is differentiable in all four raw components.
pub fn quat_to_matrix(q: &RawQuat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    let n = w * w + x * x + y * y + z * z;
    let h = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    h / n
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the raw quaternion.
pub fn quat_matrix_backward(q: &RawQuat, d_rot: &Matrix3<f64>) -> RawQuat {
    let [w, x, y, z] = *q;
    let n = w * w + x * x + y * y + z * z;
    let h = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    let dh_dw = Matrix3::new(w, -z, y, z, w, -x, -y, x, w) * 2.0;
    let dh_dx = Matrix3::new(x, y, z, y, -x, -w, z, w, -x) * 2.0;
    let dh_dy = Matrix3::new(-y, x, w, x, y, z, -w, z, -y) * 2.0;
    let dh_dz = Matrix3::new(-z, -w, x, w, -z, y, x, y, z) * 2.0;
    let gh = d_rot.component_mul(&h).sum();
    let mut out = [0.0; 4];
    for (i, dh) in [dh_dw, dh_dx, dh_dy, dh_dz].iter().enumerate() {
        out[i] = d_rot.component_mul(dh).sum() / n - 2.0 * q[i] * gh / (n * n);
    }
    out
}

pub fn normalize_quat(q: &mut RawQuat) {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    for c in q.iter_mut() {
        *c /= n;
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw `[w, x, y, z]` quaternion, normalizing it.
    pub fn from_raw(q: RawQuat, translation: Vector3<f64>) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_scaled_axis(axis_angle),
            translation,
        }
    }

    pub fn raw_quat(&self) -> RawQuat {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.raw_quat())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation_matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        let r_inv = quat_to_matrix(&{
            let q = rotation.quaternion();
            [q.w, q.i, q.j, q.k]
        });
        Pose {
            rotation,
            translation: -(r_inv * self.translation),
        }
    }

    /// Transform taking frame-`other` camera coordinates into this camera's
    /// coordinates (`self⁻¹ ∘ other`).
    pub fn relative_from(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Rotation angle of `self⁻¹ ∘ other`, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn renormalize(&mut self) {
        self.rotation.renormalize();
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn with_focal(&self, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            ..*self
        }
    }

    /// Viewing ray through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// True if the pixel position falls on the image (pixel-area convention).
    #[inline]
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= -0.5
            && px.y >= -0.5
            && px.x < self.width as f64 - 0.5
            && px.y < self.height as f64 - 0.5
    }
}

/// H×W grid of strictly positive, finite z-depths.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if let Some((u, v, d)) = values.indexed().find(|(_, _, d)| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "depth at ({u}, {v}) is {d}; depths must be positive and finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Grid<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordFrame {
    Camera(usize),
    World,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    pub points: Grid<Vector3<f64>>,
    pub frame: CoordFrame,
}

impl Pointmap {
    pub fn shape(&self) -> (usize, usize) {
        self.points.shape()
    }
}

/// Per-pixel displacement in pixels plus a validity bit.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

impl FlowField {
    pub fn shape(&self) -> (usize, usize) {
        self.flow.shape()
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            flow: Grid::filled(width, height, Vector2::zeros()),
            valid: Grid::filled(width, height, true),
        }
    }
}

pub fn depth_to_pointmap(depth: &DepthMap, intr: &Intrinsics, frame: usize) -> Result<Pointmap> {
    let (w, h) = depth.shape();
    if (w, h) != (intr.width, intr.height) {
        return Err(Error::ShapeMismatch {
            expected: (intr.width, intr.height),
            got: (w, h),
        });
    }
    let d = depth.values();
    Ok(Pointmap {
        points: Grid::from_fn(w, h, |u, v| *d.get(u, v) * intr.ray(u as f64, v as f64)),
        frame: CoordFrame::Camera(frame),
    })
}

/// Maps a camera-frame pointmap into world coordinates with `pose`.
pub fn transform_pointmap(pose: &Pose, pm: &Pointmap) -> Result<Pointmap> {
    if pm.frame == CoordFrame::World {
        return Err(Error::InvalidInput(
            "pointmap is already in world coordinates".into(),
        ));
    }
    let r = pose.rotation_matrix();
    let t = pose.translation;
    Ok(Pointmap {
        points: pm.points.map(|p| r * p + t),
        frame: CoordFrame::World,
    })
}

/// Applies a rigid transform to every point regardless of frame tag.
pub fn apply_pose(pose: &Pose, points: &Grid<Vector3<f64>>) -> Grid<Vector3<f64>> {
    let r = pose.rotation_matrix();
    let t = pose.translation;
    points.map(|p| r * p + t)
}

/// Flow of frame-`t` pixels into frame `t2` implied by depth and camera motion.
pub fn induced_flow(
    depth_t: &DepthMap,
    pose_t: &Pose,
    pose_t2: &Pose,
    intr: &Intrinsics,
) -> FlowField {
    let rel = pose_t2.relative_from(pose_t);
    let r = rel.rotation_matrix();
    let tr = rel.translation;
    let (w, h) = depth_t.shape();
    let d = depth_t.values();
    let mut flow = Grid::filled(w, h, Vector2::zeros());
    let mut valid = Grid::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            let x = *d.get(u, v) * intr.ray(u as f64, v as f64);
            let z = r * x + tr;
            if z.z <= 0.0 {
                continue;
            }
            let px = intr.project(&z);
            if !intr.contains(&px) {
                continue;
            }
            *flow.get_mut(u, v) = px - Vector2::new(u as f64, v as f64);
            *valid.get_mut(u, v) = true;
        }
    }
    FlowField { flow, valid }
}

/// Similarity `dst ≈ s·R·src + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form least-squares similarity (or rigid, if `with_scale` is false)
/// aligning `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "point-set alignment needs two equal sets of at least 3 points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        cov += (d - mu_d) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return Err(Error::InvalidInput("degenerate source point set".into()));
        }
        let sv = svd.singular_values;
        (sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation * mu_s;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let aa = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::from_axis_angle(aa, t)
    }

    #[test]
    fn homogeneous_matrix_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let ours = p.rotation_matrix();
            let theirs = p.rotation.to_rotation_matrix().into_inner();
            assert_relative_eq!(ours, theirs, epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = [0.9, 0.2, -0.3, 0.1];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.7, -0.4, 1.1, 0.0, -0.6);
        let analytic = quat_matrix_backward(&q, &g);
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += 1e-6;
            qm[i] -= 1e-6;
            let fd = (quat_to_matrix(&qp).component_mul(&g).sum()
                - quat_to_matrix(&qm).component_mul(&g).sum())
                / 2e-6;
            assert_relative_eq!(analytic[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let id = p.compose(&p.inverse());
            assert!(id.translation.norm() < 1e-9);
            assert!(id.rotation.angle() < 1e-9);
            assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn principal_ray_backprojection() {
        let intr = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 2, 2).unwrap();
        let d = DepthMap::new(Grid::filled(2, 2, 1.0)).unwrap();
        let pm = depth_to_pointmap(&d, &intr, 0).unwrap();
        assert_eq!(*pm.points.get(0, 0), Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn forty_five_degree_ray() {
        let intr = Intrinsics::new(2.0, 2.0, 1.0, 1.0, 4, 4).unwrap();
        let d = DepthMap::new(Grid::filled(4, 4, 2.0)).unwrap();
        let pm = depth_to_pointmap(&d, &intr, 0).unwrap();
        // u = cx + fx, v = cy
        assert_relative_eq!(*pm.points.get(3, 1), Vector3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn projection_round_trip_on_random_depths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let intr = Intrinsics::centered(37.5, 17, 11).unwrap();
        let d = Grid::from_fn(17, 11, |_, _| rng.random_range(0.1..50.0));
        let pm = depth_to_pointmap(&DepthMap::new(d).unwrap(), &intr, 0).unwrap();
        for (u, v, p) in pm.points.indexed() {
            let px = intr.project(p);
            assert!((px.x - u as f64).abs() < 1e-6 && (px.y - v as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_positive_depth() {
        let mut g = Grid::filled(3, 3, 1.0);
        g[4] = 0.0;
        assert!(DepthMap::new(g.clone()).is_err());
        g[4] = f64::NAN;
        assert!(DepthMap::new(g).is_err());
    }

    #[test]
    fn transform_identity_and_translation() {
        let pm = Pointmap {
            points: Grid::from_fn(3, 2, |u, v| Vector3::new(u as f64, v as f64, 1.5)),
            frame: CoordFrame::Camera(0),
        };
        let same = transform_pointmap(&Pose::identity(), &pm).unwrap();
        assert_eq!(same.points, pm.points);
        let shifted =
            transform_pointmap(&Pose::new(UnitQuaternion::identity(), Vector3::x()), &pm).unwrap();
        for (a, b) in shifted.points.iter().zip(pm.points.iter()) {
            assert_eq!(a.x, b.x + 1.0);
            assert_eq!((a.y, a.z), (b.y, b.z));
        }
    }

    #[test]
    fn transform_inverse_round_trip_and_rigidity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let pm = Pointmap {
            points: Grid::from_fn(5, 4, |_, _| {
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..4.0))
            }),
            frame: CoordFrame::Camera(0),
        };
        let world = transform_pointmap(&pose, &pm).unwrap();
        let back = apply_pose(&pose.inverse(), &world.points);
        for (a, b) in back.iter().zip(pm.points.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
        let pts = pm.points.as_slice();
        let wp = world.points.as_slice();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert!(((pts[i] - pts[j]).norm() - (wp[i] - wp[j]).norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn static_camera_has_zero_flow() {
        let intr = Intrinsics::centered(20.0, 8, 6).unwrap();
        let d = DepthMap::new(Grid::from_fn(8, 6, |u, v| 1.0 + (u + v) as f64 * 0.1)).unwrap();
        let p = Pose::from_axis_angle(Vector3::new(0.1, 0.2, 0.0), Vector3::new(0.3, 0.0, 0.1));
        let f = induced_flow(&d, &p, &p, &intr);
        assert!(f.valid.iter().all(|&b| b));
        assert!(f.flow.iter().all(|x| x.norm() < 1e-12));
    }

    #[test]
    fn fronto_parallel_translation_flow() {
        // Plane at depth Z, camera translated by tx: every pixel moves by -fx·tx/Z.
        let (z, tx) = (4.0, 0.1);
        let intr = Intrinsics::centered(30.0, 16, 12).unwrap();
        let d = DepthMap::new(Grid::filled(16, 12, z)).unwrap();
        let p2 = Pose::new(UnitQuaternion::identity(), Vector3::new(tx, 0.0, 0.0));
        let f = induced_flow(&d, &Pose::identity(), &p2, &intr);
        let expected = -intr.fx * tx / z;
        for (fl, ok) in f.flow.iter().zip(f.valid.iter()) {
            if *ok {
                assert_relative_eq!(fl.x, expected, epsilon = 1e-12);
                assert_relative_eq!(fl.y, 0.0, epsilon = 1e-12);
            }
        }
        // leftmost column shifts off-image
        assert!(!*f.valid.get(0, 0));
        assert!(*f.valid.get(8, 6));
    }

    #[test]
    fn umeyama_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng);
        let s = 1.7;
        let src: Vec<_> = (0..30)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let dst: Vec<_> = src.iter().map(|p| s * (pose.rotation_matrix() * p) + pose.translation).collect();
        let sim = umeyama(&src, &dst, true).unwrap();
        assert_relative_eq!(sim.scale, s, epsilon = 1e-9);
        assert_relative_eq!(sim.rotation, pose.rotation_matrix(), epsilon = 1e-9);
        assert_relative_eq!(sim.translation, pose.translation, epsilon = 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn back_projection_round_trips(depth in 0.05f64..100.0, u in 0usize..17, v in 0usize..11, focal in 5.0f64..80.0) {
            let intr = Intrinsics::centered(focal, 17, 11).unwrap();
            let d = DepthMap::new(Grid::filled(17, 11, depth)).unwrap();
            let pm = depth_to_pointmap(&d, &intr, 0).unwrap();
            let px = intr.project(pm.points.get(u, v));
            proptest::prop_assert!((px.x - u as f64).abs() < 1e-6 && (px.y - v as f64).abs() < 1e-6);
        }

        #[test]
        fn identity_relative_pose_induces_no_flow(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_pose(&mut rng);
            let intr = Intrinsics::centered(12.0, 6, 5).unwrap();
            let d = DepthMap::new(Grid::from_fn(6, 5, |_, _| rng.random_range(0.5..5.0))).unwrap();
            let f = induced_flow(&d, &p, &p, &intr);
            proptest::prop_assert!(f.flow.iter().zip(f.valid.iter()).all(|(x, &ok)| !ok || x.norm() < 1e-9));
        }

        #[test]
        fn transforms_preserve_distances(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&mut rng);
            let a = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let b = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let moved = (pose.transform_point(&a) - pose.transform_point(&b)).norm();
            proptest::prop_assert!((moved - (a - b).norm()).abs() < 1e-9);
        }
    }
}
