//! Python bindings for the staticsplat core.

use std::path::PathBuf;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use staticsplat::geometry as geo;
use staticsplat::masks::FrameMask;
use staticsplat::splat::{self, Gaussian, RenderMode};
use staticsplat::{Error, Grid, Image};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingFile { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::InvalidInput(_) | Error::ShapeMismatch { .. } | Error::Infeasible(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Rows<T> = Vec<Vec<T>>;

fn grid_from_rows<T: Clone>(rows: Rows<T>, what: &str) -> PyResult<Grid<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty rectangular H x W array")));
    }
    Grid::from_vec(w, h, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn grid_to_rows<T: Clone>(g: &Grid<T>) -> Rows<T> {
    g.as_slice().chunks(g.width()).map(<[T]>::to_vec).collect()
}

/// Camera-to-world rigid transform.
#[pyclass(name = "Pose", module = "staticsplat_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyPose(geo::Pose);

#[pymethods]
impl PyPose {
    /// `rotation` is a quaternion `[w, x, y, z]` (normalized on construction).
    #[new]
    #[pyo3(signature = (rotation = [1.0, 0.0, 0.0, 0.0], translation = [0.0, 0.0, 0.0]))]
    fn new(rotation: [f64; 4], translation: [f64; 3]) -> PyResult<Self> {
        let q = Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]);
        if !(q.norm() > 0.0 && q.norm().is_finite()) {
            return Err(PyValueError::new_err("rotation quaternion must be finite and non-zero"));
        }
        Ok(Self(geo::Pose::new(UnitQuaternion::from_quaternion(q), Vector3::from(translation))))
    }

    #[staticmethod]
    fn from_axis_angle(axis_angle: [f64; 3], translation: [f64; 3]) -> Self {
        Self(geo::Pose::from_axis_angle(Vector3::from(axis_angle), Vector3::from(translation)))
    }

    #[getter]
    fn rotation(&self) -> [f64; 4] {
        self.0.raw_quat()
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        let r = self.0.rotation_matrix();
        let t = self.0.translation;
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        m
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(p)).into()
    }

    /// Rotation angle to `other` in radians.
    fn angle_to(&self, other: &PyPose) -> f64 {
        self.0.rotation_angle_to(&other.0)
    }

    fn __repr__(&self) -> String {
        let q = self.0.raw_quat();
        let t = self.0.translation;
        format!("Pose(rotation=[{}, {}, {}, {}], translation=[{}, {}, {}])", q[0], q[1], q[2], q[3], t.x, t.y, t.z)
    }
}

/// Pinhole intrinsics with pixel centers at integer coordinates.
#[pyclass(name = "Intrinsics", module = "staticsplat_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(geo::Intrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    #[pyo3(signature = (fx, width, height, fy = None, cx = None, cy = None))]
    fn new(fx: f64, width: usize, height: usize, fy: Option<f64>, cx: Option<f64>, cy: Option<f64>) -> PyResult<Self> {
        let c = geo::Intrinsics::centered(fx, width, height).map_err(to_py)?;
        geo::Intrinsics::new(fx, fy.unwrap_or(fx), cx.unwrap_or(c.cx), cy.unwrap_or(c.cy), width, height)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.0.fx
    }
    #[getter]
    fn fy(&self) -> f64 {
        self.0.fy
    }
    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }
    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }
    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }
    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    fn project(&self, p: [f64; 3]) -> [f64; 2] {
        self.0.project(&Vector3::from(p)).into()
    }

    /// Unit-depth ray through pixel `(u, v)`.
    fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        self.0.ray(u, v).into()
    }

    fn __repr__(&self) -> String {
        let i = &self.0;
        format!("Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})", i.fx, i.fy, i.cx, i.cy, i.width, i.height)
    }
}

#[pyclass(name = "GaussianCloud", module = "staticsplat_py", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyCloud(splat::GaussianCloud);

#[pymethods]
impl PyCloud {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        splat::read_cloud(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        splat::write_cloud(&path, &self.0).map_err(to_py)
    }

    #[pyo3(signature = (mu, sigma, color, opacity, staticness = 1.0))]
    fn add_isotropic(&mut self, mu: [f64; 3], sigma: f64, color: [f64; 3], opacity: f64, staticness: f64) -> PyResult<()> {
        if !(sigma > 0.0) || !(0.0..=1.0).contains(&opacity) || !(0.0..=1.0).contains(&staticness) {
            return Err(PyValueError::new_err("need sigma > 0 and opacity, staticness in [0, 1]"));
        }
        let mut g = Gaussian::isotropic(Vector3::from(mu), sigma, color, opacity);
        g.staticness_logit = splat::logit(staticness);
        self.0.push(g, None);
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.0.gaussians.iter().map(|g| g.mu.into()).collect()
    }

    fn opacities(&self) -> Vec<f64> {
        self.0.gaussians.iter().map(Gaussian::opacity).collect()
    }

    fn staticness(&self) -> Vec<f64> {
        self.0.gaussians.iter().map(Gaussian::staticness).collect()
    }

    /// Copy without Gaussians whose staticness is below `threshold`.
    #[pyo3(signature = (threshold = 0.5))]
    fn prune_dynamic(&self, threshold: f64) -> Self {
        Self(self.0.prune_dynamic(threshold))
    }

    fn __repr__(&self) -> String {
        format!("GaussianCloud(len={})", self.0.len())
    }
}

fn parse_mode(mode: &str) -> PyResult<RenderMode> {
    match mode {
        "plain" => Ok(RenderMode::Plain),
        "staticness" => Ok(RenderMode::Staticness),
        _ => Err(PyValueError::new_err(format!("mode must be 'plain' or 'staticness', got '{mode}'"))),
    }
}

/// Renders an H x W x 3 nested list.
#[pyfunction]
#[pyo3(signature = (cloud, pose, intrinsics, mode = "staticness"))]
fn render(py: Python<'_>, cloud: &PyCloud, pose: &PyPose, intrinsics: &PyIntrinsics, mode: &str) -> PyResult<Rows<[f64; 3]>> {
    let mode = parse_mode(mode)?;
    let img = py.detach(|| splat::render(&cloud.0, &pose.0, &intrinsics.0, mode).image);
    Ok(grid_to_rows(&img))
}

/// PSNR over pixels whose dynamic probability is below `threshold`.
#[pyfunction]
#[pyo3(signature = (rendered, gt, dynamic_mask, threshold = 0.5))]
fn masked_psnr(rendered: Rows<[f64; 3]>, gt: Rows<[f64; 3]>, dynamic_mask: Rows<f64>, threshold: f64) -> PyResult<f64> {
    let r: Image = grid_from_rows(rendered, "rendered")?;
    let g: Image = grid_from_rows(gt, "gt")?;
    let m = FrameMask::new(grid_from_rows(dynamic_mask, "dynamic_mask")?).map_err(to_py)?;
    staticsplat::eval::masked_psnr(&r, &g, &m, threshold).map_err(to_py)
}

#[pyfunction]
fn ssim(x: Rows<[f64; 3]>, y: Rows<[f64; 3]>) -> PyResult<f64> {
    staticsplat::eval::ssim(&grid_from_rows(x, "x")?, &grid_from_rows(y, "y")?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = 0.5))]
fn mask_iou(pred: Rows<f64>, gt: Rows<f64>, threshold: f64) -> PyResult<f64> {
    let p = FrameMask::new(grid_from_rows(pred, "pred")?).map_err(to_py)?;
    let g = FrameMask::new(grid_from_rows(gt, "gt")?).map_err(to_py)?;
    staticsplat::eval::mask_iou(&p, &g, threshold).map_err(to_py)
}

/// Returns `{"ate", "rpe_trans", "rpe_rot"}`.
#[pyfunction]
fn trajectory_metrics<'py>(py: Python<'py>, estimated: Vec<PyPose>, ground_truth: Vec<PyPose>) -> PyResult<Bound<'py, PyDict>> {
    let est: Vec<geo::Pose> = estimated.into_iter().map(|p| p.0).collect();
    let gt: Vec<geo::Pose> = ground_truth.into_iter().map(|p| p.0).collect();
    let m = staticsplat::eval::trajectory_metrics(&est, &gt).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("ate", m.ate)?;
    d.set_item("rpe_trans", m.rpe_trans)?;
    d.set_item("rpe_rot", m.rpe_rot)?;
    Ok(d)
}

/// `(train, test)` frame indices.
#[pyfunction]
fn split_frames(n: usize) -> (Vec<usize>, Vec<usize>) {
    staticsplat::eval::split_frames(n)
}

/// Ordered frame pairs for the given strides.
#[pyfunction]
#[pyo3(signature = (num_frames, strides = vec![1]))]
fn build_graph(num_frames: usize, strides: Vec<usize>) -> PyResult<Vec<(usize, usize)>> {
    staticsplat::align::build_graph(num_frames, &strides)
        .map(|g| g.edges().to_vec())
        .map_err(to_py)
}

/// Generated scene with ground truth.
#[pyclass(name = "SyntheticScene", module = "staticsplat_py", frozen)]
struct PyScene(staticsplat::synth::SyntheticDataset);

#[pymethods]
impl PyScene {
    #[new]
    #[pyo3(signature = (width = 64, height = 64, frames = 50, dynamic = 2, seed = 0, coverage = None, noise = 0.0))]
    fn new(
        py: Python<'_>,
        width: usize,
        height: usize,
        frames: usize,
        dynamic: usize,
        seed: u64,
        coverage: Option<f64>,
        noise: f64,
    ) -> PyResult<Self> {
        let mut spec = staticsplat::synth::SceneSpec::standard(width, height, frames, dynamic, seed);
        spec.coverage = coverage;
        spec.pointmap_noise = noise;
        py.detach(|| staticsplat::synth::generate(&spec)).map(Self).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.num_frames()
    }

    #[getter]
    fn coverage(&self) -> f64 {
        self.0.coverage
    }

    #[getter]
    fn intrinsics(&self) -> PyIntrinsics {
        PyIntrinsics(self.0.intrinsics)
    }

    #[getter]
    fn poses(&self) -> Vec<PyPose> {
        self.0.poses.iter().map(|p| PyPose(*p)).collect()
    }

    fn frame(&self, t: usize) -> PyResult<Rows<[f64; 3]>> {
        self.check(t)?;
        Ok(grid_to_rows(&self.0.frames[t]))
    }

    fn static_frame(&self, t: usize) -> PyResult<Rows<[f64; 3]>> {
        self.check(t)?;
        Ok(grid_to_rows(&self.0.static_frames[t]))
    }

    fn mask(&self, t: usize) -> PyResult<Rows<f64>> {
        self.check(t)?;
        Ok(grid_to_rows(self.0.masks[t].values()))
    }

    fn depth(&self, t: usize) -> PyResult<Rows<f64>> {
        self.check(t)?;
        Ok(grid_to_rows(self.0.depths[t].values()))
    }

    /// Writes the dataset and its manifest, as the `synth` command does.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        staticsplat::io::write_synthetic(&dir, &self.0).map(|_| ()).map_err(to_py)
    }
}

impl PyScene {
    fn check(&self, t: usize) -> PyResult<()> {
        if t >= self.0.num_frames() {
            return Err(PyValueError::new_err(format!("frame {t} out of range")));
        }
        Ok(())
    }
}

#[pymodule]
fn staticsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyCloud>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(masked_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(split_frames, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    Ok(())
}
