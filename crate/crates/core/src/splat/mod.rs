//! Differentiable Gaussian splatting with an optional per-Gaussian
//! staticness factor on opacity.

mod ply;
mod render;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, RawQuat};

pub use ply::{read_cloud, write_cloud};
pub use render::{
    project_gaussian, rasterize, render, render_backward, CloudGrad, Projection, Rasterization,
    RenderMode, RenderedImage, ALPHA_MAX, COV_REGULARIZER, NEAR_PLANE, TRANSMITTANCE_MIN,
};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`]; `0` and `1` map to infinities.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Raw `[w, x, y, z]`; the renderer normalizes it.
    pub rotation: RawQuat,
    pub color: [f64; 3],
    pub opacity_logit: f64,
    pub staticness_logit: f64,
}

impl Gaussian {
    pub fn isotropic(mu: Vector3<f64>, sigma: f64, color: [f64; 3], opacity: f64) -> Self {
        Self {
            mu,
            log_scale: Vector3::repeat(sigma.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            color,
            opacity_logit: logit(opacity),
            staticness_logit: f64::INFINITY,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn staticness(&self) -> f64 {
        sigmoid(self.staticness_logit)
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = quat_to_matrix(&self.rotation) * Matrix3::from_diagonal(&self.log_scale.map(f64::exp));
        m * m.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|x| x.is_finite())
            && self.log_scale.iter().all(|x| x.is_finite())
            && self.rotation.iter().all(|x| x.is_finite())
            && self.color.iter().all(|x| x.is_finite())
            && !self.opacity_logit.is_nan()
            && !self.staticness_logit.is_nan()
    }
}

/// Frame and pixel a Gaussian was initialized from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceTag {
    pub frame: usize,
    pub u: usize,
    pub v: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sources: Vec<Option<SourceTag>>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let sources = vec![None; gaussians.len()];
        Self { gaussians, sources }
    }

    pub fn with_sources(gaussians: Vec<Gaussian>, sources: Vec<Option<SourceTag>>) -> Result<Self> {
        if gaussians.len() != sources.len() {
            return Err(Error::InvalidInput(format!(
                "{} gaussians but {} source tags",
                gaussians.len(),
                sources.len()
            )));
        }
        Ok(Self { gaussians, sources })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian, source: Option<SourceTag>) {
        self.gaussians.push(g);
        self.sources.push(source);
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.len() != self.sources.len() {
            return Err(Error::InvalidInput("source tag count does not match cloud size".into()));
        }
        if let Some(i) = self.gaussians.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidInput(format!("gaussian {i} has non-finite parameters")));
        }
        Ok(())
    }

    /// Copy without Gaussians whose staticness is below `threshold`.
    pub fn prune_dynamic(&self, threshold: f64) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.gaussians[i].staticness() >= threshold)
            .collect();
        Self {
            gaussians: keep.iter().map(|&i| self.gaussians[i]).collect(),
            sources: keep.iter().map(|&i| self.sources[i]).collect(),
        }
    }
}
