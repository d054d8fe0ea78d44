//! Masked PSNR/SSIM, trajectory error and the train/test split.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{umeyama, Pose};
use crate::grid::Image;
use crate::masks::{is_dynamic, FrameMask};

pub use crate::masks::mask_iou;

/// Reported PSNR for a perfect match.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR (peak 1) over pixels whose dynamic probability is below `threshold`.
pub fn masked_psnr(rendered: &Image, gt: &Image, dynamic_mask: &FrameMask, threshold: f64) -> Result<f64> {
    rendered.same_shape(gt)?;
    rendered.same_shape(dynamic_mask.values())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for ((r, g), &m) in rendered.iter().zip(gt.iter()).zip(dynamic_mask.values().iter()) {
        if is_dynamic(m, threshold) {
            continue;
        }
        for ch in 0..3 {
            sum += (r[ch] - g[ch]).powi(2);
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::NoStaticPixels);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub fn ssim(rendered: &Image, gt: &Image) -> Result<f64> {
    crate::ssim::ssim(rendered, gt)
}

/// Mean of the SSIM map over static pixels.
pub fn masked_ssim(rendered: &Image, gt: &Image, dynamic_mask: &FrameMask, threshold: f64) -> Result<f64> {
    let map = crate::ssim::ssim_map(rendered, gt)?;
    map.same_shape(dynamic_mask.values())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, &m) in map.iter().zip(dynamic_mask.values().iter()) {
        if !is_dynamic(m, threshold) {
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoStaticPixels);
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrajectoryMetrics {
    /// RMSE of camera positions after similarity alignment.
    pub ate: f64,
    /// RMSE of consecutive relative translations, estimate rescaled.
    pub rpe_trans: f64,
    /// RMSE of consecutive relative rotation angles, degrees.
    pub rpe_rot: f64,
}

/// ATE after aligning `estimated` onto `ground_truth` with a similarity,
/// and RPE over consecutive frame pairs.
pub fn trajectory_metrics(estimated: &[Pose], ground_truth: &[Pose]) -> Result<TrajectoryMetrics> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} estimated vs {} ground truth",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::InvalidInput("trajectories need at least 2 poses".into()));
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(|p| p.translation).collect();
    let dst: Vec<Vector3<f64>> = ground_truth.iter().map(|p| p.translation).collect();
    let n = src.len() as f64;
    let (scale, mapped): (f64, Vec<Vector3<f64>>) = match umeyama(&src, &dst, true) {
        Ok(sim) if src.len() >= 3 => (sim.scale, src.iter().map(|p| sim.apply(p)).collect()),
        _ => {
            // degenerate position sets: translate only
            let shift = (dst.iter().sum::<Vector3<f64>>() - src.iter().sum::<Vector3<f64>>()) / n;
            (1.0, src.iter().map(|p| p + shift).collect())
        }
    };
    let ate = (mapped.iter().zip(&dst).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / n).sqrt();

    let steps = estimated.len() - 1;
    let (mut et, mut er) = (0.0, 0.0);
    for i in 0..steps {
        let rel_gt = ground_truth[i].relative_from(&ground_truth[i + 1]);
        let mut rel_est = estimated[i].relative_from(&estimated[i + 1]);
        rel_est.translation *= scale;
        let err = rel_gt.relative_from(&rel_est);
        et += err.translation.norm_squared();
        er += err.rotation.angle().to_degrees().powi(2);
    }
    Ok(TrajectoryMetrics {
        ate,
        rpe_trans: (et / steps as f64).sqrt(),
        rpe_rot: (er / steps as f64).sqrt(),
    })
}

/// Frames with index ≡ 9 (mod 10) are held out. Fewer than 10 frames puts
/// everything in the training split.
pub fn split_frames(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 10 {
        log::warn!("only {n} frames: no test split, all frames used for training");
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % 10 != 9)
}
