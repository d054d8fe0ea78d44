//! Adam over the packed alignment parameters.

use super::loss::{total_loss, LossTerms};
use super::{AlignProblem, AlignState, WindowSet};
use crate::error::{Error, Result};
use crate::masks::FrameMask;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub w_smooth: f64,
    pub w_flow: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 0.01,
            w_smooth: 0.01,
            w_flow: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    pub state: AlignState,
    /// Loss before each step, followed by the loss of the returned state.
    pub trace: Vec<LossTerms>,
}

pub(crate) fn cosine_lr(base: f64, it: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * it as f64 / total as f64).cos())
}

/// Runs the weighted objective to convergence budget. The scale gauge and
/// unit quaternions are re-imposed after every step.
pub fn optimize_alignment(
    problem: &AlignProblem,
    windows: &WindowSet,
    frame_masks: &[FrameMask],
    init: AlignState,
    config: &AlignConfig,
) -> Result<AlignResult> {
    let mut state = init;
    state.project_scale_gauge();
    let np = state.num_params();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for it in 0..config.iterations {
        let (terms, grad) = total_loss(
            &state,
            problem,
            windows,
            frame_masks,
            config.w_smooth,
            config.w_flow,
            true,
        )?;
        if !terms.total.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        trace.push(terms);
        let g = grad.expect("gradient requested").pack();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        let lr = cosine_lr(config.learning_rate, it, config.iterations);
        let k = (it + 1) as i32;
        let (bc1, bc2) = (1.0 - config.beta1.powi(k), 1.0 - config.beta2.powi(k));
        let mut x = state.pack();
        for i in 0..np {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            x[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + config.epsilon);
        }
        state.unpack(&x);
        state.normalize_quats();
        state.project_scale_gauge();
        log::debug!("align iter {it}: total {:.6e}", terms.total);
    }
    let (terms, _) = total_loss(
        &state,
        problem,
        windows,
        frame_masks,
        config.w_smooth,
        config.w_flow,
        false,
    )?;
    if !terms.total.is_finite() {
        return Err(Error::Diverged {
            iteration: config.iterations,
        });
    }
    trace.push(terms);
    Ok(AlignResult { state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(0.01, 99, 100) < 1e-5);
    }
}
