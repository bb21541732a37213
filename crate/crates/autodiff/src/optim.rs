//! Update rules: a functional (differentiable) SGD step and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{AutogradError, Result};
use crate::graph::Var;
use crate::tensor::{Shape, Tensor};

/// `p' = p - lr * g` for each parameter, recorded on the graph.
///
/// `lrs[i]` is either a `[1, 1]` scalar or matches the shape of `params[i]`
/// (per-coordinate rates). The inputs are left untouched.
pub fn sgd_step<'g>(
    params: &[Var<'g>],
    grads: &[Var<'g>],
    lrs: &[Var<'g>],
) -> Result<Vec<Var<'g>>> {
    if params.len() != grads.len() || params.len() != lrs.len() {
        return Err(AutogradError::InvalidArgument {
            op: "sgd_step",
            reason: format!(
                "{} params, {} grads, {} learning rates",
                params.len(),
                grads.len(),
                lrs.len()
            ),
        });
    }
    params
        .iter()
        .zip(grads)
        .zip(lrs)
        .map(|((p, g), lr)| {
            if p.shape() != g.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if lr.shape() != [1, 1] && lr.shape() != p.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape(),
                    rhs: lr.shape(),
                });
            }
            p.sub(lr.mul(*g)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    state: Option<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: None,
        }
    }

    /// Zeroes the accumulators for parameters of the given shapes.
    pub fn init(&mut self, shapes: &[Shape]) {
        self.state = Some(AdamState {
            step: 0,
            first: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
        });
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Self {
        Self {
            config,
            state: Some(state),
        }
    }

    pub fn state(&self) -> Option<&AdamState> {
        self.state.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.state.as_ref().map_or(0, |s| s.step)
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        let cfg = self.config;
        let state = self
            .state
            .as_mut()
            .ok_or(AutogradError::UninitializedOptimizer)?;
        if state.first.len() != params.len() || grads.len() != params.len() {
            return Err(AutogradError::UninitializedOptimizer);
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (k, pk) in p.data_mut().iter_mut().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pk -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
