//! Stochastic gradient descent with momentum, Nesterov and L2 weight decay.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::{Error, Result};

/// Hyper-parameters of [`sgd_update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub dampening: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            dampening: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.dampening) {
            return Err(Error::InvalidArgument(format!(
                "dampening must lie in [0, 1), got {}",
                self.dampening
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        // Nesterov look-ahead is only well defined on the undampened buffer.
        if self.nesterov && (self.momentum == 0.0 || self.dampening != 0.0) {
            return Err(Error::InvalidArgument(
                "nesterov requires positive momentum and zero dampening".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer configuration plus one momentum buffer per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    config: SgdConfig,
    buffers: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffers: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        let mut next = self.config;
        next.lr = lr;
        next.validate()?;
        self.config = next;
        Ok(())
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }
}

/// One SGD step over matched `(param, grad)` slices.
///
/// Weight decay is folded into the gradient before the momentum buffer
/// (`d = g + wd·p`), then `buf = m·buf + (1 − dampening)·d` (initialized to
/// `d` on the first step), and `p −= lr·(d + m·buf)` with Nesterov or
/// `p −= lr·buf` without.
pub fn sgd_update<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_update",
                lhs: vec![i, p.len()],
                rhs: vec![i, g.len()],
            });
        }
        if let Some(buf) = state.buffers.get(i) {
            if !buf.is_empty() && buf.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_update (momentum buffer)",
                    lhs: vec![i, buf.len()],
                    rhs: vec![i, p.len()],
                });
            }
        }
    }
    let cfg = state.config;
    let lr = T::from_f64(cfg.lr);
    let wd = T::from_f64(cfg.weight_decay);
    let m = T::from_f64(cfg.momentum);
    let damp = T::one() - T::from_f64(cfg.dampening);
    if state.buffers.len() < params.len() {
        state.buffers.resize(params.len(), Vec::new());
    }
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        let first = buf.is_empty();
        if cfg.momentum != 0.0 && first {
            buf.resize(p.len(), T::zero());
        }
        for (j, (pj, &gj)) in p.iter_mut().zip(g.iter()).enumerate() {
            let d = if cfg.weight_decay != 0.0 { gj + wd * *pj } else { gj };
            let step = if cfg.momentum == 0.0 {
                d
            } else {
                let b = if first { d } else { m * buf[j] + damp * d };
                buf[j] = b;
                if cfg.nesterov {
                    d + m * b
                } else {
                    b
                }
            };
            *pj = *pj - lr * step;
        }
    }
    Ok(())
}
