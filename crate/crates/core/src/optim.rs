//! First-order optimizers over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW {
        #[serde(default = "default_decay")]
        decay: f64,
    },
}

fn default_decay() -> f64 {
    0.01
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer with per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params` and `grads` must keep the same order and
    /// shapes across calls.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid("parameter and gradient counts differ".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return shape_err("optimizer update", p.shape(), g.shape());
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence("non-finite gradient".into()));
            }
        }
        if self.kind == OptimizerKind::Sgd {
            for (p, g) in params.iter_mut().zip(grads) {
                p.axpy(-self.lr, g)?;
            }
            return Ok(());
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::Invalid("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let decay = match self.kind {
            OptimizerKind::AdamW { decay } => decay,
            _ => 0.0,
        };
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                if decay > 0.0 {
                    pd[j] -= self.lr * decay * pd[j];
                }
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                pd[j] -= self.lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
