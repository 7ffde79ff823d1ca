use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POLY_POWER: f64 = 0.9;

/// `lr0 (1 - epoch / epochs)^0.9`.
pub fn poly_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    let frac = 1.0 - (epoch.min(epochs) as f64) / epochs.max(1) as f64;
    lr0 * frac.powf(POLY_POWER)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers. SGD uses only `first`.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => sizes.iter().map(|&n| vec![0.0; n]).collect(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second,
        }
    }

    /// Update `params[i]` in place from `grads[i]`.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                let step_size = (lr / bc1) as f32;
                let bc2_sqrt = bc2.sqrt() as f32;
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps as f32);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let (mu, lr) = (momentum as f32, lr as f32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let buf = &mut self.first[i];
                    for j in 0..p.len() {
                        buf[j] = mu * buf[j] + g[j];
                        p[j] -= lr * buf[j];
                    }
                }
            }
        }
        Ok(())
    }
}
