use super::tensor::{Gradients, NetworkParams};
use crate::error::{Error, Result};

/// SGD with Nesterov momentum (PyTorch convention) and L2 weight decay on
/// parameters whose name ends in `weight`.
#[derive(Clone, Debug)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: NetworkParams,
}

impl SgdNesterov {
    pub fn new(params: &NetworkParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients, lr: f64) -> Result<()> {
        if !params.same_keys(grads) || !params.same_keys(&self.velocity) {
            return Err(Error::invalid("grads", "key set differs from parameters"));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
        for (((name, p), (_, g)), (_, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.velocity.iter_mut())
        {
            let decay = if name.ends_with("weight") {
                self.weight_decay
            } else {
                0.0
            };
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * (d + self.momentum * *vv);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule evaluated at fractional epoch `e ∈ [0, total)`.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// Multiply by `factor` at each milestone, given as a fraction of training.
    Step {
        base: f64,
        milestones: Vec<f64>,
        factor: f64,
    },
    /// Linear warmup over `warmup_epochs`, then cosine decay to zero.
    WarmupCosine { base: f64, warmup_epochs: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: f64, total_epochs: f64) -> f64 {
        match self {
            LrSchedule::Step {
                base,
                milestones,
                factor,
            } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch >= m * total_epochs)
                    .count();
                base * factor.powi(passed as i32)
            }
            LrSchedule::WarmupCosine {
                base,
                warmup_epochs,
            } => {
                if epoch < *warmup_epochs {
                    base * (epoch + 1.0).min(*warmup_epochs) / warmup_epochs
                } else {
                    let span = (total_epochs - warmup_epochs).max(1e-12);
                    let progress = ((epoch - warmup_epochs) / span).clamp(0.0, 1.0);
                    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}
