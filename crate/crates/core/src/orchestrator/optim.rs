use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// `v <- m v + g; w <- w - lr v`.
    Sgd { momentum: f64 },
}

impl OptimizerSpec {
    pub fn adam() -> Self {
        OptimizerSpec::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerSpec::Sgd { momentum } => (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers, one per parameter, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    /// Adam first moment or SGD velocity.
    pub first: Vec<Vec<f32>>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.value.numel()]).collect();
        OptimizerState {
            spec,
            first: zeros(),
            second: match spec {
                OptimizerSpec::Adam { .. } => zeros(),
                OptimizerSpec::Sgd { .. } => Vec::new(),
            },
            step: 0,
        }
    }

    /// Applies one update with learning rate `lr`; `grads` are indexed like
    /// the parameters.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} gradients and {} buffers for {} parameters",
                    grads.len(),
                    self.first.len(),
                    params.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.value.numel() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "{}: gradient has {} values, parameter {}",
                        p.name,
                        g.len(),
                        p.value.numel()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, g) in grads.iter().enumerate() {
            let mut w = params.value_at(i).to_vec();
            match self.spec {
                OptimizerSpec::Sgd { momentum } => {
                    let v = &mut self.first[i];
                    for j in 0..w.len() {
                        let vj = momentum * v[j] as f64 + g[j] as f64;
                        v[j] = vj as f32;
                        w[j] = (w[j] as f64 - lr * vj) as f32;
                    }
                }
                OptimizerSpec::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for j in 0..w.len() {
                        let gj = g[j] as f64;
                        let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                        let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        w[j] = (w[j] as f64 - lr * (mj / c1) / ((vj / c2).sqrt() + eps)) as f32;
                    }
                }
            }
            params.set(i, w)?;
        }
        Ok(())
    }
}
