use serde::{Deserialize, Serialize};

use super::tensor::ParameterSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Adam => "adam",
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_CLIP: f64 = 5.0;

/// First-order optimizer with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, lr: f64, params: &ParameterSet) -> Self {
        let zeros = |_: usize| -> Vec<Vec<f64>> {
            params.ids().map(|p| vec![0.0; params.value(p).len()]).collect()
        };
        let (m, v) = match algorithm {
            Algorithm::Sgd => (Vec::new(), Vec::new()),
            Algorithm::Adam => (zeros(0), zeros(1)),
        };
        Self {
            algorithm,
            lr,
            clip: Some(DEFAULT_CLIP),
            step: 0,
            m,
            v,
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    /// Applies the accumulated gradients of every unfrozen parameter, then
    /// clears all gradient buffers. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParameterSet) -> f64 {
        let norm = params
            .ids()
            .filter(|p| !params.is_frozen(*p))
            .flat_map(|p| params.grad(p).iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<_> = params.ids().collect();
        for p in ids {
            if params.is_frozen(p) {
                continue;
            }
            let grad: Vec<f64> = params.grad(p).iter().map(|g| g * factor).collect();
            let value = params.value_mut(p).data_mut();
            match self.algorithm {
                Algorithm::Sgd => {
                    for (w, g) in value.iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                Algorithm::Adam => {
                    let (m, v) = (&mut self.m[p.index()], &mut self.v[p.index()]);
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for i in 0..value.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        value[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        params.zero_grads();
        norm
    }
}
