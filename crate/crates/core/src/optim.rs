//! Adam and ScaledAdam with decoupled weight decay.
//!
//! ScaledAdam here is the Adam step multiplied, per tensor, by
//! `max(rms_min, RMS(θ))`, so a tensor's update is proportional to its own
//! scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    ScaledAdam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Floor on the per-tensor RMS used by ScaledAdam.
    pub rms_min: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            rms_min: 1e-5,
        }
    }
}

/// Moments and step counter for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: OptimizerKind,
    config: AdamConfig,
    step: u64,
}

const M_PREFIX: &str = "optim/m/";
const V_PREFIX: &str = "optim/v/";

impl Optimizer {
    pub fn new(kind: OptimizerKind, config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            kind,
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Non-finite gradients abort the
    /// step and leave both parameters and state untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} tensors, store {}, grads {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient; step skipped".into()));
        }
        if !(lr > 0.0) {
            return Err(Error::contract(format!("learning rate {lr} must be positive")));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let theta = store.get_mut(id).data_mut();
            let scale = match self.kind {
                OptimizerKind::Adam => 1.0,
                OptimizerKind::ScaledAdam => {
                    let rms = (theta.iter().map(|x| x * x).sum::<f64>() / theta.len() as f64).sqrt();
                    rms.max(c.rms_min)
                }
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                theta[i] -= lr * scale * update + lr * c.weight_decay * theta[i];
            }
        }
        Ok(())
    }

    /// Checkpoint blocks (moments) and metadata (kind, step, hyperparameters).
    pub fn to_parts(&self, store: &ParamStore) -> (Vec<(String, Tensor)>, serde_json::Value) {
        let mut blocks = Vec::with_capacity(2 * self.m.len());
        for (k, (_, name, t)) in store.iter().enumerate() {
            let shape = t.shape().to_vec();
            blocks.push((format!("{M_PREFIX}{name}"), Tensor::new(shape.clone(), self.m[k].clone()).expect("moment shape")));
            blocks.push((format!("{V_PREFIX}{name}"), Tensor::new(shape, self.v[k].clone()).expect("moment shape")));
        }
        let meta = Meta {
            kind: self.kind,
            config: self.config,
            step: self.step,
        };
        (blocks, serde_json::to_value(meta).expect("serializable"))
    }

    pub fn from_parts(store: &ParamStore, blocks: &[(String, Tensor)], meta: &serde_json::Value) -> Result<Self> {
        let meta: Meta = serde_json::from_value(meta.clone()).map_err(|e| Error::Format {
            what: "optimizer state",
            detail: e.to_string(),
        })?;
        let find = |prefix: &str, name: &str, shape: &[usize]| {
            let key = format!("{prefix}{name}");
            let t = blocks.iter().find(|(n, _)| *n == key).map(|(_, t)| t).ok_or_else(|| Error::Format {
                what: "optimizer state",
                detail: format!("missing block {key}"),
            })?;
            if t.shape() != shape {
                return Err(Error::Format {
                    what: "optimizer state",
                    detail: format!("block {key} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            Ok(t.data().to_vec())
        };
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            m.push(find(M_PREFIX, name, t.shape())?);
            v.push(find(V_PREFIX, name, t.shape())?);
        }
        Ok(Self {
            kind: meta.kind,
            config: meta.config,
            step: meta.step,
            m,
            v,
        })
    }
}
