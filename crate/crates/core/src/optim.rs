//! AdamW with decoupled weight decay and a separate group for mixing logits.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::Grads;
use crate::model::{ParamGroup, SegmentationNet};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f32,
    pub weight_decay: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weights: GroupHyper,
    pub mixing: GroupHyper,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    /// Mixing logits get `lr * mixing_lr_multiplier` and no weight decay.
    pub fn new(lr: f32, weight_decay: f32, mixing_lr_multiplier: f32, betas: (f32, f32), eps: f32) -> Self {
        Self {
            weights: GroupHyper { lr, weight_decay },
            mixing: GroupHyper {
                lr: lr * mixing_lr_multiplier,
                weight_decay: 0.0,
            },
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient in `grads`.
    /// Parameters without a gradient are left untouched, including weight decay.
    pub fn step(&mut self, net: &mut SegmentationNet, grads: &Grads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut failure = None;
        net.visit_params_mut(&mut |p| {
            if !p.trainable || failure.is_some() {
                return;
            }
            let Some(g) = grads.get(&p.name) else {
                return;
            };
            if g.len() != p.values.len() {
                failure = Some(Error::invalid(format!(
                    "gradient for `{}` has {} values, parameter has {}",
                    p.name,
                    g.len(),
                    p.values.len()
                )));
                return;
            }
            let hyper = match p.group {
                ParamGroup::Weights => &self.weights,
                ParamGroup::Mixing => &self.mixing,
            };
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = 1.0 - hyper.lr * hyper.weight_decay;
            let step_size = hyper.lr / bc1;
            let sqrt_bc2 = bc2.sqrt();
            for i in 0..g.len() {
                p.values[i] *= decay;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / sqrt_bc2 + eps;
                p.values[i] -= step_size * m[i] / denom;
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// Moment buffers and step count as named arrays for checkpointing.
    pub fn state_arrays(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = vec![("adamw.step".to_string(), vec![self.step as f32])];
        for (k, m) in &self.m {
            out.push((format!("adamw.m.{k}"), m.clone()));
        }
        for (k, v) in &self.v {
            out.push((format!("adamw.v.{k}"), v.clone()));
        }
        out
    }

    pub fn load_state_arrays(&mut self, arrays: &[(String, Vec<f32>)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = 0;
        for (name, values) in arrays {
            if name == "adamw.step" {
                let s = values
                    .first()
                    .ok_or_else(|| Error::checkpoint(name, "empty step counter"))?;
                self.step = *s as u64;
            } else if let Some(k) = name.strip_prefix("adamw.m.") {
                self.m.insert(k.to_string(), values.clone());
            } else if let Some(k) = name.strip_prefix("adamw.v.") {
                self.v.insert(k.to_string(), values.clone());
            }
        }
        Ok(())
    }
}
