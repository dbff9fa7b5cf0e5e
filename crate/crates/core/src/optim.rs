//! AdamW with global-norm gradient clipping.
//!
//! Moments are keyed by parameter name and created the first time a
//! parameter receives a gradient, so modules that join training late get
//! fresh bias correction. Parameters without a gradient in a step are left
//! untouched, weight decay included.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, ParamGrads};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moment {
    pub step: u64,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub moments: BTreeMap<String, Moment>,
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    /// One update of every parameter in `params` that has an entry in
    /// `grads`. Returns the gradient norm before clipping.
    pub fn step(&mut self, cfg: &AdamWConfig, params: Vec<&mut Param>, grads: &ParamGrads) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient".into(),
                value: norm,
            });
        }
        let scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.dim() != p.value.dim() {
                return Err(Error::Contract(format!(
                    "gradient of `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    g.dim(),
                    p.value.dim()
                )));
            }
            let st = self.moments.entry(p.name.clone()).or_insert_with(|| Moment {
                step: 0,
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
            });
            st.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
            let decay = 1.0 - cfg.lr * cfg.weight_decay;
            Zip::from(&mut p.value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    let g = g * scale;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                    *w = *w * decay - cfg.lr * update;
                });
        }
        Ok(norm)
    }
}
