//! AdamW with decoupled weight decay and the polynomial learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::OptimizerConfig;

/// `lr * (1 - step / total_steps)^power`, clamped at zero past the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl PolySchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        self.base_lr * (1.0 - step as f64 / self.total_steps as f64).powf(self.power)
    }
}

/// First and second moment estimates per parameter name.
pub struct AdamW {
    cfg: OptimizerConfig,
    /// Updates applied so far (bias-correction exponent).
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient
    /// (frozen or unused) are left untouched, weight decay included.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let p_lr = if name.starts_with("encoders.") {
                lr * c.backbone_lr_scale
            } else {
                lr
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g2 * (1.0 - c.beta2))?)?,
                None => (g2 * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let p = var.as_tensor().detach();
            let next = ((&p * (1.0 - p_lr * c.weight_decay))? - (update * p_lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` tensors.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, step: usize, tensors: BTreeMap<String, Tensor>, store: &ParamStore) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            let (slot, name) = match k.split_once('.') {
                Some(("m", n)) => (&mut self.m, n.to_string()),
                Some(("v", n)) => (&mut self.v, n.to_string()),
                _ => return Err(Error::Input(format!("unexpected optimizer tensor {k}"))),
            };
            let param = store.param(&name)?;
            if param.dims() != t.dims() {
                return Err(Error::Input(format!(
                    "optimizer state {k} has shape {:?}, parameter has {:?}",
                    t.dims(),
                    param.dims()
                )));
            }
            slot.insert(name, t.to_dtype(store.dtype())?);
        }
        Ok(())
    }
}
