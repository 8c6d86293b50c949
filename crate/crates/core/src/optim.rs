//! Adaptive moment estimation over [`ParamStore`] entries, plus global-norm
//! gradient clipping. One optimizer instance carries the state for every
//! parameter group; groups differ only in learning rate.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Moment hyperparameters. Learning rate is supplied per step so parameter
/// groups with different rates can share one optimizer.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

struct Slot {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with per-parameter first/second moments and step counts, keyed by
/// prefixed parameter name.
pub struct Adam {
    cfg: AdamConfig,
    slots: IndexMap<String, Slot>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            slots: IndexMap::new(),
        }
    }

    /// Apply one update to every parameter of `store` that has a gradient in
    /// `grads` under the key `{prefix}.{name}`. Parameters without gradients
    /// keep both their value and their optimizer state untouched.
    pub fn step(
        &mut self,
        lr: f64,
        prefix: &str,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::InvalidArg {
                op: "adam_step",
                why: format!("learning rate {lr} must be nonnegative"),
            });
        }
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let key = format!("{prefix}.{name}");
            let Some(g) = grads.get(&key) else { continue };
            if store.is_target(&name)? {
                return Err(Error::ParamStore(format!(
                    "gradient supplied for target parameter {key}"
                )));
            }
            let shape = store.get(&name)?.shape().to_vec();
            if g.shape() != shape {
                return Err(Error::ParamStore(format!(
                    "gradient shape {:?} does not match {key} {:?}",
                    g.shape(),
                    shape
                )));
            }
            let slot = self.slots.entry(key).or_insert_with(|| Slot {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                t: 0,
            });
            slot.t += 1;
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            let bc1 = 1.0 - b1.powi(slot.t as i32);
            let bc2 = 1.0 - b2.powi(slot.t as i32);
            store.update(&name, |p| {
                for ((pv, gv), (mv, vv)) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut()))
                {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries, in map iteration order.
pub fn global_norm(grads: &IndexMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|&g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients in place so the global norm is at most `max_norm`.
/// Returns the pre-clip norm. Gradients already inside the bound are left
/// bit-identical.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArg {
            op: "clip_global_norm",
            why: format!("max_norm {max_norm} must be positive"),
        });
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient norm".into(),
        });
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}
