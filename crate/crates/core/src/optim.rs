//! Decoupled-weight-decay Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Grads;
use crate::params::{Param, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One update of every unfrozen parameter with learning rate
    /// `lr_for(param)`. Parameters with no gradient entry are treated as
    /// having a zero gradient; frozen parameters are not touched.
    pub fn step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        grads: &Grads<T>,
        lr_for: impl Fn(&Param<T>) -> f64,
    ) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let lr = lr_for(store.param(id));
            if store.is_frozen(id) {
                continue;
            }
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "learning rate {lr} for {} must be positive",
                    store.param(id).name
                )));
            }
            let p = store.param_mut(id);
            let g = grads.param(id);
            self.update(p, g.map(|t| t.data()), lr);
        }
        Ok(())
    }

    fn update<T: Scalar>(&self, p: &mut Param<T>, grad: Option<&[T]>, lr: f64) {
        p.state.step += 1;
        let t = p.state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr_t = T::lit(lr);
        let decay = T::one() - lr_t * T::lit(self.weight_decay);
        let eps = T::lit(self.eps);
        let n = p.value.len();
        let m = p.state.m.data_mut();
        let v = p.state.v.data_mut();
        let w = p.value.data_mut();
        for i in 0..n {
            let gi = grad.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] = w[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Single-learning-rate convenience wrapper.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    AdamW {
        beta1: betas.0,
        beta2: betas.1,
        eps,
        weight_decay,
    }
    .step(store, grads, |_| lr)
}
