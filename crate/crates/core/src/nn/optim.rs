//! AdamW with decoupled weight decay, the warmup/linear-decay schedule, and
//! global-norm gradient clipping.
//!
//! ```text
//! theta <- theta - lr * wd * theta
//! m <- b1 m + (1 - b1) g;   v <- b2 v + (1 - b2) g^2
//! theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use super::params::{ParamId, ParameterStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// Applies one update to every trainable entry using its stored gradient.
    pub fn step<F: Scalar>(&self, store: &mut ParameterStore<F>, lr: f64, step_index: usize) -> Result<()> {
        if step_index == 0 {
            return Err(Error::InvalidArgument("AdamW step index starts at 1".into()));
        }
        let t = step_index as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let decay = F::lit(1.0 - lr * self.weight_decay);
        let lr_f = F::lit(lr);
        let (bc1, bc2) = (F::lit(bc1), F::lit(bc2));
        let eps = F::lit(self.eps);
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                value[k] *= decay;
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `ceil(total / 10)` steps, then linear decay to 0.
pub fn warmup_linear_lr(step: usize, total_steps: usize, peak: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = total_steps.div_ceil(10);
    let step = step.min(total_steps);
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Rescales the gradients of `ids` so their joint L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when no clipping happened).
pub fn clip_global_norm<F: Scalar>(store: &mut ParameterStore<F>, ids: &[ParamId], max_norm: f64) -> f64 {
    let sq: f64 = ids.iter().map(|&id| store.get(id).grad.sum_squares().to_f64().unwrap()).sum();
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for &id in ids {
        store.get_mut(id).grad.scale(F::lit(scale));
    }
    scale
}
