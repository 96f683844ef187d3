//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One AdamW update of a single tensor at step `t ≥ 1`.
///
/// Weight decay is applied to the parameter directly, separately from the
/// adaptive step.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: T,
    weight_decay: T,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adamw_step: step count starts at 1".into()));
    }
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::dim(format!(
            "adamw_step: parameter has {} values but gradient/moments have {}/{}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPSILON));
    let one = T::one();
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = one - b1.powi(exp);
    let c2 = one - b2.powi(exp);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] = param[i] - lr * weight_decay * param[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `lr₀ · ½(1 + cos(π·epoch/total))` for `0 ≤ epoch < total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if epoch >= total {
        return Err(Error::Contract(format!("cosine_lr: epoch {epoch} outside 0..{total}")));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}

/// Scales gradients in place so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(T::zero(), |acc, &x| acc + x * x)
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= s;
        }
    }
    norm
}
