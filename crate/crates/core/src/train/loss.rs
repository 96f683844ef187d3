//! Pose regression loss with learnable position/rotation balance.

use crate::error::{Error, Result};
use crate::geometry::{canonicalize, quat_log, Pose};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const ALPHA_INIT: f64 = -5.0;
pub const BETA_INIT: f64 = -1.0;

/// Learnable log-scale weights of the position (`alpha`) and rotation
/// (`beta`) terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossState<T> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> Default for LossState<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(ALPHA_INIT),
            beta: T::lit(BETA_INIT),
        }
    }
}

/// Regression target `[p, log q]` per pose, with `q` moved to the
/// non-negative hemisphere first.
pub fn pose_targets<T: Scalar>(truth: &[Pose<f64>]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(truth.len() * 6);
    for pose in truth {
        let w = quat_log(&canonicalize(&pose.q))?;
        data.extend(pose.p.iter().chain(&w).map(|&x| T::lit(x)));
    }
    Tensor::new(&[truth.len(), 6], data)
}

/// Batch mean of `|p − p̂|₁ e^{−α} + α + |log q − log q̂|₁ e^{−β} + β`.
///
/// `alpha` and `beta` are `[1]`-shaped tape variables. A non-finite
/// prediction is reported as [`Error::NonFinite`]; the training loop turns it
/// into a diagnostic carrying the epoch and batch.
pub fn pose_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: &[Pose<f64>],
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    let b = truth.len();
    if b == 0 || tape.shape(pred) != [b, 6] {
        return Err(Error::dim(format!(
            "pose_loss: predictions {:?} do not match {b} poses",
            tape.shape(pred)
        )));
    }
    if !tape.value(pred).is_finite() {
        let row = tape
            .value(pred)
            .data()
            .chunks(6)
            .position(|r| r.iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::NonFinite {
            op: format!("pose prediction for batch row {row}"),
        });
    }
    let target = tape.constant(pose_targets(truth)?);
    let diff = tape.sub(pred, target)?;
    let diff = tape.abs(diff)?;
    let inv_b = T::lit(1.0 / b as f64);

    let term = |tape: &mut Tape<T>, start: usize, weight: Var| -> Result<Var> {
        let part = tape.narrow(diff, 1, start, 3)?;
        let l1 = tape.sum(part)?;
        let l1 = tape.scale(l1, inv_b)?;
        let neg = tape.scale(weight, -T::one())?;
        let e = tape.exp(neg)?;
        let weighted = tape.mul(l1, e)?;
        tape.add(weighted, weight)
    };
    let pos = term(tape, 0, alpha)?;
    let rot = term(tape, 3, beta)?;
    tape.add(pos, rot)
}
