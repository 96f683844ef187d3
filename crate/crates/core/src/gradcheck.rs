//! Central finite-difference gradient checking.
//!
//! Numeric gradients here are computed from forward evaluations only, so they
//! stay independent of the tape's backward rules they are used to verify.
//! Errors are reported per tensor as `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; when both
//! norms are below `1e-12` the error is taken as zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Finite-difference step used throughout the suites.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.rel_error < tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    GradCheck {
        name: name.into(),
        numel: analytic.len(),
        rel_error: relative_error(analytic, numeric),
        max_abs_diff: analytic
            .iter()
            .zip(numeric)
            .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs())),
    }
}

/// Central differences of a scalar function with respect to every element of
/// `inputs[which]`. Elements are evaluated in parallel; each evaluation works
/// on its own copy of the inputs.
pub fn numeric_gradient<T, F>(inputs: &[Tensor<T>], which: usize, f: &F, h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<T> + Sync,
{
    let n = inputs[which].numel();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut local = inputs.to_vec();
            let x0 = local[which].data()[i];
            local[which].data_mut()[i] = x0 + h;
            let fp = f(&local)?;
            local[which].data_mut()[i] = x0 - h;
            let fm = f(&local)?;
            Ok((fp - fm) / (h + h))
        })
        .collect()
}

/// Fixed pseudo-random projection used to reduce a tensor-valued op to a scalar.
fn projection<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0)))
}

fn project<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    if tape.value(y).numel() == 1 {
        return Ok(y);
    }
    let w = tape.constant(projection(tape.shape(y), 0x5eed));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Checks the backward rule of a tape-built function against central
/// differences, for every input tensor. Tensor-valued outputs are reduced with
/// a fixed random projection first.
pub fn check_op<T, F>(inputs: &[Tensor<T>], build: F, h: T) -> Result<Vec<GradCheck>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let loss = project(&mut tape, y)?;
    tape.backward(loss)?;

    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = build(&mut tape, &vars)?;
        let loss = project(&mut tape, y)?;
        Ok(tape.value(loss).item())
    };

    let mut out = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_gradient(inputs, i, &eval, h)?;
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let numeric: Vec<f64> = numeric.iter().map(|x| x.as_f64()).collect();
        out.push(compare(format!("input{i}"), &analytic, &numeric));
    }
    Ok(out)
}
