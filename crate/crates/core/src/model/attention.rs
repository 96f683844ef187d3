//! Grouped multi-head attention with the sequential head cascade.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Tape handles of one head's projections. Weights are `[in, out]`. Keys
/// carry no bias: it would add the same amount to every score of a row and
/// cancel in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub v_w: Var,
    pub v_b: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub heads: Vec<HeadVars>,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// `x · w + b` over the last axis.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let last = tape.shape(y).len() - 1;
    tape.bias_add(y, b, last)
}

/// Attention over tokens `[B, T, C]`.
///
/// The channels are split into `n` equal groups, one per head. Head `j` attends
/// over its own group plus the output of head `j − 1`; head outputs are
/// concatenated and mapped back to `C` channels by the output projection.
/// `score_offset` is added to every pre-softmax score (zero in normal use).
pub fn sga_attention<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    p: &AttentionVars,
    literal_outer_softmax: bool,
    score_offset: T,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("attention expects [B,T,C] tokens, got {shape:?}")));
    }
    let (c, n) = (shape[2], p.heads.len());
    if n == 0 || c % n != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split across {n} heads")));
    }
    let splits = tape.split(tokens, 2, &vec![c / n; n])?;

    let mut outs = Vec::with_capacity(n);
    let mut prev: Option<Var> = None;
    for (split, h) in splits.into_iter().zip(&p.heads) {
        let input = match prev {
            None => split,
            Some(o) => {
                if tape.shape(o) != tape.shape(split) {
                    return Err(Error::Config(format!(
                        "head output {:?} cannot feed the next split {:?}",
                        tape.shape(o),
                        tape.shape(split)
                    )));
                }
                tape.add(split, o)?
            }
        };
        let q = linear(tape, input, h.q_w, h.q_b)?;
        let k = tape.matmul(input, h.k_w)?;
        let v = linear(tape, input, h.v_w, h.v_b)?;
        let qk = tape.shape(q)[2];
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, T::one() / T::lit(qk as f64).sqrt())?;
        if score_offset != T::zero() {
            scores = tape.add_scalar(scores, score_offset)?;
        }
        let weights = tape.softmax(scores, 2)?;
        let o = tape.matmul(weights, v)?;
        outs.push(o);
        prev = Some(o);
    }

    let mut cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    if literal_outer_softmax {
        cat = tape.softmax(cat, 2)?;
    }
    linear(tape, cat, p.proj_w, p.proj_b)
}
