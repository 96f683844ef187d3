//! Nested-loop attention used as an independent reference for the tape version.

use effloc::model::{sga_attention, AttentionVars, HeadVars};
use effloc::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

struct Head {
    q_w: Mat,
    q_b: Vec<f64>,
    k_w: Mat,
    v_w: Mat,
    v_b: Vec<f64>,
}

fn mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn row(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// y[j] = b[j] + sum_i x[i] w[i][j]
fn affine(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
    let cols = w[0].len();
    let mut y = vec![0.0; cols];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut acc = b.map_or(0.0, |b| b[j]);
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w[i][j];
        }
        *yj = acc;
    }
    y
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Reference output `[B][T][C]`.
fn reference(x: &[Vec<Vec<f64>>], heads: &[Head], proj_w: &Mat, proj_b: &[f64], literal: bool) -> Vec<Vec<Vec<f64>>> {
    let c = x[0][0].len();
    let g = c / heads.len();
    x.iter()
        .map(|tokens| {
            let t = tokens.len();
            let mut cat: Vec<Vec<f64>> = vec![Vec::new(); t];
            let mut prev: Option<Vec<Vec<f64>>> = None;
            for (j, h) in heads.iter().enumerate() {
                let input: Vec<Vec<f64>> = (0..t)
                    .map(|i| {
                        (0..g)
                            .map(|k| tokens[i][j * g + k] + prev.as_ref().map_or(0.0, |p| p[i][k]))
                            .collect()
                    })
                    .collect();
                let q: Mat = input.iter().map(|r| affine(r, &h.q_w, Some(&h.q_b))).collect();
                let k: Mat = input.iter().map(|r| affine(r, &h.k_w, None)).collect();
                let v: Mat = input.iter().map(|r| affine(r, &h.v_w, Some(&h.v_b))).collect();
                let scale = 1.0 / (q[0].len() as f64).sqrt();
                let out: Mat = (0..t)
                    .map(|a| {
                        let scores: Vec<f64> = (0..t)
                            .map(|b| q[a].iter().zip(&k[b]).map(|(x, y)| x * y).sum::<f64>() * scale)
                            .collect();
                        let w = softmax(&scores);
                        (0..v[0].len()).map(|d| (0..t).map(|b| w[b] * v[b][d]).sum()).collect()
                    })
                    .collect();
                for (i, o) in out.iter().enumerate() {
                    cat[i].extend_from_slice(o);
                }
                prev = Some(out);
            }
            cat.iter()
                .map(|r| {
                    let r = if literal { softmax(r) } else { r.clone() };
                    affine(&r, proj_w, Some(proj_b))
                })
                .collect()
        })
        .collect()
}

fn flat(m: &Mat) -> Tensor<f64> {
    Tensor::new(&[m.len(), m[0].len()], m.concat()).expect("rectangular")
}

fn vector(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).expect("vector")
}

/// Draws a random shape and parameter set, runs both implementations and
/// returns the largest absolute difference.
pub fn compare_random_case(rng: &mut ChaCha8Rng, literal: bool) -> effloc::Result<f64> {
    let n = rng.gen_range(1..=4);
    let c = n * rng.gen_range(1..=4);
    let b = rng.gen_range(1..=3);
    let t = rng.gen_range(1..=7);
    let qk = rng.gen_range(1..=5);
    let g = c / n;
    let heads: Vec<Head> = (0..n)
        .map(|_| Head {
            q_w: mat(g, qk, rng),
            q_b: row(qk, rng),
            k_w: mat(g, qk, rng),
            v_w: mat(g, g, rng),
            v_b: row(g, rng),
        })
        .collect();
    let proj_w = mat(c, c, rng);
    let proj_b = row(c, rng);
    let x: Vec<Vec<Vec<f64>>> = (0..b).map(|_| mat(t, c, rng)).collect();

    let mut tape = Tape::new();
    let vars = AttentionVars {
        heads: heads
            .iter()
            .map(|h| HeadVars {
                q_w: tape.constant(flat(&h.q_w)),
                q_b: tape.constant(vector(&h.q_b)),
                k_w: tape.constant(flat(&h.k_w)),
                v_w: tape.constant(flat(&h.v_w)),
                v_b: tape.constant(vector(&h.v_b)),
            })
            .collect(),
        proj_w: tape.constant(flat(&proj_w)),
        proj_b: tape.constant(vector(&proj_b)),
    };
    let data: Vec<f64> = x.iter().flatten().flatten().copied().collect();
    let tokens = tape.constant(Tensor::new(&[b, t, c], data)?);
    let out = sga_attention(&mut tape, tokens, &vars, literal, 0.0)?;
    let want: Vec<f64> = reference(&x, &heads, &proj_w, &proj_b, literal).into_iter().flatten().flatten().collect();
    let got = tape.value(out).data();
    Ok(got.iter().zip(&want).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}
