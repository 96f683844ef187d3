use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Plain-array attention parameters for the loop oracle.
struct Head {
    qw: Vec<Vec<f64>>,
    qb: Vec<f64>,
    kw: Vec<Vec<f64>>,
    vw: Vec<Vec<f64>>,
    vb: Vec<f64>,
}

struct Attn {
    heads: Vec<Head>,
    pw: Vec<Vec<f64>>,
    pb: Vec<f64>,
}

fn mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn vecr(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_attn(c: usize, n: usize, qk: usize, rng: &mut ChaCha8Rng) -> Attn {
    let cs = c / n;
    Attn {
        heads: (0..n)
            .map(|_| Head {
                qw: mat(cs, qk, rng),
                qb: vecr(qk, rng),
                kw: mat(cs, qk, rng),
                vw: mat(cs, cs, rng),
                vb: vecr(cs, rng),
            })
            .collect(),
        pw: mat(c, c, rng),
        pb: vecr(c, rng),
    }
}

fn flat(m: &[Vec<f64>]) -> Tensor<f64> {
    let (r, c) = (m.len(), m[0].len());
    Tensor::new(&[r, c], m.iter().flatten().copied().collect()).unwrap()
}

fn vt(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

fn bind_attn(tape: &mut Tape<f64>, a: &Attn) -> AttentionVars {
    AttentionVars {
        heads: a
            .heads
            .iter()
            .map(|h| HeadVars {
                q_w: tape.param(flat(&h.qw)),
                q_b: tape.param(vt(&h.qb)),
                k_w: tape.param(flat(&h.kw)),
                v_w: tape.param(flat(&h.vw)),
                v_b: tape.param(vt(&h.vb)),
            })
            .collect(),
        proj_w: tape.param(flat(&a.pw)),
        proj_b: tape.param(vt(&a.pb)),
    }
}

fn affine(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i][o]).sum::<f64>())
        .collect()
}

/// Literal per-sample, per-head, per-token loops.
fn oracle(x: &[Vec<Vec<f64>>], a: &Attn, literal: bool) -> Vec<Vec<Vec<f64>>> {
    let n = a.heads.len();
    let c = x[0][0].len();
    let cs = c / n;
    let mut out = Vec::new();
    for sample in x {
        let t = sample.len();
        let mut prev: Option<Vec<Vec<f64>>> = None;
        let mut cat = vec![Vec::new(); t];
        for (j, h) in a.heads.iter().enumerate() {
            let input: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    (0..cs)
                        .map(|ch| sample[i][j * cs + ch] + prev.as_ref().map_or(0.0, |p| p[i][ch]))
                        .collect()
                })
                .collect();
            let q: Vec<Vec<f64>> = input.iter().map(|r| affine(r, &h.qw, &h.qb)).collect();
            let k: Vec<Vec<f64>> = input.iter().map(|r| affine(r, &h.kw, &vec![0.0; h.kw[0].len()])).collect();
            let v: Vec<Vec<f64>> = input.iter().map(|r| affine(r, &h.vw, &h.vb)).collect();
            let scale = 1.0 / (q[0].len() as f64).sqrt();
            let mut o = vec![vec![0.0; cs]; t];
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|m| q[i].iter().zip(&k[m]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for m in 0..t {
                    for ch in 0..cs {
                        o[i][ch] += e[m] / z * v[m][ch];
                    }
                }
            }
            for i in 0..t {
                cat[i].extend_from_slice(&o[i]);
            }
            prev = Some(o);
        }
        if literal {
            for row in &mut cat {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
            }
        }
        out.push(cat.iter().map(|r| affine(r, &a.pw, &a.pb)).collect());
    }
    out
}

fn run_attn(x: &[Vec<Vec<f64>>], a: &Attn, literal: bool, offset: f64) -> Vec<f64> {
    let (b, t, c) = (x.len(), x[0].len(), x[0][0].len());
    let data: Vec<f64> = x.iter().flatten().flatten().copied().collect();
    let mut tape = Tape::new();
    let xv = tape.param(Tensor::new(&[b, t, c], data).unwrap());
    let av = bind_attn(&mut tape, a);
    let y = sga_attention(&mut tape, xv, &av, literal, offset).unwrap();
    assert_eq!(tape.shape(y), &[b, t, c]);
    tape.value(y).data().to_vec()
}

fn random_tokens(b: usize, t: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    (0..b).map(|_| mat(t, c, rng)).collect()
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..50 {
        let n = 1 + case % 4;
        let cs = rng.gen_range(1..4);
        let (b, t, qk) = (rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..5));
        let a = random_attn(n * cs, n, qk, &mut rng);
        let x = random_tokens(b, t, n * cs, &mut rng);
        for literal in [false, true] {
            let got = run_attn(&x, &a, literal, 0.0);
            let want: Vec<f64> = oracle(&x, &a, literal).into_iter().flatten().flatten().collect();
            let diff = got.iter().zip(&want).fold(0.0_f64, |m, (g, w)| m.max((g - w).abs()));
            assert!(diff < 1e-10, "case {case}: diff {diff}");
        }
    }
}

#[test]
fn attention_on_random_1x8x2x2_with_two_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let a = random_attn(8, 2, 16, &mut rng);
    let x = random_tokens(1, 4, 8, &mut rng);
    let got = run_attn(&x, &a, false, 0.0);
    let want: Vec<f64> = oracle(&x, &a, false).into_iter().flatten().flatten().collect();
    assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-10));
}

#[test]
fn single_token_reduces_to_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    // one head: output is exactly proj(v(x))
    let a = random_attn(4, 1, 3, &mut rng);
    let x = random_tokens(2, 1, 4, &mut rng);
    let got = run_attn(&x, &a, false, 0.0);
    for (s, sample) in x.iter().enumerate() {
        let v = affine(&sample[0], &a.heads[0].vw, &a.heads[0].vb);
        let want = affine(&v, &a.pw, &a.pb);
        for ch in 0..4 {
            assert_eq!(got[s * 4 + ch], want[ch]);
        }
    }
    // cascaded heads: each head is its value map of split + previous output
    let a = random_attn(6, 3, 2, &mut rng);
    let x = random_tokens(1, 1, 6, &mut rng);
    let got = run_attn(&x, &a, false, 0.0);
    let mut prev = vec![0.0; 2];
    let mut cat = Vec::new();
    for (j, h) in a.heads.iter().enumerate() {
        let inp: Vec<f64> = (0..2).map(|c| x[0][0][j * 2 + c] + prev[c]).collect();
        prev = affine(&inp, &h.vw, &h.vb);
        cat.extend_from_slice(&prev);
    }
    let want = affine(&cat, &a.pw, &a.pb);
    for ch in 0..6 {
        assert!((got[ch] - want[ch]).abs() < 1e-12);
    }
}

#[test]
fn cascade_with_silent_first_head_sees_raw_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut a = random_attn(4, 2, 3, &mut rng);
    a.heads[0].vw = vec![vec![0.0; 2]; 2];
    a.heads[0].vb = vec![0.0; 2];
    let x = random_tokens(1, 3, 4, &mut rng);
    let got = run_attn(&x, &a, false, 0.0);

    // head 2 alone, run as a single-head attention on the raw second split
    let solo = Attn {
        heads: vec![Head {
            qw: a.heads[1].qw.clone(),
            qb: a.heads[1].qb.clone(),
            kw: a.heads[1].kw.clone(),
            vw: a.heads[1].vw.clone(),
            vb: a.heads[1].vb.clone(),
        }],
        pw: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        pb: vec![0.0; 2],
    };
    let split: Vec<Vec<Vec<f64>>> = vec![x[0].iter().map(|r| r[2..].to_vec()).collect()];
    let head2 = oracle(&split, &solo, false);
    let mut cat = Vec::new();
    for i in 0..3 {
        let mut row = vec![0.0, 0.0];
        row.extend_from_slice(&head2[0][i]);
        cat.extend(affine(&row, &a.pw, &a.pb));
    }
    assert!(got.iter().zip(&cat).all(|(g, w)| (g - w).abs() < 1e-12));
}

#[test]
fn attention_invariant_to_score_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let a = random_attn(6, 3, 4, &mut rng);
    let x = random_tokens(2, 5, 6, &mut rng);
    let base = run_attn(&x, &a, false, 0.0);
    let shifted = run_attn(&x, &a, false, 37.5);
    assert!(base.iter().zip(&shifted).all(|(b, s)| (b - s).abs() < 1e-12));
}

#[test]
fn attention_rejects_bad_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let a = random_attn(4, 2, 2, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[1, 2, 5], &mut rng));
    let av = bind_attn(&mut tape, &a);
    assert!(matches!(sga_attention(&mut tape, x, &av, false, 0.0), Err(Error::Config(_))));
}

fn tiny() -> EffLocModel<f64> {
    EffLocModel::new(ModelConfig::tiny(), 7).unwrap()
}

#[test]
fn tiny_forward_shape_and_eval_determinism() {
    let mut m = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 3, 64, 64], &mut rng);
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), &[2, 6]);
    m.set_mode(Mode::Eval);
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert_eq!(a, b);
    let bad = rand_tensor(&[2, 3, 32, 32], &mut rng);
    assert!(matches!(m.predict(&bad), Err(Error::Dimension(_))));
}

#[test]
fn parameter_names_unique_and_counted() {
    let m = tiny();
    let mut names: Vec<&str> = m.params.names().collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    assert_eq!(m.num_params(), m.params.iter().map(|(_, t)| t.numel()).sum::<usize>());
}

#[test]
fn embedding_shape_and_overlap() {
    let mut m = tiny();
    m.set_mode(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[1, 3, 64, 64], &mut rng);
    let embed = |img: &Tensor<f64>| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let v = tape.constant(img.clone());
        let mut st = ForwardState::new(0);
        let y = m.forward_embed(&mut tape, &b, v, &mut st).unwrap();
        tape.value(y).clone()
    };
    let base = embed(&x);
    assert_eq!(base.shape(), &[1, 16, 8, 8]);

    // output (1,1) owns the 8×8 tile [8,16)²; pixel (5,5) lies outside it
    let mut probe = x.clone();
    probe.data_mut()[5 * 64 + 5] += 1.0;
    let moved = embed(&probe);
    let changed = (0..16).any(|c| moved.get(&[0, c, 1, 1]) != base.get(&[0, c, 1, 1]));
    assert!(changed);
    // far pixels do not reach it
    let mut far = x.clone();
    far.data_mut()[40 * 64 + 40] += 1.0;
    let moved = embed(&far);
    assert!((0..16).all(|c| moved.get(&[0, c, 1, 1]) == base.get(&[0, c, 1, 1])));
}

#[test]
fn zero_block_is_identity() {
    let mut m = tiny();
    m.set_mode(Mode::Eval);
    let names: Vec<String> = m
        .params
        .names()
        .filter(|n| n.starts_with("stages.0.blocks.0."))
        .map(str::to_string)
        .collect();
    for n in &names {
        let t = m.params.get_mut(n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 16, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let mut st = ForwardState::new(0);
    let y = m.forward_block(&mut tape, &b, xv, 0, 0, &mut st).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn extra_ffn_pair_adds_exact_parameters() {
    let mut c1 = ModelConfig::tiny();
    c1.ffn_count = 1;
    let mut c2 = c1.clone();
    c2.ffn_count = 2;
    let p1 = EffLocModel::<f64>::new(c1.clone(), 0).unwrap().num_params();
    let p2 = EffLocModel::<f64>::new(c2, 0).unwrap().num_params();
    // one side of a block gains: dw k×k + BN(2C) + BN(2C) + fc1 (C·eC + eC) + fc2 (eC·C + C)
    let pair = |c: usize| {
        let (k, e) = (c1.dw_kernel, c1.ffn_expansion);
        c * k * k + 4 * c + 2 * c * e * c + e * c + c
    };
    let want: usize = (0..3).map(|s| c1.depths[s] * 2 * pair(c1.widths[s])).sum();
    assert_eq!(p2 - p1, want);
}

#[test]
fn batch_permutation_equivariance() {
    let mut cfg = ModelConfig::tiny();
    cfg.dropout_p = 0.0;
    let mut m = EffLocModel::<f64>::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[3, 3, 64, 64], &mut rng);
    let per = 3 * 64 * 64;
    let order = [2, 0, 1];
    let mut xp = Vec::new();
    for &i in &order {
        xp.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let xp = Tensor::new(&[3, 3, 64, 64], xp).unwrap();
    for mode in [Mode::Eval, Mode::Train] {
        m.set_mode(mode);
        let y = m.predict(&x).unwrap();
        let yp = m.predict(&xp).unwrap();
        for (r, &i) in order.iter().enumerate() {
            for k in 0..6 {
                assert!((yp.get(&[r, k]) - y.get(&[i, k])).abs() < 1e-12, "{mode:?}");
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let m = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[4, 3, 64, 64], &mut rng);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, true);
    let xv = tape.constant(x);
    let mut st = ForwardState::new(11);
    let y = m.forward(&mut tape, &b, xv, &mut st).unwrap();
    let target = tape.constant(rand_tensor(&[4, 6], &mut rng));
    let d = tape.sub(y, target).unwrap();
    let d = tape.abs(d).unwrap();
    let loss = tape.mean(d).unwrap();
    tape.backward(loss).unwrap();
    for ((name, _), g) in m.params.iter().zip(m.gradients(&tape, &b)) {
        assert!(g.iter().any(|v| *v != 0.0), "no gradient reaches {name}");
    }
}

#[test]
fn running_moments_update() {
    let mut m = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 64, 64], &mut rng);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let xv = tape.constant(x);
    let mut st = ForwardState::new(0);
    m.forward(&mut tape, &b, xv, &mut st).unwrap();
    let n_bn = m.buffers.len() / 2;
    assert_eq!(st.bn_updates.len(), n_bn);
    let before = m.buffers.clone();
    m.commit_bn(&st.bn_updates).unwrap();
    let u = &st.bn_updates[0];
    let rm = m.buffers.get(&format!("{}.running_mean", u.prefix)).unwrap();
    assert_eq!(rm.data()[0], 0.9 * 0.0 + 0.1 * u.mean[0]);
    assert_ne!(before, m.buffers);
}

#[test]
fn init_statistics() {
    let m = EffLocModel::<f64>::new(ModelConfig::effloc_xs(), 0).unwrap();
    let w = m.params.get("head.fc0.weight").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // a normal truncated at 2σ has standard deviation ≈ 0.88σ
    assert!((sd / INIT_STD - 0.88).abs() < 0.02, "sd {sd}");
    assert!(m.params.get("head.fc0.bias").unwrap().data().iter().all(|v| *v == 0.0));
    assert!(m.params.get("stem.0.bn.weight").unwrap().data().iter().all(|v| *v == 1.0));
}
