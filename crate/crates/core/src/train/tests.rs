use super::*;
use crate::geometry::{canonicalize, quat_log, UnitQuaternion};

fn pose(p: [f64; 3], axis: [f64; 3], angle: f64) -> Pose<f64> {
    Pose {
        p,
        q: UnitQuaternion::from_axis_angle(axis, angle).unwrap(),
    }
}

fn loss_value(pred: &[f64], truth: &[Pose<f64>], ls: LossState<f64>) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(&[truth.len(), 6], pred.to_vec()).unwrap());
    let a = tape.param(Tensor::scalar(ls.alpha));
    let b = tape.param(Tensor::scalar(ls.beta));
    let l = pose_loss(&mut tape, p, truth, a, b).unwrap();
    tape.backward(l).unwrap();
    (tape.value(l).item(), tape.grad(a).unwrap()[0], tape.grad(b).unwrap()[0])
}

#[test]
fn perfect_prediction_gives_alpha_plus_beta() {
    let truth = vec![pose([0.3, -0.2, 0.9], [0.0, 1.0, 0.2], 0.4), pose([1.0, 0.0, -1.0], [1.0, 0.0, 0.0], 2.5)];
    let pred = pose_targets::<f64>(&truth).unwrap().into_data();
    let (l, da, db) = loss_value(&pred, &truth, LossState::default());
    assert_eq!(l, -6.0);
    assert_eq!(da, 1.0);
    assert_eq!(db, 1.0);
}

#[test]
fn unit_position_error_with_zero_weights() {
    let truth = vec![Pose {
        p: [0.0; 3],
        q: UnitQuaternion::identity(),
    }];
    let (l, _, _) = loss_value(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &truth, LossState { alpha: 0.0, beta: 0.0 });
    assert_eq!(l, 1.0);
}

#[test]
fn alpha_gradient_matches_differences_and_closed_form() {
    let truth = vec![pose([0.1, 0.2, 0.3], [0.0, 0.0, 1.0], 0.3), pose([-0.5, 0.4, 0.0], [1.0, 1.0, 0.0], 1.1)];
    let pred = vec![0.3, 0.1, 0.2, 0.05, -0.02, 0.1, -0.4, 0.2, 0.3, 0.2, 0.3, -0.1];
    let ls = LossState { alpha: -1.3, beta: 0.4 };
    let (_, da, db) = loss_value(&pred, &truth, ls);
    let h = 1e-5;
    let f = |a: f64, b: f64| loss_value(&pred, &truth, LossState { alpha: a, beta: b }).0;
    let fd_a = (f(ls.alpha + h, ls.beta) - f(ls.alpha - h, ls.beta)) / (2.0 * h);
    let fd_b = (f(ls.alpha, ls.beta + h) - f(ls.alpha, ls.beta - h)) / (2.0 * h);
    assert!((da - fd_a).abs() < 1e-8, "{da} vs {fd_a}");
    assert!((db - fd_b).abs() < 1e-8, "{db} vs {fd_b}");

    // 1 − mean |p − p̂|₁ e^{−α}
    let target = pose_targets::<f64>(&truth).unwrap();
    let l1: f64 = (0..2)
        .map(|i| (0..3).map(|j| (pred[6 * i + j] - target.data()[6 * i + j]).abs()).sum::<f64>())
        .sum::<f64>()
        / 2.0;
    assert!((da - (1.0 - l1 * (-ls.alpha).exp())).abs() < 1e-12);
}

#[test]
fn loss_ignores_quaternion_sign() {
    let a = pose([0.1, 0.2, 0.3], [0.3, -1.0, 0.5], 2.9);
    let b = Pose { p: a.p, q: a.q.neg() };
    let pred = [0.0, 0.1, 0.2, 0.3, -0.2, 0.1];
    let ls = LossState::default();
    assert_eq!(loss_value(&pred, &[a], ls).0, loss_value(&pred, &[b], ls).0);
    let w = quat_log(&canonicalize(&b.q)).unwrap();
    assert_eq!(pose_targets::<f64>(&[b]).unwrap().data()[3..], w[..]);
}

#[test]
fn non_finite_prediction_is_rejected() {
    let truth = vec![pose([0.0; 3], [0.0, 0.0, 1.0], 0.1); 2];
    let mut tape = Tape::new();
    let mut d = vec![0.0; 12];
    d[8] = f64::NAN;
    let p = tape.constant(Tensor::new(&[2, 6], d).unwrap());
    let a = tape.constant(Tensor::scalar(0.0));
    let b = tape.constant(Tensor::scalar(0.0));
    match pose_loss(&mut tape, p, &truth, a, b) {
        Err(Error::NonFinite { op }) => assert!(op.contains("row 1"), "{op}"),
        other => panic!("{other:?}"),
    }
    let e = training_error(3, 7, Error::NonFinite { op: "loss".into() });
    assert!(e.to_string().contains('3') && e.to_string().contains('7'), "{e}");
}

#[test]
fn adamw_examples() {
    // zero gradient, zero decay: unchanged
    let mut p = [0.7, -1.2];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0).unwrap();
    assert_eq!(p, [0.7, -1.2]);

    // unit gradient: m̂ = 1, v̂ = 1, step = lr / (1 + ε)
    let mut p = [2.0f64];
    let (mut m, mut v) = ([0.0], [0.0]);
    adamw_step(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.0).unwrap();
    let expected = 2.0 - 0.1 / (1.0 + 1e-8);
    assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    assert!((2.0 - p[0] - 0.1).abs() < 1e-8);

    // decoupled decay
    let mut p = [1.0f64];
    let (mut m, mut v) = ([0.0], [0.0]);
    adamw_step(&mut p, &[0.0], &mut m, &mut v, 1, 1.0, 0.1).unwrap();
    assert!((p[0] - 0.9).abs() < 1e-15);

    assert!(adamw_step(&mut p, &[0.0], &mut m, &mut v, 0, 1.0, 0.1).is_err());
}

#[test]
fn adamw_matches_hand_rolled_recursion() {
    let grads = [0.5, -0.3, 0.8, 0.1];
    let (lr, wd) = (0.01, 0.05);
    let mut p = [0.4];
    let (mut m, mut v) = ([0.0], [0.0]);
    let (mut rp, mut rm, mut rv): (f64, f64, f64) = (0.4, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        adamw_step(&mut p, &[g], &mut m, &mut v, t as u64, lr, wd).unwrap();
        rp *= 1.0 - lr * wd;
        rm = 0.9 * rm + 0.1 * g;
        rv = 0.999 * rv + 0.001 * g * g;
        rp -= lr * (rm / (1.0 - 0.9f64.powi(t))) / ((rv / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    assert!((p[0] - rp).abs() < 1e-14);
}

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 30, 1e-3).unwrap(), 1e-3);
    assert!((cosine_lr(15, 30, 1e-3).unwrap() - 5e-4).abs() < 1e-18);
    let last = cosine_lr(29, 30, 1e-3).unwrap();
    assert!(last > 0.0 && last < 1e-5);
    assert!(cosine_lr(30, 30, 1e-3).is_err());
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g: Vec<Vec<f64>> = vec![vec![3.0], vec![4.0, 0.0]];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
}

#[test]
fn train_config_round_trips() {
    let c = TrainConfig {
        grad_clip: Some(2.5),
        seed: 9,
        ..TrainConfig::default()
    };
    assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    assert_eq!(TrainConfig::from_kv(&TrainConfig::default().to_kv()).unwrap(), TrainConfig::default());
    assert!(TrainConfig::from_kv("train.batch_size = 0").is_err());
    assert!(TrainConfig::from_kv("train.speed = 3").is_err());
}

#[test]
fn zero_lr_step_leaves_parameters_untouched() {
    let model = EffLocModel::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    let mut st = TrainState::new(model);
    let before = st.clone();
    let images = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 37) % 255) as f64 / 127.5 - 1.0);
    let poses = vec![pose([0.1, 0.0, 0.2], [0.0, 1.0, 0.0], 0.2), pose([-0.3, 0.5, 0.0], [1.0, 0.0, 0.0], 0.3)];
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    st.step_batch(images, &poses, 0.0, &cfg, 1).unwrap();
    assert_eq!(st.model.params, before.model.params);
    assert_eq!(st.loss, before.loss);
    assert_eq!(st.step, 1);
}

#[test]
fn state_checkpoint_round_trip() {
    let model = EffLocModel::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    let mut st = TrainState::new(model);
    st.epoch = 2;
    st.step = 17;
    st.loss.alpha = -4.5;
    st.m[3][0] = 0.25;
    st.v.last_mut().unwrap()[0] = 1e-3;
    st.model.buffers.tensor_mut(0).data_mut()[0] = 0.5;
    let cfg = TrainConfig {
        seed: 77,
        ..TrainConfig::default()
    };
    let ck = st.to_checkpoint(&cfg);
    let bytes = crate::checkpoint::encode(&ck);
    let (back, cfg_back) = TrainState::from_checkpoint(&crate::checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(cfg_back, cfg);
    assert_eq!(back.model.params, st.model.params);
    assert_eq!(back.model.buffers, st.model.buffers);
    assert_eq!((back.m, back.v), (st.m.clone(), st.v.clone()));
    assert_eq!((back.epoch, back.step, back.loss), (2, 17, st.loss));
    assert_eq!(crate::checkpoint::encode(&back_state_ck(&bytes)), bytes);

    let mut broken = ck.clone();
    broken.tensors.retain(|(n, _)| n != "loss/beta");
    assert!(TrainState::from_checkpoint(&broken).is_err());
}

fn back_state_ck(bytes: &[u8]) -> Checkpoint {
    let (st, cfg) = TrainState::from_checkpoint(&crate::checkpoint::decode(bytes).unwrap()).unwrap();
    st.to_checkpoint(&cfg)
}
