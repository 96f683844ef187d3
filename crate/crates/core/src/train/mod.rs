//! Training loop, evaluation and training-state checkpoints.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use loss::{pose_loss, pose_targets, LossState, ALPHA_INIT, BETA_INIT};
pub use optim::{adamw_step, clip_global_norm, cosine_lr, BETA1, BETA2, EPSILON};

use crate::checkpoint::Checkpoint;
use crate::data::{splitmix64, Dataset, JitterStrengths, PoseSample, Split};
use crate::error::{Error, Result};
use crate::geometry::{quat_exp, trajectory_stats, Pose, TrajectoryStats, UnitQuaternion};
use crate::gradcheck::{compare, GradCheck};
use crate::model::{parse_kv, EffLocModel, ForwardState, Mode, ModelConfig};
use crate::tensor::{Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_median_pos,val_mean_pos,val_median_rot_deg,val_mean_rot_deg";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.eflc";
const EVAL_BATCH: usize = 32;

/// Hash of a tuple of integers, used to derive independent random streams.
fn stream(parts: &[u64]) -> u64 {
    parts.iter().fold(0x0eff_10c5_eed5_u64, |h, &p| splitmix64(h ^ p))
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub jitter: JitterStrengths,
}

/// Desk-scale defaults for the Tiny model on the synthetic scene. The loss
/// weights start far from balance and move by at most about `lr` per step, so
/// short runs need a larger rate and more steps than full-scale training.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 3.5e-2,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            checkpoint_every: 5,
            grad_clip: None,
            jitter: JitterStrengths {
                brightness: 0.1,
                contrast: 0.1,
                saturation: 0.1,
                hue: 0.0,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        self.jitter.validate()
    }

    /// `train.`-prefixed `key = value` lines.
    pub fn to_kv(&self) -> String {
        let j = &self.jitter;
        let mut s = String::new();
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let clip = self.grad_clip.map_or("none".to_string(), |c| c.to_string());
        let _ = writeln!(s, "train.grad_clip = {clip}");
        let _ = writeln!(
            s,
            "train.jitter = {},{},{},{}",
            j.brightness, j.contrast, j.saturation, j.hue
        );
        s
    }

    /// Reads the `train.` keys of a config block, ignoring everything else.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{k}'")))
        };
        let int = |k: &str, v: &str| -> Result<u64> {
            v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{k}'")))
        };
        for (k, v) in parse_kv(text)? {
            let Some(key) = k.strip_prefix("train.") else { continue };
            match key {
                "lr" => c.lr = num(&k, &v)?,
                "weight_decay" => c.weight_decay = num(&k, &v)?,
                "batch_size" => c.batch_size = int(&k, &v)? as usize,
                "epochs" => c.epochs = int(&k, &v)? as usize,
                "seed" => c.seed = int(&k, &v)?,
                "checkpoint_every" => c.checkpoint_every = int(&k, &v)? as usize,
                "grad_clip" => c.grad_clip = if v == "none" { None } else { Some(num(&k, &v)?) },
                "jitter" => {
                    let parts = v.split(',').map(|p| num(&k, p.trim())).collect::<Result<Vec<_>>>()?;
                    let [b, ct, s, h] = parts[..] else {
                        return Err(Error::Config(format!("'{k}' needs four values, got '{v}'")));
                    };
                    c.jitter = JitterStrengths {
                        brightness: b,
                        contrast: ct,
                        saturation: s,
                        hue: h,
                    };
                }
                _ => return Err(Error::Config(format!("unknown config key '{k}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: EffLocModel<f64>,
    pub loss: LossState<f64>,
    /// First and second moments: one entry per model parameter, then alpha
    /// and beta.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: EffLocModel<f64>) -> Self {
        let mut m: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        m.push(vec![0.0]);
        m.push(vec![0.0]);
        Self {
            model,
            loss: LossState::default(),
            v: m.clone(),
            m,
            step: 0,
            epoch: 0,
        }
    }

    /// One forward/backward/update on a prepared batch. Returns the loss.
    pub fn step_batch(
        &mut self,
        images: Tensor<f64>,
        poses: &[Pose<f64>],
        lr: f64,
        cfg: &TrainConfig,
        dropout_seed: u64,
    ) -> Result<f64> {
        let model = &mut self.model;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let alpha = tape.param(Tensor::scalar(self.loss.alpha));
        let beta = tape.param(Tensor::scalar(self.loss.beta));
        let x = tape.constant(images);
        let mut fs = ForwardState::new(dropout_seed);
        let pred = model.forward(&mut tape, &bound, x, &mut fs)?;
        let loss = pose_loss(&mut tape, pred, poses, alpha, beta)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        tape.backward(loss)?;

        let mut grads = model.gradients(&tape, &bound);
        grads.push(tape.grad(alpha).map_or(vec![0.0], <[f64]>::to_vec));
        grads.push(tape.grad(beta).map_or(vec![0.0], <[f64]>::to_vec));
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }

        self.step += 1;
        let n = model.params.len();
        for (i, (_, t)) in model.params.iter_mut().enumerate() {
            adamw_step(t.data_mut(), &grads[i], &mut self.m[i], &mut self.v[i], self.step, lr, cfg.weight_decay)?;
        }
        let mut a = [self.loss.alpha];
        adamw_step(&mut a, &grads[n], &mut self.m[n], &mut self.v[n], self.step, lr, 0.0)?;
        let mut b = [self.loss.beta];
        adamw_step(&mut b, &grads[n + 1], &mut self.m[n + 1], &mut self.v[n + 1], self.step, lr, 0.0)?;
        self.loss = LossState { alpha: a[0], beta: b[0] };

        model.commit_bn(&fs.bn_updates)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut config = self.model.config.to_kv();
        let _ = writeln!(config, "state.epoch = {}", self.epoch);
        let _ = writeln!(config, "state.step = {}", self.step);
        config.push_str(&cfg.to_kv());

        let mut tensors = Vec::new();
        for (name, t) in self.model.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (name, t) in self.model.buffers.iter() {
            tensors.push((format!("buf/{name}"), t.clone()));
        }
        tensors.push(("loss/alpha".into(), Tensor::scalar(self.loss.alpha)));
        tensors.push(("loss/beta".into(), Tensor::scalar(self.loss.beta)));
        for (which, moments) in [("m", &self.m), ("v", &self.v)] {
            for (name, mom) in self.moment_names().iter().zip(moments) {
                let t = Tensor::new(&[mom.len()], mom.clone()).expect("flat moment");
                tensors.push((format!("opt/{which}/{name}"), t));
            }
        }
        Checkpoint { config, tensors }
    }

    fn moment_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.model.params.names().map(str::to_string).collect();
        names.push("loss/alpha".into());
        names.push("loss/beta".into());
        names
    }

    /// Restores the full training state, plus the training config it was
    /// saved with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let model = model_from_checkpoint(ck)?;
        let mut st = Self::new(model);
        let mut epoch = None;
        let mut step = None;
        for (k, v) in parse_kv(&ck.config)? {
            let parse = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| Error::Data(format!("checkpoint: invalid '{k}' value '{v}'")))
            };
            match k.as_str() {
                "state.epoch" => epoch = Some(parse(&v)? as usize),
                "state.step" => step = Some(parse(&v)?),
                _ => {}
            }
        }
        st.epoch = epoch.ok_or_else(|| Error::Data("checkpoint has no 'state.epoch'".into()))?;
        st.step = step.ok_or_else(|| Error::Data("checkpoint has no 'state.step'".into()))?;
        st.loss = LossState {
            alpha: required(ck, "loss/alpha", &[1])?.item(),
            beta: required(ck, "loss/beta", &[1])?.item(),
        };
        for (i, name) in st.moment_names().iter().enumerate() {
            let len = st.m[i].len();
            st.m[i] = required(ck, &format!("opt/m/{name}"), &[len])?.data().to_vec();
            st.v[i] = required(ck, &format!("opt/v/{name}"), &[len])?.data().to_vec();
        }
        let cfg = TrainConfig::from_kv(&ck.config)?;
        Ok((st, cfg))
    }
}

fn required<'a>(ck: &'a Checkpoint, name: &str, shape: &[usize]) -> Result<&'a Tensor<f64>> {
    let t = ck
        .get(name)
        .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor '{name}'")))?;
    if t.shape() != shape {
        return Err(Error::Data(format!(
            "checkpoint tensor '{name}' has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Model parameters and running moments from a checkpoint, in eval mode.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<EffLocModel<f64>> {
    let config = ModelConfig::from_kv_skipping(&ck.config, &["state.", "train."])?;
    let mut model = EffLocModel::new(config, 0)?;
    for (name, t) in model.params.iter_mut() {
        *t = required(ck, name, &t.shape().to_vec())?.clone();
    }
    for (name, t) in model.buffers.iter_mut() {
        *t = required(ck, &format!("buf/{name}"), &t.shape().to_vec())?.clone();
    }
    model.set_mode(Mode::Eval);
    Ok(model)
}

/// Stacks `[3,R,R]` samples into one `[B,3,R,R]` batch.
pub fn stack_batch(samples: &[PoseSample<f64>]) -> Result<(Tensor<f64>, Vec<Pose<f64>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let s = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for p in samples {
        if p.image.shape() != s.as_slice() {
            return Err(Error::dim(format!("sample {} has shape {:?}, expected {s:?}", p.id, p.image.shape())));
        }
        data.extend_from_slice(p.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend(s);
    Ok((Tensor::new(&shape, data)?, samples.iter().map(|p| p.pose).collect()))
}

fn output_to_pose(row: &[f64]) -> Pose<f64> {
    Pose {
        p: [row[0], row[1], row[2]],
        q: quat_exp(&[row[3], row[4], row[5]]),
    }
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub pred: Pose<f64>,
    pub truth: Pose<f64>,
    pub position_error: f64,
    pub rotation_error_deg: f64,
}

pub const EVAL_HEADER: &str = "id,pred_px,pred_py,pred_pz,pred_qw,pred_qx,pred_qy,pred_qz,position_error,rotation_error_deg";

impl EvalRow {
    pub fn csv(&self) -> String {
        let (p, q) = (&self.pred.p, &self.pred.q);
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.id, p[0], p[1], p[2], q.u, q.v[0], q.v[1], q.v[2], self.position_error, self.rotation_error_deg
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    /// `None` when the split is empty.
    pub stats: Option<TrajectoryStats<f64>>,
}

/// Central-crop predictions on one split, in eval mode. The model's mode is
/// restored afterwards.
pub fn evaluate(model: &mut EffLocModel<f64>, data: &Dataset, split: Split) -> Result<Evaluation> {
    let crop = data.scene.crop;
    if crop != model.config.input_resolution {
        return Err(Error::Config(format!(
            "dataset crop {crop} does not match model input resolution {}",
            model.config.input_resolution
        )));
    }
    let idx = data.indices(split);
    let prev = model.mode;
    model.set_mode(Mode::Eval);
    let m = &*model;
    let chunks: Result<Vec<Vec<EvalRow>>> = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let samples = chunk
                .iter()
                .map(|&i| data.samples[i].eval_sample::<f64>(crop))
                .collect::<Result<Vec<_>>>()?;
            let (images, truth) = stack_batch(&samples)?;
            let out = m.predict(&images)?;
            Ok(out
                .data()
                .chunks(6)
                .zip(samples.iter().zip(truth))
                .map(|(row, (s, t))| {
                    let pred = output_to_pose(row);
                    EvalRow {
                        id: s.id.clone(),
                        position_error: pred.position_error(&t),
                        rotation_error_deg: pred.rotation_error_deg(&t),
                        pred,
                        truth: t,
                    }
                })
                .collect())
        })
        .collect();
    model.set_mode(prev);
    let rows: Vec<EvalRow> = chunks?.into_iter().flatten().collect();
    let stats = if rows.is_empty() {
        None
    } else {
        let pred: Vec<_> = rows.iter().map(|r| r.pred).collect();
        let truth: Vec<_> = rows.iter().map(|r| r.truth).collect();
        Some(trajectory_stats(&pred, &truth)?)
    };
    Ok(Evaluation { rows, stats })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<TrajectoryStats<f64>>,
}

impl EpochLog {
    pub fn csv(&self) -> String {
        let v = self.val.map_or([f64::NAN; 4], |s| {
            [s.median_position, s.mean_position, s.median_rotation_deg, s.mean_rotation_deg]
        });
        format!("{},{},{},{},{},{},{}", self.epoch, self.lr, self.train_loss, v[0], v[1], v[2], v[3])
    }
}

pub fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.eflc"))
}

/// Rewrites the log so that it holds the header and rows up to `epoch`.
fn reset_log(path: &Path, epoch: usize) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    if epoch > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let e: Option<usize> = line.split(',').next().and_then(|f| f.parse().ok());
                if e.is_some_and(|e| e <= epoch) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn training_error(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training {
            epoch,
            batch,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Runs epochs `state.epoch .. cfg.epochs`. With `out`, the CSV log and
/// checkpoints are written there. `on_epoch` sees each log line as it is
/// produced.
///
/// Every random stream (shuffle, crops and jitter, dropout) is derived from
/// the seed and the epoch/batch/sample position, so a resumed run retraces an
/// uninterrupted one exactly.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let crop = data.scene.crop;
    if crop != state.model.config.input_resolution {
        return Err(Error::Config(format!(
            "dataset crop {crop} does not match model input resolution {}",
            state.model.config.input_resolution
        )));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("the dataset has no training samples".into()));
    }
    if state.epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "state is at epoch {} but the run has only {} epochs",
            state.epoch, cfg.epochs
        )));
    }
    let log_path = out.map(|o| o.join(LOG_FILE));
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        reset_log(log_path.as_deref().expect("set with out"), state.epoch)?;
    }

    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let e = state.epoch;
        let lr = cosine_lr(e, cfg.epochs, cfg.lr)?;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream(&[cfg.seed, TAG_SHUFFLE, e as u64])));

        state.model.set_mode(Mode::Train);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = chunk
                .par_iter()
                .map(|&i| {
                    let seed = stream(&[cfg.seed, TAG_AUGMENT, e as u64, i as u64]);
                    data.samples[i].train_sample::<f64, _>(crop, &cfg.jitter, &mut ChaCha8Rng::seed_from_u64(seed))
                })
                .collect::<Result<Vec<_>>>()?;
            let (images, poses) = stack_batch(&samples)?;
            let dropout_seed = stream(&[cfg.seed, TAG_DROPOUT, e as u64, bi as u64]);
            let loss = state
                .step_batch(images, &poses, lr, cfg, dropout_seed)
                .map_err(|err| training_error(e + 1, bi, err))?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        state.epoch += 1;

        let eval = evaluate(&mut state.model, data, Split::Val)?;
        let log = EpochLog {
            epoch: state.epoch,
            lr,
            train_loss: total / count as f64,
            val: eval.stats,
        };
        if let Some(o) = out {
            append_log(log_path.as_deref().expect("set with out"), &log.csv())?;
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                crate::checkpoint::save(&epoch_checkpoint_path(o, state.epoch), &state.to_checkpoint(cfg))?;
            }
            if state.epoch == cfg.epochs {
                crate::checkpoint::save(&o.join(FINAL_CHECKPOINT), &state.to_checkpoint(cfg))?;
            }
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Standard deviation of the noise added to freshly initialized parameters
/// before a whole-model gradient check.
pub const PROBE_NOISE: f64 = 0.1;

/// Gradient check of the whole model plus the loss weights: analytic
/// gradients of the pose loss on a random batch against central
/// differences, one report per parameter tensor. Runs in training mode with a
/// fixed dropout mask, at a randomly perturbed parameter point.
pub fn grad_check_model(config: &ModelConfig, seed: u64, batch: usize, h: f64) -> Result<Vec<GradCheck>> {
    grad_check_model_where(config, seed, batch, h, |_| true)
}

/// [`grad_check_model`] restricted to the tensors whose name passes `keep`.
pub fn grad_check_model_where(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    h: f64,
    keep: impl Fn(&str) -> bool,
) -> Result<Vec<GradCheck>> {
    let mut model = EffLocModel::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(&[seed, 0x9c]));
    // Move off the initialization point: with zero biases and near-uniform
    // attention some gradients are as small as the difference quotient's
    // rounding floor there.
    for (_, t) in model.params.iter_mut() {
        for x in t.data_mut() {
            *x += PROBE_NOISE * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let r = config.input_resolution;
    let images = Tensor::from_fn(&[batch, 3, r, r], |_| rng.gen_range(-1.0..1.0));
    let truth = (0..batch)
        .map(|_| {
            let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            Ok(Pose {
                p: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                q: UnitQuaternion::from_axis_angle(axis, rng.gen_range(0.1..1.0))?,
            })
        })
        .collect::<Result<Vec<Pose<f64>>>>()?;
    let loss0 = LossState::<f64>::default();
    let dropout_seed = stream(&[seed, TAG_DROPOUT]);

    // Returns the loss and, when asked, the gradient of every parameter then alpha and beta.
    let run = |m: &EffLocModel<f64>, ls: LossState<f64>, want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, want_grad);
        let (a, b) = if want_grad {
            (tape.param(Tensor::scalar(ls.alpha)), tape.param(Tensor::scalar(ls.beta)))
        } else {
            (tape.constant(Tensor::scalar(ls.alpha)), tape.constant(Tensor::scalar(ls.beta)))
        };
        let x = tape.constant(images.clone());
        let mut fs = ForwardState::new(dropout_seed);
        let pred = m.forward(&mut tape, &bound, x, &mut fs)?;
        let loss = pose_loss(&mut tape, pred, &truth, a, b)?;
        let value = tape.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let mut g = m.gradients(&tape, &bound);
        g.push(tape.grad(a).map_or(vec![0.0], <[f64]>::to_vec));
        g.push(tape.grad(b).map_or(vec![0.0], <[f64]>::to_vec));
        Ok((value, g))
    };

    let (_, analytic) = run(&model, loss0, true)?;
    let mut names: Vec<String> = model.params.names().map(str::to_string).collect();
    names.push("loss/alpha".into());
    names.push("loss/beta".into());
    let n_params = model.params.len();

    let mut reports = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        if !keep(name) {
            continue;
        }
        let numel = analytic[ti].len();
        let numeric = (0..numel)
            .into_par_iter()
            .map(|k| {
                let eval_at = |delta: f64| -> Result<f64> {
                    if ti < n_params {
                        let mut m = model.clone();
                        m.params.tensor_mut(ti).data_mut()[k] += delta;
                        Ok(run(&m, loss0, false)?.0)
                    } else {
                        let mut ls = loss0;
                        if ti == n_params {
                            ls.alpha += delta;
                        } else {
                            ls.beta += delta;
                        }
                        Ok(run(&model, ls, false)?.0)
                    }
                };
                Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h))
            })
            .collect::<Result<Vec<f64>>>()?;
        reports.push(compare(name.clone(), &analytic[ti], &numeric));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
