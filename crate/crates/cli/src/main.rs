use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use effloc::checkpoint;
use effloc::data::{generate_dataset, load_dataset, JitterStrengths, SceneSpec, Split, IMAGE_DIR, MANIFEST_FILE, SCENE_FILE};
use effloc::model::{EffLocModel, ModelConfig};
use effloc::profiler::profile;
use effloc::train::{
    evaluate, grad_check_model, model_from_checkpoint, train, TrainConfig, TrainState, EVAL_HEADER, FINAL_CHECKPOINT,
};
use effloc::Error;

/// Camera relocalization with a lightweight vision transformer.
///
/// Log verbosity follows the EFFLOC_LOG environment variable (error, warn,
/// info, debug). Exit codes: 0 success, 1 usage or configuration error,
/// 2 data or file-format error, 3 numeric failure.
#[derive(Parser, Debug)]
#[command(name = "effloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic pose dataset: images/<id>.ppm (binary P6), poses.csv
    /// (id,px,py,pz,qw,qx,qy,qz) and scene.txt (key = value).
    SynthGen(SynthGenArgs),
    /// Train a model; writes train_log.csv, checkpoints/epoch_NNNN.eflc and
    /// final.eflc under --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints median/mean errors and
    /// writes a per-sample CSV.
    Eval(EvalArgs),
    /// Analytic parameter and MAC counts per module.
    Profile(ProfileArgs),
    /// Compare analytic gradients of every parameter against central
    /// differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples (at least 1).
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Seed for landmarks, poses and the train/val/test split.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Rendered image side in pixels.
    #[arg(long, default_value_t = 72)]
    resolution: usize,
    /// Crop side used for training and evaluation.
    #[arg(long, default_value_t = 64)]
    crop: usize,
    /// Number of scene landmarks (at least 4).
    #[arg(long, default_value_t = 24)]
    landmarks: usize,
    /// Replace the dataset files in a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory produced by synth-gen.
    #[arg(long)]
    data: PathBuf,
    /// Named config (effloc, effloc-small, effloc-xs, tiny) or a key = value file.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Total epochs [default: 30, or the checkpoint's value on resume].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 3e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay [default: 0.035].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Mini-batch size [default: 8].
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for initialization, shuffling, augmentation and dropout [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint every N epochs, 0 for the final one only [default: 5].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Global gradient-norm clip [default: off].
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Colour jitter strengths "brightness,contrast,saturation,hue" [default: 0.1,0.1,0.1,0].
    #[arg(long)]
    jitter: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Per-sample CSV path [default: <checkpoint>.<split>.csv].
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Named config or a key = value file.
    #[arg(long, default_value = "effloc")]
    config: String,
    /// Input side in pixels [default: the config's input resolution].
    #[arg(long)]
    resolution: Option<usize>,
    /// Print CSV (module,params,macs,flops,activations) instead of a table.
    #[arg(long)]
    csv: bool,
    /// Leave out the pose regressor.
    #[arg(long)]
    backbone_only: bool,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Named config or a key = value file.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Largest accepted relative error per tensor.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Batch size of the random probe batch.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Seed for weights and the probe batch.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = err
            .chain()
            .find_map(|e| e.downcast_ref::<Error>())
            .map_or(2, |e| match e {
                Error::Config(_) | Error::Contract(_) => 1,
                Error::NonFinite { .. } | Error::Training { .. } => 3,
                _ => 2,
            });
        Self { code, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: 1,
        err: anyhow::anyhow!(msg),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EFFLOC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Profile(a) => run_profile(a),
        Command::GradCheck(a) => run_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_config(spec: &str) -> Result<ModelConfig, Failure> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return ModelConfig::from_kv(&text)
            .with_context(|| format!("config file {}", path.display()))
            .map_err(Failure::from);
    }
    Ok(ModelConfig::named(spec)?)
}

fn echo(title: &str, body: &str) {
    println!("# {title}");
    for line in body.lines() {
        println!("#   {line}");
    }
}

fn synth_gen(a: SynthGenArgs) -> Outcome {
    let scene = SceneSpec::synthetic(a.seed, a.landmarks, a.resolution, a.crop)?;
    echo(
        "synth-gen",
        &format!(
            "out = {}\ncount = {}\nseed = {}\nforce = {}\n{}",
            a.out.display(),
            a.count,
            a.seed,
            a.force,
            scene.to_kv()
        ),
    );
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to replace the dataset",
                a.out.display()
            )));
        }
        if a.force {
            let images = a.out.join(IMAGE_DIR);
            if images.exists() {
                fs::remove_dir_all(&images).with_context(|| format!("removing {}", images.display()))?;
            }
            for f in [MANIFEST_FILE, SCENE_FILE] {
                let p = a.out.join(f);
                if p.exists() {
                    fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
                }
            }
        }
    }
    let s = generate_dataset(&a.out, &scene, a.count as usize, a.seed)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        s.count,
        a.out.join(MANIFEST_FILE).display(),
        s.train,
        s.val,
        s.test
    );
    Ok(())
}

fn parse_jitter(text: &str) -> Result<JitterStrengths, Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--jitter expects four numbers, got '{text}'")))?;
    let [brightness, contrast, saturation, hue] = parts[..] else {
        return Err(usage(format!("--jitter expects four numbers, got '{text}'")));
    };
    Ok(JitterStrengths {
        brightness,
        contrast,
        saturation,
        hue,
    })
}

fn run_train(a: TrainArgs) -> Outcome {
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let (mut state, base) = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let (st, cfg) = TrainState::from_checkpoint(&ck).with_context(|| format!("checkpoint {}", path.display()))?;
            if a.config != "tiny" || st.model.config.name != "tiny" {
                let wanted = resolve_config(&a.config)?;
                if wanted != st.model.config {
                    return Err(usage(format!(
                        "--config {} differs from the model stored in {}",
                        a.config,
                        path.display()
                    )));
                }
            }
            (st, cfg)
        }
        None => {
            let config = resolve_config(&a.config)?;
            let seed = a.seed.unwrap_or(0);
            (TrainState::new(EffLocModel::new(config, seed)?), TrainConfig::default())
        }
    };
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(base.lr),
        weight_decay: a.weight_decay.unwrap_or(base.weight_decay),
        batch_size: a.batch.unwrap_or(base.batch_size),
        epochs: a.epochs.unwrap_or(base.epochs),
        seed: a.seed.unwrap_or(base.seed),
        checkpoint_every: a.checkpoint_every.unwrap_or(base.checkpoint_every),
        grad_clip: a.grad_clip.or(base.grad_clip),
        jitter: match &a.jitter {
            Some(j) => parse_jitter(j)?,
            None => base.jitter,
        },
    };
    cfg.validate()?;
    let crop = data.scene.crop;
    let r = state.model.config.input_resolution;
    if crop != r {
        return Err(usage(format!(
            "dataset {} crops to {crop} pixels but model '{}' expects {r}",
            a.data.display(),
            state.model.config.name
        )));
    }
    echo(
        "train",
        &format!(
            "data = {}\nout = {}\nresume = {}\nstart_epoch = {}\nsamples = {}\n{}{}",
            a.data.display(),
            a.out.display(),
            a.resume.as_ref().map_or("none".into(), |p| p.display().to_string()),
            state.epoch,
            data.samples.len(),
            state.model.config.to_kv(),
            cfg.to_kv()
        ),
    );
    let extent = data.scene.extent();
    train(&mut state, &data, &cfg, Some(&a.out), |log| {
        let v = log.val.map_or(String::from("no validation samples"), |s| {
            format!(
                "val median {:.4} m ({:.1}% extent) {:.3} deg, mean {:.4} m {:.3} deg",
                s.median_position,
                100.0 * s.median_position / extent,
                s.median_rotation_deg,
                s.mean_position,
                s.mean_rotation_deg
            )
        });
        println!("epoch {:>3}  lr {:.3e}  loss {:.5}  {v}", log.epoch, log.lr, log.train_loss);
    })?;
    println!("final checkpoint: {}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let ck = checkpoint::load(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let mut model = model_from_checkpoint(&ck).with_context(|| format!("checkpoint {}", a.checkpoint.display()))?;
    let r = model.config.input_resolution;
    if data.scene.crop != r {
        return Err(usage(format!(
            "dataset {} crops to {} pixels but checkpoint {} expects {r}",
            a.data.display(),
            data.scene.crop,
            a.checkpoint.display()
        )));
    }
    let split: Split = a.split.into();
    let split_name = format!("{split:?}").to_lowercase();
    let csv = a
        .csv
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_extension(format!("{split_name}.csv")));
    echo(
        "eval",
        &format!(
            "data = {}\ncheckpoint = {}\nsplit = {split_name}\ncsv = {}\n{}",
            a.data.display(),
            a.checkpoint.display(),
            csv.display(),
            model.config.to_kv()
        ),
    );
    let ev = evaluate(&mut model, &data, split)?;
    let mut text = format!("{EVAL_HEADER}\n");
    for row in &ev.rows {
        text.push_str(&row.csv());
        text.push('\n');
    }
    fs::write(&csv, text).with_context(|| format!("writing {}", csv.display()))?;
    match ev.stats {
        Some(s) => {
            println!("samples,median_pos,mean_pos,median_rot_deg,mean_rot_deg");
            println!(
                "{},{},{},{},{}",
                ev.rows.len(),
                s.median_position,
                s.mean_position,
                s.median_rotation_deg,
                s.mean_rotation_deg
            );
        }
        None => println!("split {split_name} is empty"),
    }
    Ok(())
}

fn run_profile(a: ProfileArgs) -> Outcome {
    let config = resolve_config(&a.config)?;
    let r = a.resolution.unwrap_or(config.input_resolution);
    let report = profile(&config, r, !a.backbone_only)?;
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        echo(
            "profile",
            &format!("resolution = {r}\nregressor = {}\n{}", !a.backbone_only, config.to_kv()),
        );
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_grad_check(a: GradCheckArgs) -> Outcome {
    let config = resolve_config(&a.config)?;
    if a.batch < 2 {
        return Err(usage("--batch must be at least 2 (batch statistics)".into()));
    }
    echo(
        "grad-check",
        &format!(
            "tolerance = {}\nbatch = {}\nseed = {}\nstep = {}\n{}",
            a.tolerance,
            a.batch,
            a.seed,
            a.step,
            config.to_kv()
        ),
    );
    let reports = grad_check_model(&config, a.seed, a.batch, a.step)?;
    println!("tensor,numel,rel_error,max_abs_diff,status");
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(a.tolerance);
        failed += usize::from(!ok);
        println!(
            "{},{},{:.3e},{:.3e},{}",
            r.name,
            r.numel,
            r.rel_error,
            r.max_abs_diff,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    println!("{} tensors, {failed} over tolerance, worst relative error {worst:.3e}", reports.len());
    if failed > 0 {
        return Err(Failure {
            code: 3,
            err: anyhow::anyhow!("{failed} tensors exceed tolerance {}", a.tolerance),
        });
    }
    Ok(())
}
