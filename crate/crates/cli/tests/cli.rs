use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use effloc::checkpoint;
use effloc::model::{EffLocModel, ModelConfig};
use effloc::train::{model_from_checkpoint, LOG_FILE};

fn effloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effloc"))
        .args(args)
        .output()
        .expect("spawn effloc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, count: &str) {
    let o = effloc(&["synth-gen", "--out", dir.to_str().unwrap(), "--count", count, "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_gen_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    gen(&a, "100");
    let manifest = fs::read_to_string(a.join("poses.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 101);

    let refused = effloc(&["synth-gen", "--out", a.to_str().unwrap(), "--count", "100", "--seed", "1"]);
    assert_eq!(code(&refused), 1);
    assert!(stderr(&refused).contains("--force"));

    let before = tree(&a);
    let again = effloc(&["synth-gen", "--out", a.to_str().unwrap(), "--count", "100", "--seed", "1", "--force"]);
    assert_eq!(code(&again), 0);
    assert_eq!(tree(&a), before);

    let zero = effloc(&["synth-gen", "--out", tmp.path().join("z").to_str().unwrap(), "--count", "0"]);
    assert_eq!(code(&zero), 1);
}

#[test]
fn usage_errors_exit_one() {
    let o = effloc(&["profile", "--config", "bogus"]);
    assert_eq!(code(&o), 1);
    for name in ["effloc", "effloc-small", "effloc-xs", "tiny"] {
        assert!(stderr(&o).contains(name), "{}", stderr(&o));
    }
    assert_eq!(code(&effloc(&["profile", "--no-such-flag"])), 1);
    assert_eq!(code(&effloc(&["frobnicate"])), 1);
    let help = effloc(&["train", "--help"]);
    assert_eq!(code(&help), 0);
    for flag in ["--data", "--config", "--epochs", "--lr", "--batch", "--seed", "--out", "--resume"] {
        assert!(stdout(&help).contains(flag), "{flag}");
    }
}

#[test]
fn profile_reports_totals() {
    let o = effloc(&["profile", "--config", "effloc", "--resolution", "256", "--csv"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.starts_with("module,params,macs,flops,activations"));
    let total: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(total[0], "total");
    let params: f64 = total[1].parse().unwrap();
    let macs: f64 = total[2].parse().unwrap();
    assert!((params / 14.99e6 - 1.0).abs() < 0.2);
    assert!((macs / 710.95e6 - 1.0).abs() < 0.25);

    let table = effloc(&["profile", "--config", "tiny"]);
    assert_eq!(code(&table), 0);
    assert!(stdout(&table).contains("# profile"));
}

#[test]
fn train_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "60");
    let d = data.to_str().unwrap();

    // lr = 0 keeps every weight at its initial value
    let zero = tmp.path().join("zero");
    let o = effloc(&["train", "--data", d, "--epochs", "1", "--lr", "0", "--seed", "3", "--out", zero.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("train.lr = 0"));
    let trained = model_from_checkpoint(&checkpoint::load(&zero.join("final.eflc")).unwrap()).unwrap();
    let init = EffLocModel::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    assert_eq!(trained.params, init.params);

    // straight 3-epoch run vs 2 + resume
    let common = ["--batch", "8", "--seed", "5", "--checkpoint-every", "1"];
    let straight = tmp.path().join("straight");
    let mut args = vec!["train", "--data", d, "--epochs", "3", "--out", straight.to_str().unwrap()];
    args.extend(common);
    assert_eq!(code(&effloc(&args)), 0);

    let part = tmp.path().join("part");
    let mut args = vec!["train", "--data", d, "--epochs", "3", "--out", part.to_str().unwrap()];
    args.extend(common);
    assert_eq!(code(&effloc(&args)), 0);
    // simulate an interruption after epoch 2
    fs::remove_file(part.join("final.eflc")).unwrap();
    fs::remove_file(part.join("checkpoints/epoch_0003.eflc")).unwrap();
    let resume_from = part.join("checkpoints/epoch_0002.eflc");
    let o = effloc(&[
        "train",
        "--data",
        d,
        "--out",
        part.to_str().unwrap(),
        "--resume",
        resume_from.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch   3"), "{}", stdout(&o));
    assert!(!stdout(&o).contains("epoch   2 "));
    assert_eq!(
        fs::read(straight.join("final.eflc")).unwrap(),
        fs::read(part.join("final.eflc")).unwrap()
    );
    let log = fs::read_to_string(straight.join(LOG_FILE)).unwrap();
    assert_eq!(log, fs::read_to_string(part.join(LOG_FILE)).unwrap());
    assert_eq!(log.lines().count(), 4);

    // eval on the validation split reproduces the last log row
    let ck = straight.join("final.eflc");
    let csv = tmp.path().join("val.csv");
    let o = effloc(&[
        "eval",
        "--data",
        d,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let summary: Vec<&str> = out.lines().last().unwrap().split(',').collect();
    let last: Vec<&str> = log.lines().last().unwrap().split(',').collect();
    assert_eq!(summary[1..], last[3..]);

    // per-sample CSV re-aggregated
    let rows: Vec<Vec<f64>> = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(8).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len().to_string(), summary[0]);
    let mut pos: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    pos.sort_by(f64::total_cmp);
    let median = pos[(pos.len() - 1) / 2];
    let mean = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
    assert_eq!(median, summary[1].parse::<f64>().unwrap());
    assert!((mean - summary[2].parse::<f64>().unwrap()).abs() < 1e-12);

    // resolution mismatch names both sides
    let big = tmp.path().join("big");
    let o = effloc(&[
        "synth-gen", "--out", big.to_str().unwrap(), "--count", "5", "--resolution", "40", "--crop", "32",
    ]);
    assert_eq!(code(&o), 0);
    let o = effloc(&["eval", "--data", big.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("32") && stderr(&o).contains("64"), "{}", stderr(&o));

    // corrupt checkpoint is a format error
    let bad = tmp.path().join("bad.eflc");
    fs::write(&bad, &fs::read(&ck).unwrap()[..100]).unwrap();
    let o = effloc(&["eval", "--data", d, "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_on_a_small_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("micro.cfg");
    fs::write(
        &cfg,
        "name = micro\nwidths = 8,16,16\nheads = 2,2,2\nqk_dim = 8,8,8\ninput_resolution = 32\nembed_downsample_factor = 4\nregressor_hidden = 8\n",
    )
    .unwrap();
    let o = effloc(&["grad-check", "--config", cfg.to_str().unwrap(), "--tolerance", "1e-4"]);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("0 over tolerance"));

    let strict = effloc(&["grad-check", "--config", cfg.to_str().unwrap(), "--tolerance", "1e-30"]);
    assert_eq!(code(&strict), 3);
}
