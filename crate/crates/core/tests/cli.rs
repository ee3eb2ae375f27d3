//! End-to-end runs of the `revdeid` binary on tiny synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_revdeid");

/// Settings small enough for a few seconds of training.
const TINY: &[&str] = &[
    "--set",
    "matcher_scale=16",
    "--set",
    "phase1_epochs=1",
    "--set",
    "phase1_steps_per_epoch=1",
    "--set",
    "phase1_batch_size=4",
    "--set",
    "steps_per_epoch=1",
    "--set",
    "batch_size=4",
    "--set",
    "critic_steps=1",
    "--set",
    "encoder_width=2",
    "--set",
    "decoder_width=2",
    "--set",
    "critic_width=2",
    "--set",
    "critic_layers=3",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", p(dir), "--subjects", "4", "--sequences", "2", "--frames", "2", "--seed", "3"];
    args.extend_from_slice(extra);
    run(&args)
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "png") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

/// Data, matcher and generator trained with [`TINY`] settings.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let models = root.join("models");
    assert!(synth(&data, &["--scenes", "3"]).status.success());
    let mut a = vec!["train", "phase1", "--data", p(&data), "--out", p(&models)];
    a.extend_from_slice(TINY);
    let out = run(&a);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut a = vec!["train", "phase2", "--data", p(&data), "--out", p(&models), "--epochs", "1", "--sign", "-1,1,1,1"];
    a.extend_from_slice(TINY);
    let out = run(&a);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (data, models)
}

#[test]
fn synth_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(synth(&a, &[]).status.success());
    assert!(synth(&b, &[]).status.success());
    let (fa, fb) = (pngs(&a), pngs(&b));
    assert_eq!(fa.len(), 4 * 2 * 2);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(fs::read(a.join("labels.jsonl")).unwrap(), fs::read(b.join("labels.jsonl")).unwrap());
    // A second run into the same directory needs --force.
    assert_eq!(synth(&a, &[]).status.code(), Some(2));
    assert!(synth(&a, &["--force"]).status.success());
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let out = dir.path().join("never");
    // ID component must be -1; nothing is written on refusal.
    assert_eq!(code(&["train", "phase2", "--data", "x", "--out", p(&out), "--sign", "1,1,1,1"]), 2);
    assert!(!out.exists());
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["synth", "--out", p(&out), "--config", p(&bad_cfg)]), 2);
    assert!(!out.exists());
    assert_eq!(code(&["eval", "--data", "x", "--protocol", "zz", "--report", "r"]), 2);
    assert_eq!(code(&["ablate", "--data", "x", "--matcher", "m", "--param", "omega_foo", "--factor", "2", "--out", "o"]), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    let ckpt = dir.path().join("missing.bin");
    let out = run(&["deidentify", "--in", p(&input), "--out", p(&dir.path().join("o")), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
}

#[test]
fn train_deidentify_reverse_eval_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, models) = trained(root);
    let gen = models.join("generator.bin");
    assert!(models.join("matcher.bin").is_file() && models.join("critic.bin").is_file());
    assert!(fs::read_to_string(models.join("history.csv")).unwrap().starts_with("epoch,term,value\n"));
    assert!(fs::read_to_string(models.join("phase1_history.csv")).unwrap().starts_with("label,epoch,loss\n"));

    let scenes = data.join("scenes");
    let (public, public2, restored) = (root.join("public"), root.join("public2"), root.join("restored"));
    let stream = |cmd: &str, i: &Path, o: &Path, seed: &str| run(&[cmd, "--in", p(i), "--out", p(o), "--checkpoint", p(&gen), "--seed", seed]);
    assert!(stream("deidentify", &scenes, &public, "1").status.success());
    assert!(stream("deidentify", &scenes, &public2, "2").status.success());
    assert!(stream("reverse", &public, &restored, "1").status.success());
    let names = |d: &Path| pngs(d).iter().map(|f| f.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    assert_eq!(names(&public).len(), 3);
    assert_eq!(names(&public), names(&restored));
    assert_eq!(names(&public), names(&public2));
    let differs = pngs(&public).iter().zip(pngs(&public2)).any(|(a, b)| fs::read(a).unwrap() != fs::read(b).unwrap());
    assert!(differs, "--seed must change the public stream");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(restored.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 3);
    assert_eq!(summary["mode"], "reverse");

    // A generator with a different sign vector has a different fingerprint.
    let other = root.join("other");
    let mut a = vec!["train", "phase2", "--data", p(&data), "--out", p(&other), "--matcher"];
    let matcher = models.join("matcher.bin");
    a.push(p(&matcher));
    a.extend_from_slice(&["--epochs", "1", "--sign", "-1,-1,-1,-1"]);
    a.extend_from_slice(TINY);
    assert!(run(&a).status.success());
    let out = run(&["reverse", "--in", p(&public), "--out", p(&root.join("r2")), "--checkpoint", p(&other.join("generator.bin"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));

    let report = root.join("report");
    let out = run(&[
        "eval", "--data", p(&data), "--protocol", "xa", "--pairs", "10,50", "--report", p(&report), "--checkpoint", p(&gen),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(report.join("scores_xa.txt")).unwrap().lines().count(), 60);
    let metrics = fs::read_to_string(report.join("metrics_xa.csv")).unwrap();
    for row in ["d_prime,xa,", "auc,xa,", "ks_d,xa,", "ks_p,xa,"] {
        assert!(metrics.contains(row), "{row}");
    }
    assert!(fs::read_to_string(report.join("hist_xa.svg")).unwrap().starts_with("<svg"));
    assert_eq!(code(&["eval", "--data", p(&data), "--protocol", "temporal", "--report", p(&report)]), 2);

    let abl = root.join("ablate");
    let mut a = vec![
        "ablate", "--data", p(&data), "--matcher", p(&matcher), "--param", "omega_mse", "--factor", "1.0", "--out", p(&abl),
        "--epochs", "1",
    ];
    a.extend_from_slice(TINY);
    let out = run(&a);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    for line in csv.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], cols[2], "factor 1 must reproduce the base: {line}");
    }
}
