mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use mixscene::cli::run;
use mixscene::datasets::read_png_rgb;
use mixscene::trainer::{checkpoint_path, save_checkpoint_versioned, train, TrainState, CHECKPOINT_VERSION};

fn mixscene(args: &[&str]) -> mixscene::cli::CommandResult {
    run(std::iter::once("mixscene").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_digest(dir: &Path) -> String {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.push(dir.join("annotations.jsonl"));
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().to_str().unwrap());
        h.update(fs::read(f).unwrap());
    }
    hex::encode(h.finalize())
}

/// A 32-pixel dataset plus a briefly trained checkpoint.
fn fixture(dir: &Path, clusters: usize) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let ds = common::make_dataset(&data, 6, 3, 32, "test");
    let mut cfg = common::small_config();
    cfg.model.num_clusters = clusters;
    cfg.train.total_steps = 4;
    let run_dir = dir.join("run");
    train(&cfg, &ds, &run_dir, None).unwrap();
    (data, checkpoint_path(&run_dir, 4))
}

#[test]
fn gen_data_writes_count_scenes_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = mixscene(&[
            "gen-data", "--synthetic-digits", "50", "--out", s(out), "--count", "100", "--seed", "4", "--image-size", "48",
            "--max-objects", "3",
        ]);
        assert_eq!(r.code, 0, "{}", r.summary);
        assert!(r.summary.contains("manifest.json"));
    }
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 100);
    assert_eq!(fs::read_to_string(a.join("annotations.jsonl")).unwrap().lines().count(), 100);
    assert_eq!(tree_digest(&a), tree_digest(&b));
}

#[test]
fn gen_data_without_source_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = mixscene(&["gen-data", "--out", s(dir.path()), "--count", "3"]);
    assert_eq!(r.code, 2);
    let r = mixscene(&["gen-data", "--mnist-dir", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(r.code, 2);
}

#[test]
fn train_smoke_run_logs_and_snapshots_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::make_dataset(&data, 8, 1, 32, "train");
    let cfg_path = dir.path().join("small.toml");
    let mut cfg = common::small_config();
    cfg.train.total_steps = 100;
    cfg.train.log_every = 25;
    cfg.train.checkpoint_every = 50;
    cfg.save(&cfg_path).unwrap();
    let out = dir.path().join("run");
    let r = mixscene(&[
        "train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&out), "--set", "model.num_clusters=5",
    ]);
    assert_eq!(r.code, 0, "{}", r.summary);
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let snap = mixscene::config::load_config(out.join("config.toml")).unwrap();
    assert_eq!(snap.model.num_clusters, 5);
    let state = mixscene::trainer::resume(&out.join("ckpt_100")).unwrap();
    assert_eq!(state.model.config.model.num_clusters, 5);
}

#[test]
fn train_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = mixscene(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&out)]);
    assert_eq!(r.code, 2, "{}", r.summary);
    let data = dir.path().join("data");
    common::make_dataset(&data, 2, 1, 32, "train");
    let r = mixscene(&["train", "--data", s(&data), "--out", s(&out), "--set", "model.no_such_key=1"]);
    assert_eq!(r.code, 2, "{}", r.summary);
}

#[test]
fn numerical_abort_exits_3_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::make_dataset(&data, 8, 1, 32, "train");
    let cfg_path = dir.path().join("small.toml");
    common::small_config().save(&cfg_path).unwrap();
    let out = dir.path().join("run");
    let r = mixscene(&[
        "train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&out), "--set", "train.learning_rate=1e30",
        "--set", "train.grad_clip=0",
    ]);
    assert_eq!(r.code, 3, "{}", r.summary);
    let dump = r.summary.lines().find_map(|l| l.strip_prefix("diagnostics: ")).unwrap();
    assert!(Path::new(dump).exists());
}

#[test]
fn eval_reports_metrics_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path(), 3);
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        let r = mixscene(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&out)]);
        assert_eq!(r.code, 0, "{}", r.summary);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        for k in ["ap", "acc", "nmi"] {
            assert!(v[k].is_number(), "{k}");
        }
        assert_eq!(fs::read_to_string(out.join("detections.jsonl")).unwrap().lines().count(), 6);
        reports.push((
            fs::read(out.join("report.json")).unwrap(),
            fs::read(out.join("detections.jsonl")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn oracle_eval_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::make_dataset(&data, 10, 2, 32, "test");
    let out = dir.path().join("eval");
    let r = mixscene(&["eval", "--oracle", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.summary);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["ap"], 1.0);
    assert_eq!(v["acc"], 1.0);
}

#[test]
fn bad_checkpoints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::make_dataset(&data, 2, 2, 32, "test");
    let ckpt = dir.path().join("old");
    let state = TrainState::new(&common::small_config()).unwrap();
    save_checkpoint_versioned(&state, &ckpt, CHECKPOINT_VERSION + 7).unwrap();
    let out = dir.path().join("eval");
    let r = mixscene(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.code, 4, "{}", r.summary);
    fs::write(&ckpt, b"garbage").unwrap();
    let r = mixscene(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.code, 4, "{}", r.summary);
}

#[test]
fn manipulate_writes_side_by_side_panels() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path(), 10);
    let image = data.join("images").join("test_000000.png");
    for (mode, extra, panels) in [
        ("reconstruct", vec![], 2),
        ("swap", vec!["--target-k", "9"], 3),
        ("vary", vec!["--noise", "0"], 3),
        ("shuffle", vec!["--seed", "3"], 3),
    ] {
        let out = dir.path().join(format!("{mode}.png"));
        let mut args = vec!["manipulate", "--ckpt", s(&ckpt), "--image", s(&image), "--mode", mode, "--out", s(&out)];
        args.extend(extra);
        let r = mixscene(&args);
        if r.code == 2 && r.summary.contains("no present objects") {
            // An untrained model may detect nothing to shuffle.
            continue;
        }
        assert_eq!(r.code, 0, "{mode}: {}", r.summary);
        let (w, h, _) = read_png_rgb(&out).unwrap();
        assert_eq!((w, h), (panels * 32 + (panels - 1) * 2, 32), "{mode}");
    }
}

#[test]
fn manipulate_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path(), 10);
    let image = data.join("images").join("test_000000.png");
    let out = dir.path().join("m.png");
    let base = ["manipulate", "--ckpt", s(&ckpt), "--image", s(&image), "--out", s(&out)];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        mixscene(&a)
    };
    assert_eq!(with(&["--mode", "swap", "--target-k", "11"]).code, 2);
    assert_eq!(with(&["--mode", "swap"]).code, 2);
    assert_eq!(with(&["--mode", "melt"]).code, 2);
    assert_eq!(with(&["--mode", "vary", "--noise", "-1"]).code, 2);
    assert!(!out.exists());
}

#[test]
fn export_then_plot_latents() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path(), 3);
    let csv = dir.path().join("lat").join("latents.csv");
    let r = mixscene(&["export-latents", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv)]);
    assert_eq!(r.code, 0, "{}", r.summary);
    let header = fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "scene_id,cluster,class,dim_0,dim_1,dim_2,dim_3");
}

#[test]
fn plot_metrics_log_has_one_point_per_eval_row() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.jsonl");
    let mut text = String::new();
    for step in 1..=6 {
        let eval = if step % 2 == 0 {
            format!(r#","ap":{},"acc":0.5,"nmi":0.25"#, step as f64 / 10.0)
        } else {
            String::new()
        };
        text += &format!(
            r#"{{"step":{step},"recon":{},"overlap":0,"pres":1,"where":1,"depth":1,"cat":1,"what":1,"total":5,"pres_prior":0.5,"alpha_overlap":1,"learning_rate":0.001{eval}}}"#,
            100 - step
        );
        text.push('\n');
    }
    fs::write(&log, text).unwrap();
    let out = dir.path().join("plots");
    let r = mixscene(&["plot", "--metrics-log", s(&log), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.summary);
    assert!(r.summary.contains("AP: 3, ACC: 3, NMI: 3"), "{}", r.summary);
    assert!(r.summary.contains("recon: 6"));
    let svg = fs::read_to_string(out.join("eval.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("NMI"));
}

#[test]
fn plot_latents_colors_by_class() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("latents.csv");
    let mut text = "scene_id,cluster,class,dim_0,dim_1,dim_2\n".to_string();
    for i in 0..12 {
        let class = if i < 5 { 3 } else { 7 };
        let off = if class == 3 { -2.0 } else { 2.0 };
        text += &format!("s{i},0,{class},{},{},{}\n", off + 0.1 * i as f64, 0.3 * (i % 4) as f64, -off);
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("plots");
    let r = mixscene(&["plot", "--latents", s(&csv), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.summary);
    assert!(r.summary.contains("class 3: 5, class 7: 7"), "{}", r.summary);
    let svg = fs::read_to_string(out.join("latents.svg")).unwrap();
    assert!(svg.contains("class 3") && svg.contains("class 7"));
}

#[test]
fn plot_rejects_empty_or_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    fs::write(&log, "").unwrap();
    let out = dir.path().join("plots");
    let r = mixscene(&["plot", "--metrics-log", s(&log), "--out", s(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.summary.contains("no rows"));
    fs::write(&log, "{not json\n").unwrap();
    assert_eq!(mixscene(&["plot", "--metrics-log", s(&log), "--out", s(&out)]).code, 2);
    assert_eq!(mixscene(&["plot", "--out", s(&out)]).code, 2);
}

#[test]
fn binary_help_and_unknown_flags() {
    let bin = env!("CARGO_BIN_EXE_mixscene");
    let flags = [
        ("gen-data", &["--mnist-dir", "--synthetic-digits", "--out", "--count", "--seed"][..]),
        ("train", &["--config", "--data", "--out", "--set", "--eval-data", "--resume"]),
        ("eval", &["--ckpt", "--data", "--out"]),
        ("manipulate", &["--ckpt", "--image", "--mode", "--target-k", "--noise", "--seed", "--out"]),
        ("export-latents", &["--ckpt", "--data", "--out"]),
        ("plot", &["--metrics-log", "--latents", "--out"]),
    ];
    for (cmd, expected) in flags {
        let o = Command::new(bin).args([cmd, "--help"]).output().unwrap();
        assert!(o.status.success(), "{cmd}");
        let text = String::from_utf8(o.stdout).unwrap();
        for f in expected {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
        let o = Command::new(bin).args([cmd, "--bogus"]).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{cmd}");
    }
}
