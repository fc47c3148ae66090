use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossdsr::cli::{FINAL_CHECKPOINT, RESUME_CHECKPOINT, RUN_MANIFEST, TRAIN_LOG};
use crossdsr::data::{read_depth, write_depth, DepthMap};
use crossdsr::train::{load_checkpoint, TrainConfig};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossdsr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = bin(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(shards: &Path, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.model.scale = 2;
    cfg.model.stage_count = 1;
    cfg.model.channels = 4;
    cfg.model.sp_width = 4;
    cfg.schedule.batch_size = 4;
    cfg.schedule.step1_epochs = 1;
    cfg.schedule.max_epochs = 3;
    cfg.distill.pool_size = 8;
    cfg.data.shards = Some(shards.to_path_buf());
    cfg.output.dir = out.to_path_buf();
    cfg
}

/// Toy scenes, prepared ×2 shards and a written config inside `root`.
fn setup(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let scenes = root.join("scenes");
    let shards = root.join("shards");
    ok(&["make-toy", "--output", p(&scenes), "--count", "2", "--size", "48", "--seed", "3"], root);
    ok(
        &["prepare", "--input", p(&scenes), "--output", p(&shards), "--scale", "2", "--patch-size", "32", "--count", "8", "--seed", "1", "--depth-format", "pfm"],
        root,
    );
    let config = root.join("train.toml");
    std::fs::write(&config, tiny_config(&shards, &root.join("run")).to_toml()).unwrap();
    (scenes, shards, config)
}

#[test]
fn make_toy_and_prepare_write_manifests_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, shards, _) = setup(dir.path());
    assert!(scenes.join("toy-000_color.png").exists());
    assert!(scenes.join("toy-001_depth.pfm").exists());
    for d in [&scenes, &shards] {
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(RUN_MANIFEST)).unwrap()).unwrap();
        assert!(m["config_hash"].as_str().unwrap().len() == 64);
        assert!(m["version"].is_string());
        assert!(m["seed"].is_u64());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(shards.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 8);

    let again = dir.path().join("again");
    let out = ok(
        &["prepare", "--input", p(&scenes), "--output", p(&again), "--scale", "2", "--patch-size", "32", "--count", "8", "--seed", "1", "--depth-format", "pfm"],
        dir.path(),
    );
    assert!(out.contains("2 pairs") && out.contains("8 patches"), "{out}");
    for entry in std::fs::read_dir(&shards).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().starts_with("shard-") {
            assert_eq!(std::fs::read(shards.join(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
        }
    }
}

#[test]
fn unsupported_scale_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s");
    ok(&["make-toy", "--output", p(&scenes), "--count", "1", "--size", "32"], dir.path());
    let out = bin(&["prepare", "--input", p(&scenes), "--output", "x", "--scale", "3", "--depth-format", "pfm"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unsupported scale") && err.contains("2, 4, 8, 16"), "{err}");
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[schedule]\nbatch_size = 0\ninitial_lr = -1.0\n[model]\nscale = 5\n").unwrap();
    let out = bin(&["train", "--config", p(&config)], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["batch_size", "initial_lr", "unsupported scale 5", "data.shards"] {
        assert!(err.contains(needle), "missing {needle} in {err}");
    }
}

#[test]
fn train_resume_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (scenes, shards, config) = setup(root);
    let run = root.join("run");

    ok(&["train", "--config", p(&config)], root);
    for f in [FINAL_CHECKPOINT, RESUME_CHECKPOINT, TRAIN_LOG, RUN_MANIFEST, "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join(TRAIN_LOG)).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r["epoch"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2, 3]);
    for key in ["lr", "losses", "e_dsr", "e_de", "teacher", "wall_time_s"] {
        assert!(records[2].get(key).is_some(), "{key}");
    }
    let full = load_checkpoint(&run.join(FINAL_CHECKPOINT)).unwrap();

    // stop after the first collaborative epoch, then resume to the end
    let mut short = tiny_config(&shards, &root.join("part"));
    short.schedule.max_epochs = 2;
    let short_cfg = root.join("short.toml");
    std::fs::write(&short_cfg, short.to_toml()).unwrap();
    ok(&["train", "--config", p(&short_cfg)], root);
    let part = root.join("part");
    ok(&["train", "--config", p(&config), "--resume", p(&part.join(RESUME_CHECKPOINT)), "--output", p(&part)], root);
    let resumed = load_checkpoint(&part.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(resumed, full);
    let epochs: Vec<u64> = std::fs::read_to_string(part.join(TRAIN_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3]);

    // ablation switch lands in the recorded configuration
    let abl = root.join("abl");
    ok(&["train", "--config", p(&config), "--ablate", "no-distill", "--output", p(&abl)], root);
    let recorded = TrainConfig::load(&abl.join("config.toml")).unwrap();
    assert_eq!(recorded.loss.rho2, 0.0);
    assert_ne!(load_checkpoint(&abl.join(FINAL_CHECKPOINT)).unwrap(), full);

    // evaluation: one row per scene and method plus mean rows
    let report_dir = root.join("report");
    let text = ok(
        &["eval", "--checkpoint", p(&run.join(FINAL_CHECKPOINT)), "--data", p(&scenes), "--scale", "2", "--depth-format", "pfm", "--output", p(&report_dir)],
        root,
    );
    assert!(text.contains("bicubic") && text.contains("mean"), "{text}");
    let csv = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2 + 2);
    let bicubic_mad: f64 = rows[0].split(',').nth(4).unwrap().parse().unwrap();
    assert!(bicubic_mad > 0.0);
    assert!(report_dir.join(RUN_MANIFEST).exists());
    let mismatch = bin(
        &["eval", "--checkpoint", p(&run.join(FINAL_CHECKPOINT)), "--data", p(&scenes), "--scale", "4", "--depth-format", "pfm"],
        root,
    );
    assert_eq!(mismatch.status.code(), Some(1));

    // inference from a directory holding nothing but the depth map and the checkpoint
    let bare = root.join("bare");
    std::fs::create_dir(&bare).unwrap();
    std::fs::copy(run.join(FINAL_CHECKPOINT), bare.join("model.ckpt")).unwrap();
    write_depth(&bare.join("lr.pfm"), &DepthMap::from_fn(16, 16, |y, x| (y + x) as f64 / 30.0)).unwrap();
    let msg = ok(&["infer", "--checkpoint", "model.ckpt", "--input", "lr.pfm", "--output", "hr.pfm"], &bare);
    assert!(msg.contains("16x16 -> 32x32") && msg.contains("ms"), "{msg}");
    assert_eq!(read_depth(&bare.join("hr.pfm")).unwrap().dims(), (32, 32));
    let first = std::fs::read(bare.join("hr.pfm")).unwrap();
    ok(&["infer", "--checkpoint", "model.ckpt", "--input", "lr.pfm", "--output", "hr.pfm"], &bare);
    assert_eq!(std::fs::read(bare.join("hr.pfm")).unwrap(), first);
    ok(&["infer", "--checkpoint", "model.ckpt", "--input", "lr.pfm", "--output", "hr.png"], &bare);
    assert_eq!(read_depth(&bare.join("hr.png")).unwrap().dims(), (32, 32));
    assert!(bare.join("hr.pfm.run.json").exists());
}

#[test]
fn infer_has_no_colour_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["infer", "--checkpoint", "a", "--input", "b", "--output", "c", "--rgb", "d.png"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rgb"));
    let help = ok(&["infer", "--help"], dir.path());
    let flags: Vec<String> = help.lines().map(|l| l.trim().to_lowercase()).filter(|l| l.starts_with('-')).collect();
    assert_eq!(flags.len(), 4, "{help}");
    for f in &flags {
        assert!(!f.contains("rgb") && !f.contains("colo"), "{f}");
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    write_depth(&dir.path().join("lr.pfm"), &DepthMap::constant(8, 8, 0.5)).unwrap();
    let out = bin(&["infer", "--checkpoint", "none.ckpt", "--input", "lr.pfm", "--output", "o.pfm"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.ckpt"));
}
