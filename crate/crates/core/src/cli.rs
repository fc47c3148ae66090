//! Command-line interface: `prepare`, `make-toy`, `train`, `eval`, `infer`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::data::shards::{read_shards, sha256_hex, write_shards, ShardManifest};
use crate::data::{
    extract_patches, generate_toy_pairs, load_rgbd_pairs, read_depth, write_depth, write_png_rgb, DepthFormat, Scale,
    COLOR_SUFFIX, DEPTH_SUFFIX,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MODEL_METHOD};
use crate::train::{
    infer, load_checkpoint, save_checkpoint, train, Ablation, Dataset, EpochRecord, TrainConfig, TrainObserver,
    TrainState,
};

pub const RUN_MANIFEST: &str = "run.json";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const RESUME_CHECKPOINT: &str = "checkpoint.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Parser)]
#[command(name = "crossdsr", version, about = "Depth super-resolution with cross-task distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract training patches from RGB-D pairs into checksummed shards.
    Prepare(PrepareArgs),
    /// Render procedural RGB-D scenes.
    MakeToy(MakeToyArgs),
    /// Run both training steps.
    Train(TrainArgs),
    /// Score a checkpoint and the bicubic baseline on full images.
    Eval(EvalArgs),
    /// Super-resolve one depth map; no colour input exists.
    Infer(InferArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    #[arg(long, default_value_t = 256)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 10000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DepthFormat::Png16)]
    pub depth_format: DepthFormat,
    #[arg(long, default_value_t = 256)]
    pub per_shard: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DepthFormat::Pfm)]
    pub depth_format: DepthFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shards: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    /// Native depth units per normalized unit.
    #[arg(long, default_value_t = 1.0)]
    pub unit_scale: f64,
    #[arg(long, value_enum, default_value_t = DepthFormat::Png16)]
    pub depth_format: DepthFormat,
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Directory for `report.csv`, `report.txt` and the run manifest.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Low-resolution depth map (`.png` or `.pfm`).
    #[arg(long)]
    pub input: PathBuf,
    /// High-resolution output (`.png` or `.pfm`).
    #[arg(long)]
    pub output: PathBuf,
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, A: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub args: &'a A,
}

fn write_manifest<A: Serialize>(path: &Path, command: &str, config_hash: String, seed: Option<u64>, args: &A) -> Result<()> {
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash,
        seed,
        args,
    };
    let json = serde_json::to_vec_pretty(&m).expect("manifest serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn args_hash<A: Serialize>(args: &A) -> String {
    sha256_hex(&serde_json::to_vec(args).expect("arguments serialize"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::MakeToy(a) => cmd_make_toy(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
    }
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let scale = Scale::try_from(a.scale)?;
    let pairs = load_rgbd_pairs(&a.input, a.depth_format)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no RGB-D pairs", a.input.display())));
    }
    let samples = extract_patches(&pairs, a.patch_size, a.count, scale, a.seed)?;
    let manifest = ShardManifest {
        format: String::new(),
        scale,
        patch_size: a.patch_size,
        count: 0,
        seed: a.seed,
        source: a.input.display().to_string(),
        shards: Vec::new(),
    };
    let manifest = write_shards(&a.output, &samples, a.per_shard, manifest)?;
    write_manifest(&a.output.join(RUN_MANIFEST), "prepare", args_hash(a), Some(a.seed), a)?;
    println!(
        "{}: {} pairs, {} patches of {}x{} at {scale} in {} shards",
        a.input.display(),
        pairs.len(),
        samples.len(),
        a.patch_size,
        a.patch_size,
        manifest.shards.len()
    );
    Ok(())
}

pub fn cmd_make_toy(a: &MakeToyArgs) -> Result<()> {
    let pairs = generate_toy_pairs(a.seed, a.count, a.size)?;
    std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    for p in &pairs {
        write_png_rgb(&a.output.join(format!("{}{COLOR_SUFFIX}.png", p.name)), &p.rgb)?;
        let depth = a.output.join(format!("{}{DEPTH_SUFFIX}.{}", p.name, a.depth_format.extension()));
        write_depth(&depth, &p.depth)?;
    }
    write_manifest(&a.output.join(RUN_MANIFEST), "make-toy", args_hash(a), Some(a.seed), a)?;
    println!("wrote {} toy scenes of {}x{} to {}", pairs.len(), a.size, a.size, a.output.display());
    Ok(())
}

/// Appends epoch records to the JSON-lines log and keeps a resumable checkpoint.
struct RunObserver {
    log: std::fs::File,
    checkpoint: PathBuf,
    every: usize,
}

impl TrainObserver for RunObserver {
    fn on_epoch(&mut self, record: &EpochRecord, state: &TrainState) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.log, "{line}").map_err(|e| Error::io(&self.checkpoint, e))?;
        let teacher = record.teacher.map(|t| format!(" teacher {t}")).unwrap_or_default();
        info!(
            "epoch {} ({}) lr {:.1e} loss {:.5}{teacher} in {:.1}s",
            record.epoch,
            record.phase,
            record.lr,
            record.losses.get("total").or_else(|| record.losses.get("dsr")).copied().unwrap_or(f64::NAN),
            record.wall_time_s
        );
        if self.every > 0 && record.epoch.is_multiple_of(self.every) {
            save_checkpoint(state, &self.checkpoint)?;
        }
        Ok(())
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (_, samples) = read_shards(dir)?;
    Dataset::new(&samples)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    for &ab in &a.ablate {
        cfg.apply_ablation(ab);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &a.shards {
        cfg.data.shards = Some(s.clone());
    }
    if let Some(o) = &a.output {
        cfg.output.dir = o.clone();
    }
    let mut problems = match cfg.validate() {
        Ok(()) => Vec::new(),
        Err(Error::Config(p)) => p,
        Err(e) => return Err(e),
    };
    if cfg.data.shards.is_none() {
        problems.push("data.shards (or --shards) is required".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let data = load_dataset(cfg.data.shards.as_ref().expect("checked"))?;
    let validation = cfg.data.validation.as_ref().map(|p| load_dataset(p)).transpose()?;
    let state = match &a.resume {
        Some(path) => {
            let s = load_checkpoint(path)?;
            s.validate_against(&cfg)?;
            info!("resuming from {} at epoch {}", path.display(), s.epoch);
            s
        }
        None => TrainState::init(&cfg)?,
    };

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(dir, e))?;
    write_manifest(&dir.join(RUN_MANIFEST), "train", cfg.hash(), Some(cfg.seed), a)?;
    let log_path = dir.join(TRAIN_LOG);
    let log = OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut obs = RunObserver {
        log,
        checkpoint: dir.join(RESUME_CHECKPOINT),
        every: cfg.output.checkpoint_every,
    };
    let state = train(state, &cfg, &data, validation.as_ref(), &mut obs)?;
    let final_path = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_path)?;
    println!("training finished at epoch {}; checkpoint {}", state.epoch, final_path.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scale = Scale::try_from(a.scale)?;
    let state = load_checkpoint(&a.checkpoint)?;
    if state.dsr.scale != scale {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained for {}, evaluation requested {scale}",
            state.dsr.scale
        )));
    }
    let pairs = load_rgbd_pairs(&a.data, a.depth_format)?;
    let name = a
        .dataset_name
        .clone()
        .unwrap_or_else(|| a.data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let report = evaluate(&name, &pairs, Some(&state.dsr), scale, a.unit_scale)?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join("report.csv"), report.to_csv()).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join("report.txt"), report.to_text()).map_err(|e| Error::io(dir, e))?;
        write_manifest(&dir.join(RUN_MANIFEST), "eval", args_hash(a), None, a)?;
    }
    if let Some(m) = report.mean(MODEL_METHOD) {
        info!("mean MAD {:.4} RMSE {:.4}", m.mad, m.rmse);
    }
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let d_lr = read_depth(&a.input)?;
    let started = Instant::now();
    let d_hr = infer(&d_lr, &state.dsr, state.dsr.scale)?;
    let elapsed = started.elapsed();
    write_depth(&a.output, &d_hr)?;
    let mut manifest = a.output.clone().into_os_string();
    manifest.push(".run.json");
    write_manifest(Path::new(&manifest), "infer", args_hash(a), None, a)?;
    println!(
        "{}x{} -> {}x{} in {:.3} ms",
        d_lr.height(),
        d_lr.width(),
        d_hr.height(),
        d_hr.width(),
        elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}
