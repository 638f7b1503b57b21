//! The `mixscene` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, D};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_config_with, Config};
use crate::datasets::{generate_multimnist, load_dataset, load_image, tensor_to_rgb8, write_png_rgb, SceneLayout, MANIFEST_FILE};
use crate::digits::DigitSet;
use crate::error::{Error, Result};
use crate::manipulation::{decompose, deterministic_infer, export_latents, read_latent_export, recompose, shuffle_objects, swap_category, vary_local};
use crate::metrics::{evaluate, write_detections, write_report, Detector, ModelDetector, OracleDetector};
use crate::plot::{plot_latents, plot_metrics};
use crate::trainer::{checkpoint_path, read_metrics_log, resume, train_from, TrainState, METRICS_FILE};

#[derive(Debug, Parser)]
#[command(name = "mixscene", version, about = "Unsupervised multi-object detection and clustering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a MultiMNIST-style scene dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on annotated scenes.
    Eval(EvalArgs),
    /// Edit the latents of one image and render the result.
    Manipulate(ManipulateArgs),
    /// Write appearance latents of correctly detected objects as CSV.
    ExportLatents(ExportArgs),
    /// Plot a metrics log or a latent export as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true))]
pub struct GenDataArgs {
    /// Directory with MNIST IDX files (plain or gzipped).
    #[arg(long, group = "source")]
    pub mnist_dir: Option<PathBuf>,
    /// Draw this many procedural digits instead of reading MNIST.
    #[arg(long, group = "source", value_name = "N")]
    pub synthetic_digits: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 10)]
    pub max_objects: usize,
    /// Split name used in scene ids.
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config field, e.g. `--set train.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Held-out split evaluated on the `train.eval_every` schedule.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Continue from a checkpoint; its config snapshot is used.
    #[arg(long, conflicts_with_all = ["config", "overrides"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `report.json` and `detections.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the ground truth itself instead of a model.
    #[arg(long, hide = true)]
    pub oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ManipulationMode {
    Swap,
    Vary,
    Shuffle,
    Reconstruct,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG scene of the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ManipulationMode,
    /// Target cluster for `swap`.
    #[arg(long)]
    pub target_k: Option<usize>,
    /// Residual noise scale for `vary`.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PNG: original, reconstruction and (except `reconstruct`) the edit.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
pub struct PlotArgs {
    #[arg(long, group = "input")]
    pub metrics_log: Option<PathBuf>,
    #[arg(long, group = "input")]
    pub latents: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub code: i32,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn ok(artifacts: Vec<PathBuf>, summary: String) -> Self {
        Self {
            code: 0,
            artifacts,
            summary,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalAbort { .. } => 3,
        Error::Integrity { .. } | Error::Incompatible { .. } => 4,
        Error::Tensor(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return CommandResult {
                code: e.exit_code(),
                artifacts: Vec::new(),
                summary: e.render().to_string(),
            }
        }
    };
    match execute(cli.command) {
        Ok(r) => r,
        Err(e) => {
            let mut summary = format!("error: {e}");
            if let Error::NumericalAbort { dump, .. } = &e {
                summary.push_str(&format!("\ndiagnostics: {}", dump.display()));
            }
            CommandResult {
                code: exit_code(&e),
                artifacts: Vec::new(),
                summary,
            }
        }
    }
}

pub fn execute(command: Command) -> Result<CommandResult> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Manipulate(a) => manipulate(a),
        Command::ExportLatents(a) => export_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<CommandResult> {
    let digits = match (&a.mnist_dir, a.synthetic_digits) {
        (Some(dir), _) => DigitSet::load_mnist(dir)?,
        (None, Some(n)) => DigitSet::synthetic(n, a.seed),
        (None, None) => return Err(Error::Argument("pass --mnist-dir or --synthetic-digits".into())),
    };
    let layout = SceneLayout {
        image_size: a.image_size,
        max_objects: a.max_objects,
    };
    let m = generate_multimnist(&digits, a.count, a.seed, &a.out, &a.split, &layout)?;
    let manifest = a.out.join(MANIFEST_FILE);
    Ok(CommandResult::ok(
        vec![manifest.clone()],
        format!("wrote {} scenes; manifest {}", m.count, manifest.display()),
    ))
}

fn train_cmd(a: TrainArgs) -> Result<CommandResult> {
    let data = load_dataset(&a.data)?;
    let eval_data = a.eval_data.as_deref().map(load_dataset).transpose()?;
    let state = match &a.resume {
        Some(ckpt) => resume(ckpt)?,
        None => {
            let config = match &a.config {
                Some(path) => load_config_with(path, &a.overrides)?,
                None => Config::from_toml_str("", &a.overrides)?,
            };
            TrainState::new(&config)?
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let snapshot = a.out.join("config.toml");
    state.config().save(&snapshot)?;
    let out = train_from(state, &data, &a.out, eval_data.as_ref(), None)?;
    let step = out.state.step;
    let mut artifacts = vec![snapshot, a.out.join(METRICS_FILE), checkpoint_path(&a.out, step)];
    let mut summary = format!("trained to step {step}");
    if let Some(r) = &out.report {
        artifacts.push(a.out.join(crate::trainer::REPORT_FILE));
        summary.push_str(&format!("; AP {:.4} ACC {:.4} NMI {:.4}", r.ap, r.acc, r.nmi));
    }
    Ok(CommandResult::ok(artifacts, summary))
}

fn eval_cmd(a: EvalArgs) -> Result<CommandResult> {
    let data = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let evaluation = if a.oracle {
        let mut det = OracleDetector::new(&data);
        evaluate(&mut det, &data, &Config::default().eval, 10, 32, candle_core::DType::F32)?
    } else {
        let ckpt = a.ckpt.as_ref().ok_or_else(|| Error::Argument("--ckpt is required".into()))?;
        let state = resume(ckpt)?;
        let model = &state.model;
        let cfg = &model.config;
        let mut det = ModelDetector {
            model,
            eval: cfg.eval.clone(),
        };
        let det: &mut dyn Detector = &mut det;
        evaluate(det, &data, &cfg.eval, cfg.model.num_clusters, cfg.train.batch_size, model.dtype())?
    };
    let report = a.out.join("report.json");
    let detections = a.out.join("detections.jsonl");
    write_report(&evaluation.report, &report)?;
    write_detections(&data, &evaluation.detections, &detections)?;
    let r = &evaluation.report;
    Ok(CommandResult::ok(
        vec![report, detections],
        format!("AP {:.4} ACC {:.4} NMI {:.4} over {} scenes", r.ap, r.acc, r.nmi, r.n_scenes),
    ))
}

fn manipulate(a: ManipulateArgs) -> Result<CommandResult> {
    let state = resume(&a.ckpt)?;
    let model = &state.model;
    let c = model.config.model.num_clusters;
    if a.mode == ManipulationMode::Swap {
        match a.target_k {
            Some(k) if k >= c => {
                return Err(Error::Argument(format!("--target-k {k} is out of range for {c} clusters")))
            }
            None => return Err(Error::Argument("--mode swap needs --target-k".into())),
            _ => {}
        }
    }
    let image = load_image(&a.image, model.dtype())?;
    let grid = deterministic_infer(model, &image)?;
    let (_, recon) = model.render(&grid)?;
    let mut panels = vec![image.unsqueeze(0)?, recon.image];
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let edited = match a.mode {
        ManipulationMode::Reconstruct => None,
        ManipulationMode::Swap => {
            let objs = decompose(&grid, &model.mixture)?;
            let k = a.target_k.expect("checked above");
            Some(recompose(&grid, &swap_category(&objs, k, &model.mixture)?)?)
        }
        ManipulationMode::Vary => {
            let objs = decompose(&grid, &model.mixture)?;
            Some(recompose(&grid, &vary_local(&objs, a.noise, &mut rng)?)?)
        }
        ManipulationMode::Shuffle => Some(shuffle_objects(&grid, &mut rng)?),
    };
    if let Some(g) = edited {
        panels.push(model.render(&g)?.1.image);
    }
    let n = panels.len();
    write_panels(&panels, &a.out)?;
    Ok(CommandResult::ok(vec![a.out.clone()], format!("wrote {n} panels to {}", a.out.display())))
}

/// Writes `(1, 3, H, W)` images side by side with a white 2-pixel gutter.
fn write_panels(panels: &[Tensor], path: &Path) -> Result<()> {
    let (_, _, h, _) = panels[0].dims4()?;
    let gutter = Tensor::ones((3, h, 2), panels[0].dtype(), panels[0].device())?;
    let mut parts = Vec::new();
    for (i, p) in panels.iter().enumerate() {
        if i > 0 {
            parts.push(gutter.clone());
        }
        parts.push(p.squeeze(0)?.clamp(0.0, 1.0)?);
    }
    let strip = Tensor::cat(&parts, D::Minus1)?;
    let (w, h, rgb) = tensor_to_rgb8(&strip)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_png_rgb(path, w, h, &rgb)
}

fn export_cmd(a: ExportArgs) -> Result<CommandResult> {
    let state = resume(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let cfg = &state.model.config;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = export_latents(&state.model, &data, &a.out, &cfg.eval, cfg.train.batch_size)?;
    Ok(CommandResult::ok(vec![a.out.clone()], format!("exported {n} latent rows")))
}

fn plot_cmd(a: PlotArgs) -> Result<CommandResult> {
    let summaries = match (&a.metrics_log, &a.latents) {
        (Some(log), _) => plot_metrics(&read_metrics_log(log)?, &a.out)?,
        (None, Some(lat)) => vec![plot_latents(&read_latent_export(lat)?, &a.out.join("latents.svg"))?],
        (None, None) => return Err(Error::Argument("pass --metrics-log or --latents".into())),
    };
    let summary = summaries
        .iter()
        .map(|s| {
            let series: Vec<String> = s.series.iter().map(|(n, k)| format!("{n}: {k}")).collect();
            format!("{} ({})", s.path.display(), series.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(CommandResult::ok(summaries.into_iter().map(|s| s.path).collect(), summary))
}
