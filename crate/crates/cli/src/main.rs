use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use waterseg::checkpoint;
use waterseg::datasets::{self, DatasetManifest, DedupMode, Split};
use waterseg::harness::{self, RunConfig, Variant};
use waterseg::lora;
use waterseg::metrics::{self, Averaging};
use waterseg::segformer::{ModelConfig, SegFormer};
use waterseg::{Error, Result};

#[derive(Parser)]
#[command(name = "waterseg", version, about = "Water segmentation: data, training, evaluation and reports")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic water-scene corpus.
    Synth(SynthArgs),
    /// Remove train/val samples that duplicate test samples.
    Dedup(DedupArgs),
    /// Merge several corpora into one manifest.
    Merge(MergeArgs),
    /// Train a model.
    Train,
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Write a binary water mask for one image.
    Predict(PredictArgs),
    /// Train several variants and print comparison tables.
    Experiment(ExperimentArgs),
    /// Color hits, false alarms and misses over an image.
    Overlay(OverlayArgs),
    /// Print the layer and parameter inventory.
    Summary(SummaryArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Train/val/test proportions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.15, 0.15])]
    split: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Perceptual,
}

#[derive(Args)]
struct DedupOpts {
    #[arg(long, value_enum, default_value = "exact")]
    mode: ModeArg,
    /// Maximum average-hash distance in perceptual mode.
    #[arg(long, default_value_t = 5)]
    hamming: u32,
}

impl DedupOpts {
    fn mode(&self) -> DedupMode {
        match self.mode {
            ModeArg::Exact => DedupMode::Exact,
            ModeArg::Perceptual => DedupMode::Perceptual {
                hamming_threshold: self.hamming,
            },
        }
    }
}

#[derive(Args)]
struct DedupArgs {
    /// Corpus root.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    opts: DedupOpts,
}

#[derive(Args)]
struct MergeArgs {
    /// Corpus roots (repeatable).
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Source whose test split is kept.
    #[arg(long)]
    eval_source: Option<String>,
    #[command(flatten)]
    opts: DedupOpts,
}

#[derive(Clone, Copy, ValueEnum)]
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

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Average per-image scores instead of pooling pixels.
    #[arg(long = "macro")]
    macro_avg: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Comma-separated: subset-<pct>, full, lora.
    #[arg(long, value_delimiter = ',', default_values_t = ["subset-25".to_string(), "full".to_string(), "lora".to_string()])]
    variants: Vec<String>,
    /// Seeds per variant; the table reports the median IoU.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args)]
struct SummaryArgs {
    /// Named architecture when no config or checkpoint is given.
    #[arg(long, default_value = "nano")]
    model: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn require_out(cli_out: &Option<PathBuf>) -> Result<&Path> {
    cli_out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_manifest(m: &DatasetManifest, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => m.save(p),
        None => {
            println!("{}", serde_json::to_string_pretty(m)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let out = require_out(&cli.out)?;
            let split: [f64; 3] = a.split.as_slice().try_into().map_err(|_| Error::Config("--split takes three proportions".into()))?;
            datasets::synth_generate_split(a.n, a.size, cli.seed.unwrap_or(0), out, split)?;
            let m = datasets::load_manifest(out)?;
            println!(
                "wrote {} scenes to {} (train {}, val {}, test {})",
                m.samples.len(),
                out.display(),
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test)
            );
        }
        Command::Dedup(a) => {
            let m = datasets::dedup_cross_split(&datasets::load_manifest(&a.data)?, a.opts.mode());
            eprintln!("removed {} duplicate(s)", m.dedup_report.len());
            write_manifest(&m, cli.out.as_deref())?;
        }
        Command::Merge(a) => {
            let ms = a.data.iter().map(|d| datasets::load_manifest(d)).collect::<Result<Vec<_>>>()?;
            let m = datasets::merge_datasets(&ms, a.eval_source.as_deref(), a.opts.mode())?;
            write_manifest(&m, cli.out.as_deref())?;
        }
        Command::Train => {
            let cfg = run_config(&cli)?;
            let rec = harness::train(&cfg)?;
            println!("{}", serde_json::to_string(&summary_line(&rec))?);
        }
        Command::Eval(a) => {
            let averaging = if a.macro_avg { Averaging::Macro } else { Averaging::Micro };
            let report = harness::evaluate(&a.checkpoint, &a.data, a.split.into(), a.threshold, averaging)?;
            print!("{}", metrics::render_metrics_table(&[("model", &report)], 5));
            if let Some(out) = &cli.out {
                let json = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(out, json).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
            }
        }
        Command::Predict(a) => {
            let out = require_out(&cli.out)?;
            let mask = harness::predict(&a.checkpoint, &a.image, out, a.threshold)?;
            println!("wrote {} ({:.5} water)", out.display(), mask.fraction());
        }
        Command::Experiment(a) => {
            let cfg = run_config(&cli)?;
            let variants = a.variants.iter().map(|v| Variant::named(v)).collect::<Result<Vec<_>>>()?;
            let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
            let report = harness::experiment_matrix(&cfg, &variants, &seeds)?;
            print!("{}\n{}", report.comparison_table(), report.resource_table());
        }
        Command::Overlay(a) => {
            let out = require_out(&cli.out)?;
            let image = datasets::read_rgb(&a.image)?;
            let pred = datasets::read_mask(&a.pred)?;
            let gt = datasets::read_mask(&a.gt)?;
            let img = harness::render_overlay(&image, &pred, &gt, a.alpha)?;
            img.save(out).map_err(|e| Error::Image {
                path: out.to_path_buf(),
                source: e,
            })?;
            println!("wrote {}", out.display());
        }
        Command::Summary(a) => {
            let model = match (&a.checkpoint, &cli.config) {
                (Some(ck), _) => checkpoint::load::<f32>(ck)?,
                (None, Some(_)) => harness::build_model(&run_config(&cli)?)?,
                (None, None) => SegFormer::<f32>::new(ModelConfig::by_name(&a.model)?, 0)?,
            };
            for p in model.summary() {
                println!("{:<40} {:>16} {:>9}{}", p.name, format!("{:?}", p.shape), p.numel, if p.trainable { "" } else { "  frozen" });
            }
            let r = lora::trainable_param_report(model.params());
            println!("total {} trainable {} frozen {} ratio {:.5}", r.trainable + r.frozen, r.trainable, r.frozen, r.ratio);
        }
    }
    Ok(())
}

fn summary_line(rec: &harness::RunRecord) -> serde_json::Value {
    serde_json::json!({
        "out_dir": rec.config.out_dir,
        "epochs": rec.epoch_loss.len(),
        "steps": rec.steps,
        "final_loss": rec.final_loss(),
        "seconds_per_epoch": rec.seconds_per_epoch(),
        "test_iou": rec.test_metrics.and_then(|m| m.iou),
        "train_iou": rec.train_metrics.and_then(|m| m.iou),
        "trainable_params": rec.trainable.trainable,
        "total_params": rec.total_params,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
