//! Command-line runner: dataset generation, training, evaluation, the
//! ablation grid, the memory sweep, and retrieval scoring, each as one
//! reproducible command. Every command writes a `run.json` manifest into its
//! output directory before doing any work, so output directories are
//! self-describing; metric reports themselves carry no timestamps.
//!
//! Exit codes: 0 success, 2 configuration/validation problems, 3 runtime or
//! numerical failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use skipmib_core::checkpoint;
use skipmib_core::config::{apply_overrides, RunConfig};
use skipmib_core::datagen::{generate_datasets, DatasetSpec};
use skipmib_core::error::{Error, Result};
use skipmib_core::eval::{
    cross_modal_recall, evaluate_world, run_ablations, sweep_memory, Modality, PerSample,
};
use skipmib_core::io::{load_world, save_world};
use skipmib_core::mib::AblationFlags;
use skipmib_core::model::ModelConfig;
use skipmib_core::plot::{ablation_bars_svg, loss_curve_svg, sweep_heatmap_svg};
use skipmib_core::training::train_loop;

/// Scalar type for command-line runs.
type F = f32;

#[derive(Parser)]
#[command(
    name = "skipmib",
    version,
    about = "Train on disjoint image-text and text-audio corpora, then generate audio straight from images"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-corpus dataset directory
    GenData(GenDataArgs),
    /// Train a model on a generated dataset directory
    Train(TrainArgs),
    /// Score a checkpoint: skip-modal generation metrics plus retrieval
    Eval(EvalArgs),
    /// Train and evaluate the full model and all four ablation variants
    Ablate(AblateArgs),
    /// Sensitivity sweep over the memory shape (slots x width)
    Sweep(SweepArgs),
    /// Cross-modal retrieval scores for a checkpoint
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; omit for the built-in desk profile
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field, repeatable: --set model.d_z=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::desk(),
        };
        apply_overrides(&base, &self.set)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory to write the dataset into
    #[arg(long)]
    out: PathBuf,
    /// Override the dataset seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Alternate,
    Mixing,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    #[value(name = "no_M")]
    NoM,
    #[value(name = "M_to_FC")]
    MToFc,
    #[value(name = "no_T")]
    NoT,
    #[value(name = "no_Ladv")]
    NoLadv,
}

impl AblateArg {
    fn flags(self) -> AblationFlags {
        match self {
            AblateArg::NoM => AblationFlags { no_m: true, ..Default::default() },
            AblateArg::MToFc => AblationFlags { m_to_fc: true, ..Default::default() },
            AblateArg::NoT => AblationFlags { no_t: true, ..Default::default() },
            AblateArg::NoLadv => AblationFlags { no_ladv: true, ..Default::default() },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory from gen-data
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, metrics, and plots
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Batch composition per step
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Train one ablation variant instead of the full model
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    /// Override the epoch count
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (.smck) to score
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory the model should be scored on
    #[arg(long)]
    data: PathBuf,
    /// Directory for the metric report
    #[arg(long)]
    out: PathBuf,
    /// k for retrieval recall@k
    #[arg(long, default_value_t = 3)]
    retrieval_k: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds to repeat every variant over
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Memory slot counts to try
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 8, 32])]
    n_k: Vec<usize>,
    /// Memory widths to try
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 32])]
    d_k: Vec<usize>,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// k for recall@k
    #[arg(long, default_value_t = 3)]
    retrieval_k: usize,
}

/// Written to `<out>/run.json` before any work starts and finalized after.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    code_version: String,
    started_unix: u64,
    ended_unix: Option<u64>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        inputs: &[(&str, &Path)],
        outputs: &[&str],
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: inputs
                .iter()
                .map(|(k, p)| (k.to_string(), p.display().to_string()))
                .collect(),
            outputs: outputs.iter().map(|o| (o.to_string(), o.to_string())).collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now_unix(),
            ended_unix: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn finish(mut self, dir: &Path) -> Result<()> {
        self.ended_unix = Some(now_unix());
        self.write(dir)
    }
}

/// Worker cap for ablation/sweep parallelism; defaults to one worker.
fn worker_threads() -> usize {
    std::env::var("SKIPMIB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Human-readable field-by-field differences between a checkpoint's model
/// and the dataset it is asked to score.
fn model_data_diff(m: &ModelConfig, s: &DatasetSpec) -> Vec<String> {
    let mut diffs = Vec::new();
    if m.vocab_size != s.vocab_size {
        diffs.push(format!("vocab_size: checkpoint {} vs dataset {}", m.vocab_size, s.vocab_size));
    }
    if m.image_h != s.image_h || m.image_w != s.image_w {
        diffs.push(format!(
            "image: checkpoint {}x{} vs dataset {}x{}",
            m.image_h, m.image_w, s.image_h, s.image_w
        ));
    }
    if m.bands != s.bands {
        diffs.push(format!("bands: checkpoint {} vs dataset {}", m.bands, s.bands));
    }
    let rows = s.audio_rows();
    if rows % m.chunk_rows != 0 || rows % m.rows_per_step() != 0 {
        diffs.push(format!(
            "audio rows {} do not divide into chunks of {} and groups of {}",
            rows,
            m.chunk_rows,
            m.rows_per_step()
        ));
    }
    diffs
}

fn check_fit(m: &ModelConfig, s: &DatasetSpec) -> Result<()> {
    let diffs = model_data_diff(m, s);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "checkpoint does not fit this dataset:\n  {}",
            diffs.join("\n  ")
        )))
    }
}

#[derive(Serialize)]
struct RecallReport {
    k: usize,
    gallery_size: usize,
    recall: f64,
    /// Expected recall@k when ranking is random: k over the gallery size.
    baseline: f64,
}

#[derive(Serialize)]
struct EvalReport {
    n: usize,
    median_accuracy: f64,
    token_error_rate: f64,
    unigram_precision: f64,
    vocab_expressivity: usize,
    exclusive_seen: usize,
    exclusive_total: usize,
    image_to_text_retrieval: RecallReport,
    samples: Vec<PerSample>,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    cfg.validate()?;
    let manifest = RunManifest::new(
        "gen-data",
        serde_json::to_value(&cfg)?,
        cfg.dataset.seed,
        &[],
        &["manifest.json"],
    );
    manifest.write(&a.out)?;

    let world = generate_datasets(&cfg.dataset)?;
    save_world(&a.out, &world)?;
    let shared = world.a_tokens.intersection(&world.b_tokens).count();
    println!(
        "dataset written to {}: a={} b={} eval_a={} eval_b={} vocab={} overlap={:.2} shared_tokens={}",
        a.out.display(),
        world.a.len(),
        world.b.len(),
        world.eval_a.len(),
        world.eval_b.len(),
        cfg.dataset.vocab_size,
        cfg.dataset.overlap_fraction,
        shared
    );
    manifest.finish(&a.out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(st) = a.strategy {
        cfg.train.strategy = match st {
            StrategyArg::Alternate => skipmib_core::training::Strategy::Alternate,
            StrategyArg::Mixing => skipmib_core::training::Strategy::Mixing,
        };
    }
    if let Some(v) = a.ablate {
        cfg.train.flags = v.flags();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;

    let world = load_world(&a.data)?;
    check_fit(&cfg.model, &world.spec)?;
    let manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg)?,
        cfg.train.seed,
        &[("data", a.data.as_path())],
        &["final.smck", "latest.smck", "metrics.ndjson", "loss_curve.svg"],
    );
    manifest.write(&a.out)?;

    let (_, records) = train_loop::<F>(&world, &cfg.model, &cfg.train, Some(&a.out))?;
    if let Some(last) = records.last() {
        fs::write(a.out.join("loss_curve.svg"), loss_curve_svg(&records)?)?;
        println!(
            "trained {} steps over {} epochs; final total loss {:.4}",
            records.len(),
            cfg.train.epochs,
            last.loss.total
        );
    } else {
        println!("no training steps requested; wrote the initial checkpoint");
    }
    manifest.finish(&a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = checkpoint::load::<F>(&a.checkpoint)?;
    let world = load_world(&a.data)?;
    check_fit(&ck.model, &world.spec)?;
    let manifest = RunManifest::new(
        "eval",
        serde_json::json!({ "model": ck.model, "train": ck.train }),
        ck.train.seed,
        &[("checkpoint", a.checkpoint.as_path()), ("data", a.data.as_path())],
        &["report.json"],
    );
    manifest.write(&a.out)?;

    let summary = evaluate_world(&ck.store, &ck.model, &ck.train.flags, &world)?;
    let recall = cross_modal_recall(
        &ck.store,
        &ck.model,
        &ck.train.flags,
        &world.eval_a,
        Modality::Image,
        Modality::Text,
        a.retrieval_k,
    )?;
    let report = EvalReport {
        n: summary.n,
        median_accuracy: summary.median_accuracy,
        token_error_rate: summary.mean_token_error_rate,
        unigram_precision: summary.mean_precision,
        vocab_expressivity: summary.vocab_unique,
        exclusive_seen: summary.exclusive_seen,
        exclusive_total: summary.exclusive_total,
        image_to_text_retrieval: RecallReport {
            k: a.retrieval_k,
            gallery_size: world.eval_a.len(),
            recall,
            baseline: a.retrieval_k as f64 / world.eval_a.len() as f64,
        },
        samples: summary.per_sample,
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "eval over {} samples: median accuracy {:.3}, token error rate {:.3}, unigram precision {:.3}, recall@{} {:.3}",
        report.n,
        report.median_accuracy,
        report.token_error_rate,
        report.unigram_precision,
        a.retrieval_k,
        report.image_to_text_retrieval.recall
    );
    manifest.finish(&a.out)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let world = load_world(&a.data)?;
    check_fit(&cfg.model, &world.spec)?;
    let manifest = RunManifest::new(
        "ablate",
        serde_json::to_value(&cfg)?,
        cfg.train.seed,
        &[("data", a.data.as_path())],
        &["ablations.json", "ablation_bars.svg"],
    );
    manifest.write(&a.out)?;

    let report = run_ablations::<F>(&world, &cfg.model, &cfg.train, &a.seeds, worker_threads())?;
    write_json(&a.out.join("ablations.json"), &report)?;
    fs::write(a.out.join("ablation_bars.svg"), ablation_bars_svg(&report)?)?;
    for m in &report.medians {
        println!(
            "{:<8} median accuracy {:.3}, token error rate {:.3}, unigram precision {:.3}",
            m.variant, m.median_accuracy, m.median_token_error_rate, m.median_precision
        );
    }
    manifest.finish(&a.out)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let world = load_world(&a.data)?;
    check_fit(&cfg.model, &world.spec)?;
    let manifest = RunManifest::new(
        "sweep",
        serde_json::to_value(&cfg)?,
        cfg.train.seed,
        &[("data", a.data.as_path())],
        &["sweep.json", "sweep_heatmap.svg"],
    );
    manifest.write(&a.out)?;

    let cells = sweep_memory::<F>(&world, &cfg.model, &cfg.train, &a.n_k, &a.d_k, worker_threads())?;
    write_json(&a.out.join("sweep.json"), &cells)?;
    fs::write(a.out.join("sweep_heatmap.svg"), sweep_heatmap_svg(&cells)?)?;
    for c in &cells {
        println!(
            "n_k={:<3} d_k={:<3} median accuracy {:.3}, token error rate {:.3}",
            c.n_k, c.d_k, c.median_accuracy, c.mean_token_error_rate
        );
    }
    manifest.finish(&a.out)
}

#[derive(Serialize)]
struct RetrievalReport {
    image_to_text: RecallReport,
    text_to_audio: RecallReport,
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let ck = checkpoint::load::<F>(&a.checkpoint)?;
    let world = load_world(&a.data)?;
    check_fit(&ck.model, &world.spec)?;
    let manifest = RunManifest::new(
        "retrieve",
        serde_json::json!({ "model": ck.model, "train": ck.train }),
        ck.train.seed,
        &[("checkpoint", a.checkpoint.as_path()), ("data", a.data.as_path())],
        &["retrieval.json"],
    );
    manifest.write(&a.out)?;

    let k = a.retrieval_k;
    let img_txt = cross_modal_recall(
        &ck.store,
        &ck.model,
        &ck.train.flags,
        &world.eval_a,
        Modality::Image,
        Modality::Text,
        k,
    )?;
    let txt_audio = cross_modal_recall(
        &ck.store,
        &ck.model,
        &ck.train.flags,
        &world.eval_b,
        Modality::Text,
        Modality::Audio,
        k,
    )?;
    let report = RetrievalReport {
        image_to_text: RecallReport {
            k,
            gallery_size: world.eval_a.len(),
            recall: img_txt,
            baseline: k as f64 / world.eval_a.len() as f64,
        },
        text_to_audio: RecallReport {
            k,
            gallery_size: world.eval_b.len(),
            recall: txt_audio,
            baseline: k as f64 / world.eval_b.len() as f64,
        },
    };
    write_json(&a.out.join("retrieval.json"), &report)?;
    println!(
        "recall@{k}: image->text {:.3} (baseline {:.3}), text->audio {:.3} (baseline {:.3})",
        report.image_to_text.recall,
        report.image_to_text.baseline,
        report.text_to_audio.recall,
        report.text_to_audio.baseline
    );
    manifest.finish(&a.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Retrieve(a) => cmd_retrieve(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::InvalidState(_) | Error::NonFinite { .. } | Error::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
