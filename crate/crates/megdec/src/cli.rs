//! Command-line entry points: synthetic dataset generation, training,
//! the ablation sweep and the gradient-check suite.
//!
//! Every command is a pure function of its on-disk inputs, flags and seed;
//! repeated invocations produce byte-identical outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    megb_write, DatasetManifest, PhonemeVocab, SessionEntry, SessionRole, SynthSpec,
};
use crate::model::{end_to_end_gradchecks, AblationFlags, ModelConfig};
use crate::tensor::{GradCheckReport, GradCheckSuite};
use crate::train::{fit, write_history_csv, TrainConfig};

/// Exit code 2 marks usage/input errors; 1 marks runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "megdec",
    about = "MEG phoneme decoding toolkit: synthetic data, training, ablations, gradient checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic MEG-like sessions plus manifest and vocabulary.
    Synth(SynthArgs),
    /// Train a model from a JSON run config; writes checkpoint, history CSV
    /// and metrics report.
    Train(TrainArgs),
    /// Train the five ablation variants across seeds and print the summary
    /// table.
    Ablate(AblateArgs),
    /// Run the finite-difference suite over every op, block and a tiny
    /// end-to-end model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of training sessions (two validation sessions are added).
    #[arg(long, default_value_t = 3)]
    pub sessions: usize,
    /// Events per phoneme class per training session.
    #[arg(long = "events-per-class", default_value_t = 10)]
    pub events_per_class: usize,
    /// Events per class in the validation sessions (defaults to the
    /// training value).
    #[arg(long = "events-per-class-val")]
    pub events_per_class_val: Option<usize>,
    /// Window-level amplitude SNR; "inf" disables noise.
    #[arg(long, default_value_t = 4.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config (see README for the schema).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's manifest path.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Seeds as an inclusive range "0..5" or a comma list "0,1,2".
    #[arg(long, default_value = "0..5")]
    pub seeds: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20260809)]
    pub seed: u64,
}

/// Experiment description: model + training hyperparameters, dataset
/// manifest, output directory and the seed list for multi-seed sweeps.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            manifest: PathBuf::from("manifest.json"),
            out_dir: PathBuf::from("out"),
            seeds: vec![0],
        }
    }
}

impl RunConfig {
    /// Parse and validate; unknown keys are rejected. Relative manifest and
    /// output paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "config file not found: {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train
            .ablation
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(dir) = path.parent() {
            if cfg.manifest.is_relative() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
            if cfg.out_dir.is_relative() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

// ── synth ────────────────────────────────────────────────────────────

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out)?;
    let val_events = args.events_per_class_val.unwrap_or(args.events_per_class);

    let train = crate::data::synth_generate(&SynthSpec {
        n_sessions: args.sessions,
        first_session_index: 0,
        events_per_class_per_session: args.events_per_class,
        snr: args.snr,
        seed: args.seed,
        ..Default::default()
    })?;
    let val = crate::data::synth_generate(&SynthSpec {
        n_sessions: 2,
        first_session_index: args.sessions,
        events_per_class_per_session: val_events,
        snr: args.snr,
        seed: args.seed,
        ..Default::default()
    })?;

    let mut sessions = Vec::new();
    for (i, rec) in train.iter().enumerate() {
        let name = format!("train_{i:02}.megb");
        megb_write(&args.out.join(&name), rec)?;
        sessions.push(SessionEntry {
            path: PathBuf::from(name),
            role: SessionRole::Train,
        });
    }
    for (i, rec) in val.iter().enumerate() {
        let name = format!("val_{i:02}.megb");
        megb_write(&args.out.join(&name), rec)?;
        sessions.push(SessionEntry {
            path: PathBuf::from(name),
            role: SessionRole::Validation,
        });
    }
    PhonemeVocab::arpabet39().save(&args.out.join("vocab.txt"))?;
    let manifest = DatasetManifest {
        format_version: 1,
        vocab: PathBuf::from("vocab.txt"),
        sessions,
    };
    manifest.save(&args.out.join("manifest.json"))?;
    println!(
        "wrote {} train + 2 validation sessions to {}",
        args.sessions,
        args.out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn apply_overrides(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(manifest) = &args.manifest {
        cfg.manifest = manifest.clone();
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args);
    if !cfg.manifest.exists() {
        return Err(CliError::Usage(format!(
            "manifest not found: {}",
            cfg.manifest.display()
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;

    let result = fit::<f32>(&manifest, cfg.model.clone(), cfg.train.clone(), |e| {
        eprintln!(
            "epoch {:>3}: loss {:.4}  val f1 {:.4}  top3 {:.4}  top5 {:.4}",
            e.epoch, e.train_loss, e.val_f1_macro, e.val_top3, e.val_top5
        );
    })?;

    result.best_model.save(&cfg.out_dir.join("checkpoint.mebm"))?;
    write_history_csv(&cfg.out_dir.join("history.csv"), &result.history)?;
    std::fs::write(
        cfg.out_dir.join("report.json"),
        result.best_report.to_json(),
    )?;
    std::fs::write(
        cfg.out_dir.join("discarded_classes.txt"),
        result.discard.to_string(),
    )?;
    println!(
        "best epoch {} of {}: f1_macro {:.4}, top3 {:.4}, top5 {:.4} (outputs in {})",
        result.best_epoch,
        result.history.len(),
        result.best_report.f1_macro,
        result.best_report.top3_acc_macro,
        result.best_report.top5_acc_macro,
        cfg.out_dir.display()
    );
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

/// Parse "a..b" (inclusive) or a comma-separated list.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad seed range '{spec}'")))?;
        let hi: u64 = b
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad seed range '{spec}'")))?;
        if hi < lo {
            return Err(CliError::Usage(format!("empty seed range '{spec}'")));
        }
        Ok((lo..=hi).collect())
    } else {
        spec.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad seed list '{spec}'")))
            })
            .collect()
    }
}

/// The five variants in report order.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let full = AblationFlags::default();
    vec![
        ("Full Model", full),
        (
            "w/o Weighted Loss",
            AblationFlags {
                use_weighted_loss: false,
                ..full
            },
        ),
        (
            "w/o Multi-scale Conv",
            AblationFlags {
                use_multiscale: false,
                ..full
            },
        ),
        (
            "w/o BM Encoder",
            AblationFlags {
                use_bm_encoder: false,
                ..full
            },
        ),
        (
            "w/o Conv. Attention",
            AblationFlags {
                use_conv_attention: false,
                ..full
            },
        ),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub top3_mean: f64,
    pub top3_std: f64,
    pub top5_mean: f64,
    pub top5_std: f64,
    pub seeds: Vec<u64>,
}

/// Mean and sample standard deviation (ddof 1; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Render the summary as a Table-1 style text table (percent, two decimals).
pub fn ablation_table(rows: &[VariantSummary]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<22} {:>14} {:>14} {:>14}\n",
        "Model Variant", "F1_macro (%)", "Top-3 Acc (%)", "Top-5 Acc (%)"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14}\n",
            r.variant,
            format!("{:.2}±{:.2}", 100.0 * r.f1_mean, 100.0 * r.f1_std),
            format!("{:.2}±{:.2}", 100.0 * r.top3_mean, 100.0 * r.top3_std),
            format!("{:.2}±{:.2}", 100.0 * r.top5_mean, 100.0 * r.top5_std),
        ));
    }
    s
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if !cfg.manifest.exists() {
        return Err(CliError::Usage(format!(
            "manifest not found: {}",
            cfg.manifest.display()
        )));
    }
    let seeds = parse_seeds(&args.seeds)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;

    let mut rows = Vec::new();
    for (label, flags) in ablation_variants() {
        let mut f1 = Vec::new();
        let mut top3 = Vec::new();
        let mut top5 = Vec::new();
        for &seed in &seeds {
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            train_cfg.ablation = flags;
            eprintln!("── {label} / seed {seed}");
            let result = fit::<f32>(&manifest, cfg.model.clone(), train_cfg, |e| {
                eprintln!(
                    "  epoch {:>3}: loss {:.4}  val f1 {:.4}",
                    e.epoch, e.train_loss, e.val_f1_macro
                );
            })?;
            f1.push(result.best_report.f1_macro);
            top3.push(result.best_report.top3_acc_macro);
            top5.push(result.best_report.top5_acc_macro);
        }
        let (f1_mean, f1_std) = mean_std(&f1);
        let (top3_mean, top3_std) = mean_std(&top3);
        let (top5_mean, top5_std) = mean_std(&top5);
        rows.push(VariantSummary {
            variant: label.to_string(),
            f1_mean,
            f1_std,
            top3_mean,
            top3_std,
            top5_mean,
            top5_std,
            seeds: seeds.clone(),
        });
    }

    let table = ablation_table(&rows);
    print!("{table}");
    std::fs::write(cfg.out_dir.join("ablation.txt"), &table)?;
    std::fs::write(
        cfg.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let report = full_gradcheck_report(args.seed, None);
    print!("{}", report.to_table());
    if report.all_passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "{} gradient check(s) failed",
            report.failures().len()
        )))
    }
}

/// Every differentiable op, every block, and the tiny end-to-end model.
/// `corrupt` perturbs one named op's analytic gradient (test fixture).
pub fn full_gradcheck_report(seed: u64, corrupt: Option<&str>) -> GradCheckReport {
    let mut suite = GradCheckSuite::new(seed);
    if let Some(op) = corrupt {
        suite = suite.with_corrupted_op(op);
    }
    let mut checks = suite.run_tensor_ops();
    checks.extend(crate::nn::block_gradchecks(seed));
    checks.extend(end_to_end_gradchecks(seed));
    GradCheckReport { checks }
}
