//! `pcl` — command-line pipeline for patronizing-language detection.
//!
//! Subcommands mirror the pipeline stages: `prepare` (load, validate, split,
//! summarize), `augment` (back-translate a seeded fraction of positives),
//! `train` (run one experiment from a key-value config), `evaluate` (score
//! gold vs predictions) and `predict` (apply a checkpoint to new samples).
//!
//! Exit codes are a stable contract: 0 success, 2 input error, 3 format
//! error, 4 compatibility error.

mod http_translator;
mod manifest;

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use http_translator::HttpTranslator;
use manifest::RunManifest;
use pcl_core::augment::{
    build_augmented_train_set, AugmentationConfig, IdentityTranslator, Translator,
};
use pcl_core::corpus::{
    apply_split, compute_stats, load_corpus, merge_category_labels, write_corpus, LabelMode,
    SplitSpec,
};
use pcl_core::metrics::{
    binary_prf, multi_label_report, read_binary_labels, read_category_labels, render_report,
    EvalReport, MetricsError, ReportFormat,
};
use pcl_core::models::{Model, ModelError, Subtask};
use pcl_core::tokenize::WhitespaceTokenizer;
use pcl_core::train::{
    predict as run_predict, run_experiment, RunConfig, TrainError, TranslatorChoice,
};

const ENDPOINT_ENV: &str = "PCL_TRANSLATOR_ENDPOINT";

const EXIT_INPUT: i32 = 2;
const EXIT_FORMAT: i32 = 3;
const EXIT_COMPAT: i32 = 4;

struct CliError {
    code: i32,
    source: anyhow::Error,
}

impl CliError {
    fn input(source: anyhow::Error) -> Self {
        CliError {
            code: EXIT_INPUT,
            source,
        }
    }

    fn format(source: anyhow::Error) -> Self {
        CliError {
            code: EXIT_FORMAT,
            source,
        }
    }

    fn compat(source: anyhow::Error) -> Self {
        CliError {
            code: EXIT_COMPAT,
            source,
        }
    }
}

fn train_error(err: TrainError) -> CliError {
    let code = match &err {
        TrainError::Metrics(_) => EXIT_FORMAT,
        TrainError::Model(
            ModelError::Checkpoint { .. }
            | ModelError::SequenceLength { .. }
            | ModelError::TokenOutOfRange { .. },
        ) => EXIT_COMPAT,
        TrainError::NonFiniteLoss { .. } => 1,
        _ => EXIT_INPUT,
    };
    CliError {
        code,
        source: anyhow::Error::new(err),
    }
}

#[derive(Parser)]
#[command(
    name = "pcl",
    about = "Patronizing-language detection pipeline",
    version
)]
struct Cli {
    /// Key-value run configuration file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed overriding the config's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory overriding the config's `out_dir` key.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, validate, split and summarize a dataset.
    Prepare {
        #[arg(long, value_name = "TSV")]
        dataset: PathBuf,
        /// Category span file (10-column layout) to merge for subtask B.
        #[arg(long, value_name = "TSV")]
        categories: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        train_split: PathBuf,
        #[arg(long, value_name = "FILE")]
        val_split: PathBuf,
        /// How the label column is read: binary or scale (0–4, ≥2 positive).
        #[arg(long, default_value = "binary", value_parser = parse_label_mode)]
        label_mode: LabelMode,
    },
    /// Back-translate a seeded fraction of positive train samples.
    Augment {
        /// Train-set TSV in the 6-column paragraph layout.
        #[arg(long, value_name = "TSV")]
        train: PathBuf,
        /// Fraction of positives to select.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_parser = parse_translator)]
        translator: Option<TranslatorChoice>,
        /// Translation service URL (or set PCL_TRANSLATOR_ENDPOINT).
        #[arg(long)]
        endpoint: Option<String>,
        /// Pivot language for the round trip.
        #[arg(long)]
        pivot: Option<String>,
        #[arg(long)]
        timeout_secs: Option<u64>,
        #[arg(long)]
        retries: Option<u32>,
        /// Validation split file; enables the leakage guard.
        #[arg(long, value_name = "FILE")]
        val_split: Option<PathBuf>,
    },
    /// Train one experiment from a run config.
    Train,
    /// Score predictions against gold labels.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        gold: PathBuf,
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_parser = parse_subtask)]
        subtask: Subtask,
        #[arg(long, default_value = "text", value_parser = parse_format)]
        format: ReportFormat,
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Apply a checkpoint to a sample TSV, writing submission-format output.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "TSV")]
        input: PathBuf,
        /// Write predictions here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Tokenizer vocab file (defaults to the built-in vocab).
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Assert the checkpoint's subtask.
        #[arg(long, value_parser = parse_subtask)]
        subtask: Option<Subtask>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value = "binary", value_parser = parse_label_mode)]
        label_mode: LabelMode,
    },
}

fn parse_label_mode(s: &str) -> Result<LabelMode, String> {
    LabelMode::parse(s).ok_or_else(|| format!("{s:?} is not `binary` or `scale`"))
}

fn parse_subtask(s: &str) -> Result<Subtask, String> {
    Subtask::parse(s).ok_or_else(|| format!("{s:?} is not `A` or `B`"))
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::parse(s).ok_or_else(|| format!("{s:?} is not `text` or `tsv`"))
}

fn parse_translator(s: &str) -> Result<TranslatorChoice, String> {
    match s.to_ascii_lowercase().as_str() {
        "identity" => Ok(TranslatorChoice::Identity),
        "http" | "endpoint" => Ok(TranslatorChoice::Http),
        other => Err(format!("{other:?} is not `identity` or `http`")),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {:#}", err.source);
        std::process::exit(err.code);
    }
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>, CliError> {
    match path {
        Some(p) => RunConfig::from_file(p)
            .map(Some)
            .map_err(|e| CliError::input(anyhow::Error::new(e))),
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare {
            dataset,
            categories,
            train_split,
            val_split,
            label_mode,
        } => {
            let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("prepared"));
            cmd_prepare(
                &dataset,
                categories.as_deref(),
                &train_split,
                &val_split,
                label_mode,
                &out_dir,
            )
        }
        Command::Augment {
            train,
            fraction,
            translator,
            endpoint,
            pivot,
            timeout_secs,
            retries,
            val_split,
        } => {
            let config = load_config(cli.config.as_deref())?;
            let fraction = fraction
                .or(config.as_ref().map(|c| c.augment_fraction))
                .unwrap_or(0.30);
            let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(42);
            let choice = translator
                .or(config.as_ref().map(|c| c.translator))
                .unwrap_or(TranslatorChoice::Identity);
            let endpoint = std::env::var(ENDPOINT_ENV)
                .ok()
                .or(endpoint)
                .or(config.as_ref().and_then(|c| c.translator_endpoint.clone()));
            let pivot = pivot
                .or(config.as_ref().map(|c| c.translator_pivot.clone()))
                .unwrap_or_else(|| "fr".to_string());
            let timeout = timeout_secs
                .or(config.as_ref().map(|c| c.translator_timeout_secs))
                .unwrap_or(30);
            let retries = retries
                .or(config.as_ref().map(|c| c.translator_retries))
                .unwrap_or(2);
            let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("augmented"));
            cmd_augment(
                &train,
                fraction,
                seed,
                choice,
                endpoint,
                &pivot,
                timeout,
                retries,
                val_split.as_deref(),
                &out_dir,
            )
        }
        Command::Train => {
            let config_path = cli
                .config
                .ok_or_else(|| CliError::input(anyhow!("train requires --config")))?;
            let mut config = RunConfig::from_file(&config_path)
                .map_err(|e| CliError::input(anyhow::Error::new(e)))?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(out_dir) = cli.out_dir {
                config.out_dir = out_dir;
            }
            cmd_train(&config, &config_path)
        }
        Command::Evaluate {
            gold,
            pred,
            subtask,
            format,
            out,
        } => cmd_evaluate(&gold, &pred, subtask, format, out.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            out,
            vocab,
            subtask,
            batch_size,
            label_mode,
        } => cmd_predict(
            &checkpoint,
            &input,
            out.as_deref(),
            vocab.as_deref(),
            subtask,
            batch_size,
            label_mode,
        ),
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::input)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(CliError::input)
}

fn cmd_prepare(
    dataset: &Path,
    categories: Option<&Path>,
    train_split: &Path,
    val_split: &Path,
    label_mode: LabelMode,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut samples =
        load_corpus(dataset, label_mode).map_err(|e| CliError::input(anyhow::Error::new(e)))?;
    if let Some(cat_path) = categories {
        let cats = load_corpus(cat_path, label_mode)
            .map_err(|e| CliError::input(anyhow::Error::new(e)))?;
        merge_category_labels(&mut samples, &cats)
            .map_err(|e| CliError::input(anyhow::Error::new(e)))?;
    }
    let split = SplitSpec::from_files(train_split, val_split)
        .map_err(|e| CliError::input(anyhow::Error::new(e)))?;
    let (train, val) =
        apply_split(&samples, &split).map_err(|e| CliError::input(anyhow::Error::new(e)))?;

    create_dir(out_dir)?;
    write_corpus(&train, &out_dir.join("train.tsv"))
        .map_err(|e| CliError::input(anyhow::Error::new(e)))?;
    write_corpus(&val, &out_dir.join("val.tsv"))
        .map_err(|e| CliError::input(anyhow::Error::new(e)))?;

    if let Some(cat_path) = categories {
        filter_category_file(cat_path, &split, out_dir)?;
    }

    let stats = compute_stats(&samples);
    write_file(&out_dir.join("stats.txt"), &stats.render())?;
    println!(
        "prepared {} samples ({} positive) into {} train / {} val; stats in {}",
        stats.total,
        stats.positives,
        train.len(),
        val.len(),
        out_dir.join("stats.txt").display()
    );
    Ok(())
}

/// Copies category-span rows verbatim into per-split files keyed on the
/// first column.
fn filter_category_file(
    cat_path: &Path,
    split: &SplitSpec,
    out_dir: &Path,
) -> Result<(), CliError> {
    let content = std::fs::read_to_string(cat_path)
        .with_context(|| format!("cannot read {}", cat_path.display()))
        .map_err(CliError::input)?;
    let mut train_rows = String::new();
    let mut val_rows = String::new();
    for line in content.lines() {
        let par_id = line.split('\t').next().unwrap_or("");
        if split.train_ids.contains(par_id) {
            train_rows.push_str(line);
            train_rows.push('\n');
        } else if split.val_ids.contains(par_id) {
            val_rows.push_str(line);
            val_rows.push('\n');
        }
    }
    write_file(&out_dir.join("train_categories.tsv"), &train_rows)?;
    write_file(&out_dir.join("val_categories.tsv"), &val_rows)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    train: &Path,
    fraction: f64,
    seed: u64,
    choice: TranslatorChoice,
    endpoint: Option<String>,
    pivot: &str,
    timeout_secs: u64,
    retries: u32,
    val_split: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let samples = load_corpus(train, LabelMode::Binary)
        .map_err(|e| CliError::input(anyhow::Error::new(e)))?;
    let val_ids: std::collections::BTreeSet<String> = match val_split {
        Some(path) => {
            let content = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(CliError::input)?;
            content
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        }
        None => Default::default(),
    };

    let translator: Box<dyn Translator> = match choice {
        TranslatorChoice::Identity => Box::new(IdentityTranslator),
        TranslatorChoice::Http => {
            let endpoint = endpoint.ok_or_else(|| {
                CliError::input(anyhow!(
                    "http translator needs --endpoint or {ENDPOINT_ENV}"
                ))
            })?;
            Box::new(
                HttpTranslator::new(
                    endpoint,
                    pivot.to_string(),
                    Duration::from_secs(timeout_secs),
                    retries,
                )
                .map_err(CliError::input)?,
            )
        }
    };

    let cfg = AugmentationConfig {
        fraction,
        seed,
        positive_only: true,
    };
    let built = build_augmented_train_set(&samples, &val_ids, &cfg, translator.as_ref())
        .map_err(|e| CliError::input(anyhow::Error::new(e)))?;

    if !built.selected_ids.is_empty() && built.skipped.len() == built.selected_ids.len() {
        return Err(CliError::input(anyhow!(
            "every translation failed ({} of {}); the endpoint looks unreachable — check the URL, raise --timeout-secs or --retries and rerun",
            built.skipped.len(),
            built.selected_ids.len()
        )));
    }

    create_dir(out_dir)?;
    let out_tsv = out_dir.join("train_augmented.tsv");
    write_corpus(&built.samples, &out_tsv).map_err(|e| CliError::input(anyhow::Error::new(e)))?;

    let mut log = format!(
        "# selected {} of {} samples (fraction {}, seed {})\n",
        built.selected_ids.len(),
        samples.len(),
        fraction,
        seed
    );
    for id in &built.selected_ids {
        log.push_str(id);
        log.push('\n');
    }
    if !built.skipped.is_empty() {
        log.push_str(&format!("# skipped {}\n", built.skipped.len()));
        for s in &built.skipped {
            log.push_str(&format!("# {}: {}\n", s.par_id, s.reason));
        }
    }
    write_file(&out_dir.join("selection.log"), &log)?;
    for s in &built.skipped {
        eprintln!("warning: skipped {}: {}", s.par_id, s.reason);
    }
    println!(
        "augmented {} -> {} samples ({} added, {} skipped); wrote {}",
        samples.len(),
        built.samples.len(),
        built.samples.len() - samples.len(),
        built.skipped.len(),
        out_tsv.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, config_path: &Path) -> Result<(), CliError> {
    let endpoint = std::env::var(ENDPOINT_ENV)
        .ok()
        .or_else(|| config.translator_endpoint.clone());
    let translator: Box<dyn Translator> = match config.translator {
        TranslatorChoice::Identity => Box::new(IdentityTranslator),
        TranslatorChoice::Http => {
            let endpoint = endpoint.ok_or_else(|| {
                CliError::input(anyhow!(
                    "http translator needs translator_endpoint or {ENDPOINT_ENV}"
                ))
            })?;
            Box::new(
                HttpTranslator::new(
                    endpoint,
                    config.translator_pivot.clone(),
                    Duration::from_secs(config.translator_timeout_secs),
                    config.translator_retries,
                )
                .map_err(CliError::input)?,
            )
        }
    };

    let outcome = run_experiment(config, translator.as_ref()).map_err(train_error)?;

    let mut inputs: Vec<&Path> = vec![
        config_path,
        &config.dataset,
        &config.train_split,
        &config.val_split,
    ];
    if let Some(c) = &config.categories {
        inputs.push(c);
    }
    if let Some(v) = &config.vocab {
        inputs.push(v);
    }
    let outputs: Vec<&Path> = vec![&outcome.log.checkpoint, &outcome.train_log_path];
    let manifest = RunManifest::for_run(&outcome, Some(config_path), &inputs, &outputs)
        .map_err(CliError::input)?;
    let manifest_path = config.out_dir.join("run_manifest.json");
    manifest.write(&manifest_path).map_err(CliError::input)?;

    println!(
        "{} {} {}: best epoch {} ({} = {:.4}); checkpoint {}, log {}, manifest {}",
        outcome.spec.name.name(),
        outcome.spec.head.name(),
        outcome.spec.subtask.name(),
        outcome.log.best_epoch,
        match outcome.spec.subtask {
            Subtask::A => "F1",
            Subtask::B => "macro-F1",
        },
        outcome.log.best_metric,
        outcome.log.checkpoint.display(),
        outcome.train_log_path.display(),
        manifest_path.display(),
    );
    Ok(())
}

fn metrics_error(err: MetricsError) -> CliError {
    match err {
        MetricsError::Io { .. } => CliError::input(anyhow::Error::new(err)),
        _ => CliError::format(anyhow::Error::new(err)),
    }
}

fn cmd_evaluate(
    gold: &Path,
    pred: &Path,
    subtask: Subtask,
    format: ReportFormat,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let report: EvalReport = match subtask {
        Subtask::A => {
            let gold = read_binary_labels(gold).map_err(metrics_error)?;
            let pred = read_binary_labels(pred).map_err(metrics_error)?;
            EvalReport::SubtaskA(binary_prf(&gold, &pred).map_err(metrics_error)?)
        }
        Subtask::B => {
            let gold = read_category_labels(gold).map_err(metrics_error)?;
            let pred = read_category_labels(pred).map_err(metrics_error)?;
            multi_label_report(&gold, &pred).map_err(metrics_error)?
        }
    };
    let rendered = render_report(&report, format);
    match out {
        Some(path) => write_file(path, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_predict(
    checkpoint: &Path,
    input: &Path,
    out: Option<&Path>,
    vocab: Option<&Path>,
    subtask: Option<Subtask>,
    batch_size: usize,
    label_mode: LabelMode,
) -> Result<(), CliError> {
    let model = Model::load(checkpoint).map_err(|e| match e {
        ModelError::Io { .. } => CliError::input(anyhow::Error::new(e)),
        _ => CliError::compat(anyhow::Error::new(e)),
    })?;
    if let Some(expected) = subtask {
        if model.spec.subtask != expected {
            return Err(CliError::compat(anyhow!(
                "checkpoint is for subtask {}, requested {}",
                model.spec.subtask.name(),
                expected.name()
            )));
        }
    }
    let tokenizer = match vocab {
        Some(path) => WhitespaceTokenizer::from_vocab_file(path)
            .map_err(|e| CliError::input(anyhow::Error::new(e)))?,
        None => WhitespaceTokenizer::builtin(),
    };
    let samples =
        load_corpus(input, label_mode).map_err(|e| CliError::input(anyhow::Error::new(e)))?;
    let predictions = run_predict(&model, &samples, &tokenizer, batch_size).map_err(train_error)?;
    let rendered = predictions.render();
    match out {
        Some(path) => write_file(path, &rendered)?,
        None => print!("{rendered}"),
    }
    eprintln!("predicted {} samples", predictions.len());
    Ok(())
}
