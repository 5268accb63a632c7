//! Experiment runner: the BASIC/AUG/WT/AUG+WT matrix, the training loop with
//! per-epoch validation, best-checkpoint selection and prediction.
//!
//! One run is a single sequential stream of parameter updates; all
//! randomness (initialization, augmentation selection, per-epoch shuffling)
//! flows from the run seed, so a repeated run reproduces its TrainLog and
//! prediction files byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, ArrayD};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented_train_set, AugmentError, AugmentationConfig, Translator};
use crate::balance::{
    batch_loss, compute_class_weights, weighted_ce_grad, BalanceError, ClassWeights,
};
use crate::corpus::{
    apply_split, load_corpus, merge_category_labels, CorpusError, LabelMode, Sample, SplitSpec,
    NUM_CATEGORIES,
};
use crate::metrics::{binary_prf, multi_label_report, EvalReport, MetricsError};
use crate::models::{
    batch_inputs, build_model, EncoderConfig, EncoderKind, Gradients, HeadDims, HeadKind,
    HeadOutput, Model, ModelError, ModelSpec, Subtask,
};
use crate::tokenize::{
    batch_tokenize, TokenizeError, TokenizedExample, TokenizerHandle, WhitespaceTokenizer, SEQ_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    InvalidData(String),
    #[error("cannot select from an empty metric log")]
    EmptyLog,
}

/// The four experiment settings crossing augmentation with loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentName {
    Basic,
    Aug,
    Wt,
    AugWt,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::Basic,
        ExperimentName::Aug,
        ExperimentName::Wt,
        ExperimentName::AugWt,
    ];

    /// (augment, loss_weighting) per the experiment matrix.
    pub fn flags(&self) -> (bool, bool) {
        match self {
            ExperimentName::Basic => (false, false),
            ExperimentName::Aug => (true, false),
            ExperimentName::Wt => (false, true),
            ExperimentName::AugWt => (true, true),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BASIC" => Some(ExperimentName::Basic),
            "AUG" => Some(ExperimentName::Aug),
            "WT" => Some(ExperimentName::Wt),
            "AUG+WT" | "AUGWT" => Some(ExperimentName::AugWt),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentName::Basic => "BASIC",
            ExperimentName::Aug => "AUG",
            ExperimentName::Wt => "WT",
            ExperimentName::AugWt => "AUG+WT",
        }
    }
}

/// One training run's hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub augment: bool,
    pub loss_weighting: bool,
    pub beta: f64,
    pub subtask: Subtask,
    pub head: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if (self.augment, self.loss_weighting) != self.name.flags() {
            return Err(ConfigError::Inconsistent(format!(
                "experiment {} requires augment={}, loss_weighting={}",
                self.name.name(),
                self.name.flags().0,
                self.name.flags().1,
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ConfigError::Inconsistent(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Per-epoch losses and validation metrics plus the selected checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose checkpoint was kept.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub checkpoint: PathBuf,
}

impl TrainLog {
    /// Line-delimited `epoch \t train_loss \t val_metric` records.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            writeln!(out, "{}\t{}\t{}", rec.epoch, rec.train_loss, rec.val_metric).unwrap();
        }
        out
    }
}

/// Argmax of the validation metric as a 1-based epoch; ties break to the
/// earliest epoch.
pub fn select_best(metrics: &[f64]) -> Result<usize, TrainError> {
    if metrics.is_empty() {
        return Err(TrainError::EmptyLog);
    }
    let mut best = 0;
    for (i, &m) in metrics.iter().enumerate() {
        if m > metrics[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Adam with zero-initialized moments, no weight decay, no schedule and no
/// clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64, eps: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = model
            .param_views()
            .iter()
            .map(|view| ArrayD::zeros(view.raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let skip = model.first_trainable_tensor();
        for (i, mut param) in model.param_views_mut().into_iter().enumerate() {
            if i < skip {
                continue;
            }
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(&mut param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

/// Classification targets of one batch.
pub enum BatchTargets {
    A(Vec<usize>),
    B(Vec<[u8; NUM_CATEGORIES]>),
}

impl BatchTargets {
    pub fn from_examples(subtask: Subtask, examples: &[TokenizedExample]) -> Self {
        match subtask {
            Subtask::A => {
                BatchTargets::A(examples.iter().map(|e| e.binary_label as usize).collect())
            }
            Subtask::B => BatchTargets::B(examples.iter().map(|e| e.category_labels).collect()),
        }
    }
}

/// Loss plus its gradient w.r.t. the logits. Subtask A uses the single
/// branch's weighted cross-entropy; subtask B averages the 7 per-branch
/// losses, each branch weighted by its own class counts.
pub fn loss_and_dlogits(
    out: &HeadOutput,
    targets: &BatchTargets,
    weights: &[ClassWeights],
) -> Result<(f64, Array3<f64>), TrainError> {
    let (batch, branches, _) = out.logits.dim();
    let mut dlogits = Array3::zeros(out.logits.raw_dim());
    match targets {
        BatchTargets::A(classes) => {
            let rows = out.logits.slice(s![.., 0, ..]);
            let loss = batch_loss(rows, classes, &weights[0])?;
            for (b, &y) in classes.iter().enumerate() {
                let row: Vec<f64> = out.logits.slice(s![b, 0, ..]).to_vec();
                let grad = weighted_ce_grad(&row, y, weights[0].weights[y]);
                for (j, g) in grad.into_iter().enumerate() {
                    dlogits[(b, 0, j)] = g / batch as f64;
                }
            }
            Ok((loss, dlogits))
        }
        BatchTargets::B(labels) => {
            let mut total = 0.0;
            for h in 0..branches {
                let classes: Vec<usize> = labels.iter().map(|l| l[h] as usize).collect();
                let rows = out.logits.slice(s![.., h, ..]);
                total += batch_loss(rows, &classes, &weights[h])?;
                for (b, &y) in classes.iter().enumerate() {
                    let row: Vec<f64> = out.logits.slice(s![b, h, ..]).to_vec();
                    let grad = weighted_ce_grad(&row, y, weights[h].weights[y]);
                    for (j, g) in grad.into_iter().enumerate() {
                        dlogits[(b, h, j)] = g / (batch as f64 * branches as f64);
                    }
                }
            }
            Ok((total / branches as f64, dlogits))
        }
    }
}

/// Per-branch class weights from the training labels: `[negatives,
/// positives]` counts per output. Counts are clamped to 1 so degenerate toy
/// corpora stay weightable.
pub fn class_weights_for(
    subtask: Subtask,
    examples: &[TokenizedExample],
    loss_weighting: bool,
    beta: f64,
) -> Result<Vec<ClassWeights>, TrainError> {
    let branches = subtask.output_arity();
    if !loss_weighting {
        return Ok(vec![ClassWeights::uniform(2); branches]);
    }
    let mut weights = Vec::with_capacity(branches);
    for h in 0..branches {
        let positives = examples
            .iter()
            .filter(|e| match subtask {
                Subtask::A => e.binary_label == 1,
                Subtask::B => e.category_labels[h] == 1,
            })
            .count() as u64;
        let negatives = examples.len() as u64 - positives;
        weights.push(compute_class_weights(
            &[negatives.max(1), positives.max(1)],
            beta,
        )?);
    }
    Ok(weights)
}

/// Model predictions in submission form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predictions {
    A(Vec<u8>),
    B(Vec<[u8; NUM_CATEGORIES]>),
}

impl Predictions {
    /// One line per sample: a bare 0/1 for subtask A, seven comma-separated
    /// 0/1 values for subtask B.
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self {
            Predictions::A(rows) => {
                for r in rows {
                    writeln!(out, "{r}").unwrap();
                }
            }
            Predictions::B(rows) => {
                for r in rows {
                    let cells: Vec<String> = r.iter().map(u8::to_string).collect();
                    writeln!(out, "{}", cells.join(",")).unwrap();
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        match self {
            Predictions::A(rows) => rows.len(),
            Predictions::B(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn argmax2(z0: f64, z1: f64) -> u8 {
    u8::from(z1 > z0)
}

/// Runs tokenized examples through the model in batches; per-branch argmax.
pub fn predict_examples(
    model: &Model,
    examples: &[TokenizedExample],
    batch_size: usize,
) -> Result<Predictions, TrainError> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let (tokens, mask) = batch_inputs(chunk);
        let out = model.forward(tokens.view(), mask.view())?;
        for row in 0..chunk.len() {
            match model.spec.subtask {
                Subtask::A => {
                    a.push(argmax2(out.logits[(row, 0, 0)], out.logits[(row, 0, 1)]));
                }
                Subtask::B => {
                    let mut labels = [0u8; NUM_CATEGORIES];
                    for (h, label) in labels.iter_mut().enumerate() {
                        *label = argmax2(out.logits[(row, h, 0)], out.logits[(row, h, 1)]);
                    }
                    b.push(labels);
                }
            }
        }
    }
    Ok(match model.spec.subtask {
        Subtask::A => Predictions::A(a),
        Subtask::B => Predictions::B(b),
    })
}

/// Tokenizes raw samples with the checkpointed model's expected layout, then
/// predicts.
pub fn predict(
    model: &Model,
    samples: &[Sample],
    tok: &dyn TokenizerHandle,
    batch_size: usize,
) -> Result<Predictions, TrainError> {
    let examples = batch_tokenize(samples, tok)?;
    predict_examples(model, &examples, batch_size)
}

/// Scores a model over tokenized examples against their own labels.
pub fn evaluate_model(
    model: &Model,
    examples: &[TokenizedExample],
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let predictions = predict_examples(model, examples, batch_size)?;
    match (&predictions, model.spec.subtask) {
        (Predictions::A(pred), Subtask::A) => {
            let gold: Vec<u8> = examples.iter().map(|e| e.binary_label).collect();
            Ok(EvalReport::SubtaskA(binary_prf(&gold, pred)?))
        }
        (Predictions::B(pred), Subtask::B) => {
            let gold: Vec<[u8; NUM_CATEGORIES]> =
                examples.iter().map(|e| e.category_labels).collect();
            Ok(multi_label_report(&gold, pred)?)
        }
        _ => unreachable!("prediction arity always matches subtask"),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?} ({expected})")]
    BadValue {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("missing required config key {0:?}")]
    MissingKey(&'static str),
    #[error("config line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranslatorChoice {
    Identity,
    Http,
}

/// Full key-value run configuration (experiment, data, model and translator
/// settings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentName,
    pub subtask: Subtask,
    pub head: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub beta: f64,
    pub seed: u64,
    pub augment_fraction: f64,

    pub dataset: PathBuf,
    pub categories: Option<PathBuf>,
    pub train_split: PathBuf,
    pub val_split: PathBuf,
    pub label_mode: LabelMode,
    pub vocab: Option<PathBuf>,

    pub encoder_kind: EncoderKind,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub vocab_size: Option<usize>,
    pub dims: HeadDims,
    pub freeze_encoder: bool,

    pub translator: TranslatorChoice,
    pub translator_endpoint: Option<String>,
    pub translator_pivot: String,
    pub translator_timeout_secs: u64,
    pub translator_retries: u32,

    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str(&content)
    }

    /// Parses `key = value` lines; `#` starts a comment line.
    #[allow(clippy::should_implement_trait)]
    pub fn from_str(content: &str) -> Result<Self, ConfigError> {
        let mut keys: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine { line: i + 1 })?;
            keys.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_keys(keys)
    }

    fn from_keys(keys: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        const KNOWN: [&str; 32] = [
            "experiment",
            "subtask",
            "head",
            "epochs",
            "batch_size",
            "lr",
            "adam_eps",
            "beta",
            "seed",
            "augment",
            "loss_weighting",
            "augment_fraction",
            "dataset",
            "categories",
            "train_split",
            "val_split",
            "label_mode",
            "vocab",
            "encoder",
            "encoder_weights",
            "seq_len",
            "hidden_dim",
            "vocab_size",
            "dense_units",
            "lstm_units",
            "conv1_filters",
            "conv1_kernel",
            "conv2_filters",
            "conv2_kernel",
            "bilstm_readout",
            "freeze_encoder",
            "out_dir",
        ];
        const KNOWN_TRANSLATOR: [&str; 5] = [
            "translator",
            "translator_endpoint",
            "translator_pivot",
            "translator_timeout_secs",
            "translator_retries",
        ];
        for key in keys.keys() {
            if !KNOWN.contains(&key.as_str()) && !KNOWN_TRANSLATOR.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let get = |key: &'static str| keys.get(key).map(String::as_str);
        let required = |key: &'static str| get(key).ok_or(ConfigError::MissingKey(key));
        fn parse_num<T: std::str::FromStr>(
            key: &'static str,
            value: &str,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key,
                value: value.to_string(),
                expected,
            })
        }
        fn parse_bool(key: &'static str, value: &str) -> Result<bool, ConfigError> {
            match value.to_ascii_lowercase().as_str() {
                "yes" | "true" | "1" => Ok(true),
                "no" | "false" | "0" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    key,
                    value: value.to_string(),
                    expected: "yes or no",
                }),
            }
        }

        let experiment =
            ExperimentName::parse(required("experiment")?).ok_or(ConfigError::BadValue {
                key: "experiment",
                value: required("experiment")?.to_string(),
                expected: "BASIC, AUG, WT or AUG+WT",
            })?;
        let subtask = Subtask::parse(required("subtask")?).ok_or(ConfigError::BadValue {
            key: "subtask",
            value: required("subtask")?.to_string(),
            expected: "A or B",
        })?;
        let head = HeadKind::parse(required("head")?).ok_or(ConfigError::BadValue {
            key: "head",
            value: required("head")?.to_string(),
            expected: "fnn, bilstm, cnn or bls-cnn",
        })?;

        // explicit flags, when present, must agree with the experiment name
        let (want_augment, want_weighting) = experiment.flags();
        if let Some(v) = get("augment") {
            if parse_bool("augment", v)? != want_augment {
                return Err(ConfigError::Inconsistent(format!(
                    "experiment {} requires augment={}",
                    experiment.name(),
                    if want_augment { "yes" } else { "no" }
                )));
            }
        }
        if let Some(v) = get("loss_weighting") {
            if parse_bool("loss_weighting", v)? != want_weighting {
                return Err(ConfigError::Inconsistent(format!(
                    "experiment {} requires loss_weighting={}",
                    experiment.name(),
                    if want_weighting { "yes" } else { "no" }
                )));
            }
        }

        let label_mode = match get("label_mode") {
            None => LabelMode::Binary,
            Some(v) => LabelMode::parse(v).ok_or(ConfigError::BadValue {
                key: "label_mode",
                value: v.to_string(),
                expected: "binary or scale",
            })?,
        };
        let encoder_kind = match get("encoder").unwrap_or("tiny-random") {
            "tiny-random" => EncoderKind::TinyRandom,
            "pretrained" => EncoderKind::Pretrained {
                weights: PathBuf::from(required("encoder_weights")?),
            },
            other => {
                return Err(ConfigError::BadValue {
                    key: "encoder",
                    value: other.to_string(),
                    expected: "tiny-random or pretrained",
                })
            }
        };
        let translator = match get("translator").unwrap_or("identity") {
            "identity" => TranslatorChoice::Identity,
            "http" | "endpoint" => TranslatorChoice::Http,
            other => {
                return Err(ConfigError::BadValue {
                    key: "translator",
                    value: other.to_string(),
                    expected: "identity or http",
                })
            }
        };
        let bilstm_readout = match get("bilstm_readout").unwrap_or("final-state") {
            "final-state" | "final" => crate::models::BiLstmReadout::FinalState,
            "mean-pool" | "mean" => crate::models::BiLstmReadout::MeanPool,
            other => {
                return Err(ConfigError::BadValue {
                    key: "bilstm_readout",
                    value: other.to_string(),
                    expected: "final-state or mean-pool",
                })
            }
        };

        let defaults = HeadDims::default();
        let dims = HeadDims {
            dense_units: match get("dense_units") {
                Some(v) => parse_num("dense_units", v, "positive integer")?,
                None => defaults.dense_units,
            },
            lstm_units: match get("lstm_units") {
                Some(v) => parse_num("lstm_units", v, "positive integer")?,
                None => defaults.lstm_units,
            },
            conv1_filters: match get("conv1_filters") {
                Some(v) => parse_num("conv1_filters", v, "positive integer")?,
                None => defaults.conv1_filters,
            },
            conv1_kernel: match get("conv1_kernel") {
                Some(v) => parse_num("conv1_kernel", v, "positive integer")?,
                None => defaults.conv1_kernel,
            },
            conv2_filters: match get("conv2_filters") {
                Some(v) => parse_num("conv2_filters", v, "positive integer")?,
                None => defaults.conv2_filters,
            },
            conv2_kernel: match get("conv2_kernel") {
                Some(v) => parse_num("conv2_kernel", v, "positive integer")?,
                None => defaults.conv2_kernel,
            },
            bilstm_readout,
        };

        Ok(RunConfig {
            experiment,
            subtask,
            head,
            epochs: match get("epochs") {
                Some(v) => parse_num("epochs", v, "positive integer")?,
                None => 20,
            },
            batch_size: match get("batch_size") {
                Some(v) => parse_num("batch_size", v, "positive integer")?,
                None => 8,
            },
            lr: match get("lr") {
                Some(v) => parse_num("lr", v, "real number")?,
                None => 1e-6,
            },
            adam_eps: match get("adam_eps") {
                Some(v) => parse_num("adam_eps", v, "real number")?,
                None => 1e-6,
            },
            beta: match get("beta") {
                Some(v) => parse_num("beta", v, "real in [0,1)")?,
                None => 0.9999,
            },
            seed: match get("seed") {
                Some(v) => parse_num("seed", v, "unsigned integer")?,
                None => 42,
            },
            augment_fraction: match get("augment_fraction") {
                Some(v) => parse_num("augment_fraction", v, "real in [0,1]")?,
                None => 0.30,
            },
            dataset: PathBuf::from(required("dataset")?),
            categories: get("categories").map(PathBuf::from),
            train_split: PathBuf::from(required("train_split")?),
            val_split: PathBuf::from(required("val_split")?),
            label_mode,
            vocab: get("vocab").map(PathBuf::from),
            encoder_kind,
            seq_len: match get("seq_len") {
                Some(v) => parse_num("seq_len", v, "positive integer")?,
                None => SEQ_LEN,
            },
            hidden_dim: match get("hidden_dim") {
                Some(v) => parse_num("hidden_dim", v, "positive integer")?,
                None => 1024,
            },
            vocab_size: match get("vocab_size") {
                Some(v) => Some(parse_num("vocab_size", v, "positive integer")?),
                None => None,
            },
            dims,
            freeze_encoder: match get("freeze_encoder") {
                Some(v) => parse_bool("freeze_encoder", v)?,
                None => false,
            },
            translator,
            translator_endpoint: get("translator_endpoint").map(String::from),
            translator_pivot: get("translator_pivot").unwrap_or("fr").to_string(),
            translator_timeout_secs: match get("translator_timeout_secs") {
                Some(v) => parse_num("translator_timeout_secs", v, "seconds")?,
                None => 30,
            },
            translator_retries: match get("translator_retries") {
                Some(v) => parse_num("translator_retries", v, "count")?,
                None => 2,
            },
            out_dir: PathBuf::from(get("out_dir").unwrap_or("runs")),
        })
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        let (augment, loss_weighting) = self.experiment.flags();
        ExperimentSpec {
            name: self.experiment,
            augment,
            loss_weighting,
            beta: self.beta,
            subtask: self.subtask,
            head: self.head,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self, vocab_size: usize) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                seq_len: self.seq_len,
                hidden_dim: self.hidden_dim,
                vocab_size: self.vocab_size.unwrap_or(vocab_size),
                kind: self.encoder_kind.clone(),
            },
            head: self.head,
            subtask: self.subtask,
            dims: self.dims,
            freeze_encoder: self.freeze_encoder,
        }
    }

    pub fn tokenizer(&self) -> Result<WhitespaceTokenizer, TrainError> {
        Ok(match &self.vocab {
            Some(path) => WhitespaceTokenizer::from_vocab_file(path)?,
            None => WhitespaceTokenizer::builtin(),
        })
    }
}

/// All 4 experiments × 4 heads derived from one base config (the full results
/// grid for a subtask).
pub fn experiment_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut grid = Vec::with_capacity(16);
    for name in ExperimentName::ALL {
        for head in HeadKind::ALL {
            let mut cfg = base.clone();
            cfg.experiment = name;
            cfg.head = head;
            grid.push(cfg);
        }
    }
    grid
}

/// Everything a finished run produced, for reporting.
pub struct RunOutcome {
    pub log: TrainLog,
    pub spec: ExperimentSpec,
    pub model_spec: ModelSpec,
    /// Per-branch weights actually used (echoed for auditability).
    pub class_weights: Vec<ClassWeights>,
    pub augment_selected: Vec<String>,
    pub augment_skipped: Vec<crate::augment::SkippedSample>,
    pub train_size: usize,
    pub val_size: usize,
    pub train_log_path: PathBuf,
}

/// Loads data, trains per the config, evaluates on the un-augmented
/// validation split after every epoch and keeps the best checkpoint by the
/// subtask's selection metric.
pub fn run_experiment(
    cfg: &RunConfig,
    translator: &dyn Translator,
) -> Result<RunOutcome, TrainError> {
    let spec = cfg.experiment_spec();
    spec.validate()?;

    let mut samples = load_corpus(&cfg.dataset, cfg.label_mode)?;
    if let Some(categories) = &cfg.categories {
        let category_samples = load_corpus(categories, cfg.label_mode)?;
        merge_category_labels(&mut samples, &category_samples)?;
    }
    let split = SplitSpec::from_files(&cfg.train_split, &cfg.val_split)?;
    let (mut train, val) = apply_split(&samples, &split)?;
    if val.is_empty() {
        return Err(TrainError::InvalidData("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(TrainError::InvalidData("train split is empty".into()));
    }

    let mut augment_selected = Vec::new();
    let mut augment_skipped = Vec::new();
    if spec.augment {
        let augmented = build_augmented_train_set(
            &train,
            &split.val_ids,
            &AugmentationConfig {
                fraction: cfg.augment_fraction,
                seed: spec.seed,
                positive_only: true,
            },
            translator,
        )?;
        train = augmented.samples;
        augment_selected = augmented.selected_ids;
        augment_skipped = augmented.skipped;
    }

    let tokenizer = cfg.tokenizer()?;
    let train_examples = batch_tokenize(&train, &tokenizer)?;
    let val_examples = batch_tokenize(&val, &tokenizer)?;

    let model_spec = cfg.model_spec(tokenizer.vocab_size());
    let mut model = build_model(&model_spec, spec.seed)?;
    let class_weights = class_weights_for(
        spec.subtask,
        &train_examples,
        spec.loss_weighting,
        spec.beta,
    )?;
    let mut adam = Adam::new(&model, spec.lr, spec.adam_eps);

    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| TrainError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.json");
    let train_log_path = cfg.out_dir.join("train_log.tsv");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.epochs);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 1..=spec.epochs {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(spec.batch_size).enumerate() {
            let batch: Vec<TokenizedExample> =
                chunk.iter().map(|&i| train_examples[i].clone()).collect();
            let (tokens, mask) = batch_inputs(&batch);
            let (out, cache) = model.forward_cached(tokens.view(), mask.view())?;
            if !out.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let targets = BatchTargets::from_examples(spec.subtask, &batch);
            let (loss, dlogits) = loss_and_dlogits(&out, &targets, &class_weights)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = model.backward(&cache, &dlogits);
            adam.step(&mut model, &grads);
            loss_sum += loss;
            batches += 1;
        }

        let report = evaluate_model(&model, &val_examples, spec.batch_size)?;
        let val_metric = report.selection_metric();
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_metric,
        });
        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            model.save(&checkpoint_path)?;
        }
    }

    let log = TrainLog {
        epochs: records,
        best_epoch,
        best_metric,
        checkpoint: checkpoint_path,
    };
    std::fs::write(&train_log_path, log.render()).map_err(|source| TrainError::Io {
        path: train_log_path.display().to_string(),
        source,
    })?;

    Ok(RunOutcome {
        log,
        spec,
        model_spec,
        class_weights,
        augment_selected,
        augment_skipped,
        train_size: train_examples.len(),
        val_size: val_examples.len(),
        train_log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const MINIMAL: &str = "\
experiment = BASIC
subtask = A
head = fnn
dataset = data.tsv
train_split = train.txt
val_split = val.txt
";

    #[test]
    fn select_best_is_argmax_with_earliest_tie() {
        assert_eq!(select_best(&[0.1, 0.5, 0.3]).unwrap(), 2);
        assert_eq!(select_best(&[0.4, 0.4]).unwrap(), 1);
        assert!(matches!(select_best(&[]), Err(TrainError::EmptyLog)));
    }

    #[test]
    fn select_best_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let metrics: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let best = select_best(&metrics).unwrap();
            let brute = metrics
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &m)| {
                    if m > acc.1 {
                        (i, m)
                    } else {
                        acc
                    }
                })
                .0
                + 1;
            assert_eq!(best, brute);
        }
    }

    #[test]
    fn experiment_matrix_flags() {
        assert_eq!(ExperimentName::Basic.flags(), (false, false));
        assert_eq!(ExperimentName::Aug.flags(), (true, false));
        assert_eq!(ExperimentName::Wt.flags(), (false, true));
        assert_eq!(ExperimentName::AugWt.flags(), (true, true));
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr, 1e-6);
        assert_eq!(cfg.adam_eps, 1e-6);
        assert_eq!(cfg.beta, 0.9999);
        assert_eq!(cfg.seq_len, 106);
        assert_eq!(cfg.hidden_dim, 1024);
        assert_eq!(cfg.dims, HeadDims::default());
        let spec = cfg.experiment_spec();
        assert!(!spec.augment);
        assert!(!spec.loss_weighting);
        spec.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = format!("{MINIMAL}learning_rate = 0.1\n");
        match RunConfig::from_str(&bad).unwrap_err() {
            ConfigError::UnknownKey(key) => assert_eq!(key, "learning_rate"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn basic_with_augment_yes_is_inconsistent() {
        let bad = format!("{MINIMAL}augment = yes\n");
        assert!(matches!(
            RunConfig::from_str(&bad).unwrap_err(),
            ConfigError::Inconsistent(_)
        ));
        let ok = format!("{MINIMAL}augment = no\nloss_weighting = no\n");
        RunConfig::from_str(&ok).unwrap();
    }

    #[test]
    fn missing_required_key_is_named() {
        match RunConfig::from_str("experiment = BASIC\n").unwrap_err() {
            ConfigError::MissingKey(key) => assert_eq!(key, "subtask"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn grid_enumerates_sixteen_runs() {
        let base = RunConfig::from_str(MINIMAL).unwrap();
        let grid = experiment_grid(&base);
        assert_eq!(grid.len(), 16);
        let mut combos: Vec<(ExperimentName, HeadKind)> =
            grid.iter().map(|c| (c.experiment, c.head)).collect();
        combos.dedup();
        assert_eq!(combos.len(), 16);
        for cfg in &grid {
            cfg.experiment_spec().validate().unwrap();
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn loss_and_dlogits_match_brute_force() {
        use crate::models::{build_model, EncoderConfig, HeadDims, ModelSpec};
        let spec = ModelSpec {
            encoder: EncoderConfig::tiny(20),
            head: HeadKind::Fnn,
            subtask: Subtask::B,
            dims: HeadDims::tiny(),
            freeze_encoder: false,
        };
        let model = build_model(&spec, 9).unwrap();
        let tokens = ndarray::Array2::from_shape_fn((3, 30), |(b, t)| (b + t) % 20);
        let mask = ndarray::Array2::ones((3, 30));
        let out = model.forward(tokens.view(), mask.view()).unwrap();
        let labels: Vec<[u8; 7]> = vec![
            [1, 0, 0, 0, 0, 0, 1],
            [0, 0, 0, 0, 0, 0, 0],
            [0, 1, 1, 0, 0, 0, 0],
        ];
        let weights = vec![ClassWeights::uniform(2); 7];
        let (loss, _) = loss_and_dlogits(&out, &BatchTargets::B(labels.clone()), &weights).unwrap();
        // brute force: mean over branches of mean over batch
        let mut brute = 0.0;
        for h in 0..7 {
            let mut branch = 0.0;
            for b in 0..3 {
                let row: Vec<f64> = out.logits.slice(s![b, h, ..]).to_vec();
                branch +=
                    crate::balance::weighted_ce_loss(&row, labels[b][h] as usize, 1.0).unwrap();
            }
            brute += branch / 3.0;
        }
        brute /= 7.0;
        assert_relative_eq!(loss, brute, max_relative = 1e-12);
    }

    #[test]
    fn class_weights_fall_back_to_uniform_when_unweighted() {
        let examples = vec![TokenizedExample {
            token_ids: vec![0; 30],
            attention_mask: vec![0; 30],
            binary_label: 1,
            category_labels: [1, 0, 0, 0, 0, 0, 0],
        }];
        let w = class_weights_for(Subtask::B, &examples, false, 0.9).unwrap();
        assert_eq!(w.len(), 7);
        assert!(w.iter().all(|cw| cw.weights == vec![1.0, 1.0]));
        let w = class_weights_for(Subtask::A, &examples, true, 0.5).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].weights[1] >= w[0].weights[0]);
    }

    #[test]
    fn predictions_render_submission_formats() {
        let a = Predictions::A(vec![1, 0, 1]);
        assert_eq!(a.render(), "1\n0\n1\n");
        let b = Predictions::B(vec![[0, 1, 0, 0, 0, 0, 1]]);
        assert_eq!(b.render(), "0,1,0,0,0,0,1\n");
        assert_eq!(Predictions::A(vec![]).render(), "");
    }

    #[test]
    fn argmax_prediction_rule() {
        assert_eq!(argmax2(2.0, -1.0), 0);
        assert_eq!(argmax2(-1.0, 2.0), 1);
        assert_eq!(argmax2(0.5, 0.5), 0); // tie → earliest class
    }
}
