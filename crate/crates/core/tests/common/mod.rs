//! Shared fixtures: deterministic toy corpora small enough to train against
//! in milliseconds, written in the documented TSV layouts.
#![allow(dead_code)] // not every test target touches every fixture field

use std::path::{Path, PathBuf};

use pcl_core::corpus::{Sample, KEYWORDS, NUM_CATEGORIES};
use pcl_core::models::{EncoderKind, HeadDims, HeadKind, Subtask};
use pcl_core::train::{ExperimentName, RunConfig, TranslatorChoice};

const POSITIVE_PHRASES: [&str; 4] = [
    "they helped the poor families with free medicine and shelter",
    "homeless women still need help to sleep safe",
    "the charity gave food and money to the vulnerable children",
    "we must support the refugee families searching for a home",
];

const NEGATIVE_PHRASES: [&str; 4] = [
    "the city report said the new year will be long",
    "local news article on the national solution for work",
    "today the government and the community said more jobs",
    "a story from the world news on the schools this year",
];

/// `n` samples, every `positive_every`-th positive, texts drawn from the
/// builtin vocab so tokenization is informative.
pub fn toy_corpus(n: usize, positive_every: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let positive = positive_every > 0 && i % positive_every == 0;
            let text = if positive {
                POSITIVE_PHRASES[i % POSITIVE_PHRASES.len()]
            } else {
                NEGATIVE_PHRASES[i % NEGATIVE_PHRASES.len()]
            };
            let mut category_labels = [0u8; NUM_CATEGORIES];
            if positive {
                category_labels[0] = 1; // UPR on every positive
                category_labels[(i / positive_every) % NUM_CATEGORIES] = 1;
            }
            Sample {
                par_id: format!("s{i}"),
                art_id: format!("@a{i}"),
                keyword: KEYWORDS[i % KEYWORDS.len()].to_string(),
                country: "gb".to_string(),
                text: format!("{text} number {i}"),
                binary_label: u8::from(positive),
                category_labels,
            }
        })
        .collect()
}

pub struct ToyData {
    pub dataset: PathBuf,
    pub categories: PathBuf,
    pub train_split: PathBuf,
    pub val_split: PathBuf,
    pub samples: Vec<Sample>,
    pub train_count: usize,
}

/// Writes dataset/categories/split files for `samples`, holding out every
/// fifth sample for validation.
pub fn write_toy_data(dir: &Path, samples: &[Sample]) -> ToyData {
    let dataset = dir.join("dataset.tsv");
    pcl_core::corpus::write_corpus(samples, &dataset).unwrap();

    let categories = dir.join("categories.tsv");
    let mut cat_rows = String::new();
    for s in samples.iter().filter(|s| s.binary_label == 1) {
        for (c, &bit) in s.category_labels.iter().enumerate() {
            if bit == 1 {
                let code = pcl_core::corpus::CATEGORY_CODES[c];
                cat_rows.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t0\t4\t{}\t{}\t2\n",
                    s.par_id,
                    s.art_id,
                    s.text,
                    s.keyword,
                    s.country,
                    &s.text[..4.min(s.text.len())],
                    code
                ));
            }
        }
    }
    std::fs::write(&categories, cat_rows).unwrap();

    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if i % 5 == 4 {
            val_ids.push(s.par_id.clone());
        } else {
            train_ids.push(s.par_id.clone());
        }
    }
    let train_split = dir.join("train.txt");
    let val_split = dir.join("val.txt");
    std::fs::write(&train_split, train_ids.join("\n")).unwrap();
    std::fs::write(&val_split, val_ids.join("\n")).unwrap();

    ToyData {
        dataset,
        categories,
        train_split,
        val_split,
        samples: samples.to_vec(),
        train_count: train_ids.len(),
    }
}

/// A desk-scale run configuration over the toy data.
pub fn tiny_run_config(data: &ToyData, out_dir: &Path) -> RunConfig {
    RunConfig {
        experiment: ExperimentName::Basic,
        subtask: Subtask::A,
        head: HeadKind::Fnn,
        epochs: 5,
        batch_size: 8,
        lr: 1e-2,
        adam_eps: 1e-6,
        beta: 0.9999,
        seed: 42,
        augment_fraction: 0.30,
        dataset: data.dataset.clone(),
        categories: None,
        train_split: data.train_split.clone(),
        val_split: data.val_split.clone(),
        label_mode: pcl_core::corpus::LabelMode::Binary,
        vocab: None,
        encoder_kind: EncoderKind::TinyRandom,
        seq_len: pcl_core::tokenize::SEQ_LEN,
        hidden_dim: 16,
        vocab_size: None,
        dims: tiny_dims_for_seq_len(),
        freeze_encoder: false,
        translator: TranslatorChoice::Identity,
        translator_endpoint: None,
        translator_pivot: "fr".to_string(),
        translator_timeout_secs: 30,
        translator_retries: 2,
        out_dir: out_dir.to_path_buf(),
    }
}

/// Tiny head sizes that also fit the full 106-token sequence maps.
pub fn tiny_dims_for_seq_len() -> HeadDims {
    HeadDims {
        dense_units: 12,
        lstm_units: 12,
        conv1_filters: 4,
        conv1_kernel: 3,
        conv2_filters: 3,
        conv2_kernel: 2,
        ..HeadDims::default()
    }
}
