//! Detection pipeline for patronizing and condescending language (PCL) in
//! news-article paragraphs.
//!
//! The pipeline covers two tasks over the same paragraphs: binary PCL
//! detection (subtask A) and 7-category PCL identification (subtask B).
//! Modules follow the data path:
//!
//! - [`corpus`] — load, validate, split and summarize the paragraph dataset
//! - [`tokenize`] — keyword-prepended fixed-length (106) token sequences
//! - [`augment`] — back-translation of a seeded 30% of positive train samples
//! - [`balance`] — class-balanced loss weights and weighted cross-entropy
//! - [`models`] — pluggable sequence encoder plus four classifier heads
//! - [`train`] — experiment runner (BASIC/AUG/WT/AUG+WT), checkpoints, prediction
//! - [`metrics`] — precision/recall/F1 and per-category macro-F1 reports

pub mod augment;
pub mod balance;
pub mod corpus;
pub mod metrics;
pub mod models;
pub mod tokenize;
pub mod train;

pub use corpus::{CorpusStats, LabelMode, Sample, SplitSpec, NUM_CATEGORIES};
pub use metrics::{BinaryCounts, EvalReport};
pub use models::{EncoderConfig, EncoderKind, HeadKind, Model, ModelSpec, Subtask};
pub use train::{ExperimentName, ExperimentSpec, TrainLog};
