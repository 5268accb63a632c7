//! Back-translation augmentation over a seeded fraction of positive train
//! samples.
//!
//! A translator takes text to a pivot language and back, perturbing surface
//! form while keeping the meaning (and therefore the labels). Augmented
//! copies are appended to the train set, never replacing originals, and their
//! `par_id` gains a `_bt` suffix so provenance stays auditable. Translation is
//! best-effort: a failing sample is skipped and reported, not fatal.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, AUGMENT_ID_SUFFIX};

/// Round-trip translation interface: `forward` into the pivot language,
/// `backward` into the source language. Implementations must be total —
/// non-empty input maps to non-empty output or an error.
pub trait Translator: Sync {
    fn forward(&self, text: &str) -> Result<String, String>;
    fn backward(&self, text: &str) -> Result<String, String>;
}

/// Pass-through translator; useful for desk-scale runs and plumbing checks.
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn forward(&self, text: &str) -> Result<String, String> {
        Ok(text.to_string())
    }
    fn backward(&self, text: &str) -> Result<String, String> {
        Ok(text.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Fraction of eligible samples to select, in [0, 1].
    pub fraction: f64,
    pub seed: u64,
    /// Restrict selection to positive samples.
    pub positive_only: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            fraction: 0.30,
            seed: 0,
            positive_only: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("fraction must lie in [0, 1], got {0}")]
    FractionOutOfRange(f64),
    #[error("validation samples passed as train data: {}", ids.join(", "))]
    ValidationLeak { ids: Vec<String> },
}

/// A sample skipped during back-translation, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub par_id: String,
    pub reason: String,
}

/// Draws `⌊fraction × |eligible|⌋` distinct samples uniformly without
/// replacement, deterministically for a fixed seed. Results keep input order.
pub fn select_for_augmentation(
    samples: &[Sample],
    cfg: &AugmentationConfig,
) -> Result<Vec<Sample>, AugmentError> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(AugmentError::FractionOutOfRange(cfg.fraction));
    }
    let mut pool: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !cfg.positive_only || s.is_positive())
        .map(|(i, _)| i)
        .collect();
    let take = (cfg.fraction * pool.len() as f64).floor() as usize;

    // partial Fisher-Yates: the first `take` slots end up a uniform draw
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen: Vec<usize> = pool[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| samples[i].clone()).collect())
}

/// Round-trips each sample's text through the translator. Labels and all
/// other fields are preserved; `par_id` gains the `_bt` suffix. Failing
/// samples are skipped and reported.
pub fn back_translate(
    samples: &[Sample],
    tr: &dyn Translator,
) -> (Vec<Sample>, Vec<SkippedSample>) {
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for sample in samples {
        match round_trip(&sample.text, tr) {
            Ok(text) => {
                let mut copy = sample.clone();
                copy.par_id = format!("{}{}", sample.par_id, AUGMENT_ID_SUFFIX);
                copy.text = text;
                out.push(copy);
            }
            Err(reason) => skipped.push(SkippedSample {
                par_id: sample.par_id.clone(),
                reason,
            }),
        }
    }
    (out, skipped)
}

fn round_trip(text: &str, tr: &dyn Translator) -> Result<String, String> {
    let pivot = tr.forward(text).map_err(|e| format!("forward: {e}"))?;
    let back = tr.backward(&pivot).map_err(|e| format!("backward: {e}"))?;
    if back.trim().is_empty() && !text.trim().is_empty() {
        return Err("translator returned empty text".into());
    }
    Ok(back)
}

/// The train set extended with its back-translated selections.
#[derive(Debug, Clone)]
pub struct AugmentedTrainSet {
    pub samples: Vec<Sample>,
    /// par_ids chosen for augmentation (before translation).
    pub selected_ids: Vec<String>,
    pub skipped: Vec<SkippedSample>,
}

/// Selects, back-translates and appends. `val_ids` is the leakage guard:
/// train data overlapping the validation split is refused outright.
pub fn build_augmented_train_set(
    train: &[Sample],
    val_ids: &BTreeSet<String>,
    cfg: &AugmentationConfig,
    tr: &dyn Translator,
) -> Result<AugmentedTrainSet, AugmentError> {
    let leaked: Vec<String> = train
        .iter()
        .filter(|s| val_ids.contains(&s.par_id))
        .map(|s| s.par_id.clone())
        .collect();
    if !leaked.is_empty() {
        return Err(AugmentError::ValidationLeak { ids: leaked });
    }
    let selected = select_for_augmentation(train, cfg)?;
    let selected_ids: Vec<String> = selected.iter().map(|s| s.par_id.clone()).collect();
    let (augmented, skipped) = back_translate(&selected, tr);
    let mut samples = train.to_vec();
    samples.extend(augmented);
    Ok(AugmentedTrainSet {
        samples,
        selected_ids,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NUM_CATEGORIES;

    fn sample(par_id: &str, label: u8, text: &str) -> Sample {
        let mut category_labels = [0u8; NUM_CATEGORIES];
        if label == 1 {
            category_labels[0] = 1; // UPR
        }
        Sample {
            par_id: par_id.into(),
            art_id: format!("@{par_id}"),
            keyword: "homeless".into(),
            country: "gb".into(),
            text: text.into(),
            binary_label: label,
            category_labels,
        }
    }

    fn corpus(positives: usize, negatives: usize) -> Vec<Sample> {
        let mut out = Vec::new();
        for i in 0..positives {
            out.push(sample(&format!("p{i}"), 1, "a positive paragraph"));
        }
        for i in 0..negatives {
            out.push(sample(&format!("n{i}"), 0, "a negative paragraph"));
        }
        out
    }

    /// Fails on texts containing the marker word.
    struct MarkerFailTranslator;

    impl Translator for MarkerFailTranslator {
        fn forward(&self, text: &str) -> Result<String, String> {
            if text.contains("POISON") {
                Err("refused".into())
            } else {
                Ok(text.to_string())
            }
        }
        fn backward(&self, text: &str) -> Result<String, String> {
            Ok(text.to_string())
        }
    }

    /// Deterministically rewrites word order, so output differs from input.
    struct RotateTranslator;

    impl Translator for RotateTranslator {
        fn forward(&self, text: &str) -> Result<String, String> {
            let mut words: Vec<&str> = text.split_whitespace().collect();
            if words.len() > 1 {
                words.rotate_left(1);
            }
            Ok(words.join(" "))
        }
        fn backward(&self, text: &str) -> Result<String, String> {
            Ok(text.to_string())
        }
    }

    #[test]
    fn thirty_percent_of_993_is_297() {
        let samples = corpus(993, 100);
        let cfg = AugmentationConfig {
            seed: 42,
            ..Default::default()
        };
        let selected = select_for_augmentation(&samples, &cfg).unwrap();
        assert_eq!(selected.len(), 297);
        assert!(selected.iter().all(|s| s.is_positive()));
        let mut ids: Vec<&str> = selected.iter().map(|s| s.par_id.as_str()).collect();
        let before = ids.clone();
        ids.dedup();
        assert_eq!(ids, before, "selection must be distinct");
    }

    #[test]
    fn no_positives_selects_nothing() {
        let samples = corpus(0, 50);
        let selected = select_for_augmentation(&samples, &AugmentationConfig::default()).unwrap();
        assert!(selected.is_empty());
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let samples = corpus(40, 10);
        let cfg = AugmentationConfig {
            seed: 7,
            ..Default::default()
        };
        let a = select_for_augmentation(&samples, &cfg).unwrap();
        let b = select_for_augmentation(&samples, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fraction_out_of_range_rejected() {
        let cfg = AugmentationConfig {
            fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            select_for_augmentation(&corpus(5, 0), &cfg),
            Err(AugmentError::FractionOutOfRange(_))
        ));
    }

    #[test]
    fn identity_translation_preserves_everything_but_id() {
        let samples = corpus(3, 0);
        let (out, skipped) = back_translate(&samples, &IdentityTranslator);
        assert!(skipped.is_empty());
        assert_eq!(out.len(), 3);
        for (orig, copy) in samples.iter().zip(&out) {
            assert_eq!(copy.par_id, format!("{}_bt", orig.par_id));
            assert_eq!(copy.text, orig.text);
            assert_eq!(copy.binary_label, 1);
            assert_eq!(copy.category_labels[0], 1);
        }
    }

    #[test]
    fn failures_skip_and_warn() {
        let mut samples = corpus(297, 0);
        samples[10].text = "POISON text one".into();
        samples[200].text = "POISON text two".into();
        let (out, skipped) = back_translate(&samples, &MarkerFailTranslator);
        assert_eq!(out.len(), 295);
        assert_eq!(skipped.len(), 2);
        assert_eq!(skipped[0].par_id, "p10");
        assert_eq!(skipped[1].par_id, "p200");
    }

    #[test]
    fn rotating_translator_changes_text_not_labels() {
        let samples = vec![sample("p0", 1, "alpha beta gamma")];
        let (out, _) = back_translate(&samples, &RotateTranslator);
        assert_eq!(out[0].text, "beta gamma alpha");
        assert_eq!(out[0].binary_label, 1);
    }

    #[test]
    fn fraction_zero_is_identity() {
        let train = corpus(10, 90);
        let cfg = AugmentationConfig {
            fraction: 0.0,
            seed: 1,
            positive_only: true,
        };
        let out =
            build_augmented_train_set(&train, &BTreeSet::new(), &cfg, &IdentityTranslator).unwrap();
        assert_eq!(out.samples, train);
        assert!(out.selected_ids.is_empty());
    }

    #[test]
    fn hundred_train_ten_positive_grows_to_103() {
        let train = corpus(10, 90);
        let cfg = AugmentationConfig {
            seed: 3,
            ..Default::default()
        };
        let out =
            build_augmented_train_set(&train, &BTreeSet::new(), &cfg, &IdentityTranslator).unwrap();
        assert_eq!(out.samples.len(), 103);
        assert_eq!(out.selected_ids.len(), 3);
        // size law: |out| = |in| + |selected| − |failures|
        assert_eq!(
            out.samples.len(),
            train.len() + out.selected_ids.len() - out.skipped.len()
        );
        // all augmented ids derive from train ids
        for s in &out.samples[train.len()..] {
            let parent = s.par_id.strip_suffix("_bt").unwrap();
            assert!(train.iter().any(|t| t.par_id == parent));
        }
    }

    #[test]
    fn leakage_guard_trips_on_validation_ids() {
        let train = corpus(4, 4);
        let val_ids: BTreeSet<String> = BTreeSet::from(["p2".to_string(), "x9".to_string()]);
        match build_augmented_train_set(
            &train,
            &val_ids,
            &AugmentationConfig::default(),
            &IdentityTranslator,
        ) {
            Err(AugmentError::ValidationLeak { ids }) => assert_eq!(ids, ["p2"]),
            other => panic!("guard did not trip: {other:?}"),
        }
    }

    #[test]
    fn negatives_untouched_under_positive_only() {
        let train = corpus(5, 20);
        let cfg = AugmentationConfig {
            fraction: 1.0,
            seed: 9,
            positive_only: true,
        };
        let out =
            build_augmented_train_set(&train, &BTreeSet::new(), &cfg, &IdentityTranslator).unwrap();
        assert_eq!(out.samples.len(), 30);
        assert!(out.samples[25..].iter().all(|s| s.is_positive()));
    }
}
