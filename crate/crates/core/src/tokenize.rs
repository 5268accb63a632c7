//! Fixed-length model inputs with the sample's keyword prepended for context.
//!
//! Every sample maps to exactly [`SEQ_LEN`] = 106 token ids laid out as
//!
//! ```text
//! [CLS] kw kw kw [SEP] t0 t1 … t99 [SEP]
//! ```
//!
//! with a 3-token keyword slot and a 100-token text slot, each padded or
//! truncated to size. The attention mask is 1 on CLS, SEP and real tokens and
//! 0 on padding. Any subword tokenizer exposing encode/CLS/SEP/PAD plugs in
//! behind [`TokenizerHandle`]; a deterministic whitespace-vocabulary double
//! ships with the crate for tests and desk-scale runs.

use std::path::Path;

use crate::corpus::{normalize_keyword, Sample, NUM_CATEGORIES};

/// Total input length: CLS + 3 keyword tokens + SEP + 100 text tokens + SEP.
pub const SEQ_LEN: usize = 106;
/// Keyword slot width in subword tokens.
pub const KEYWORD_SLOT: usize = 3;
/// Text slot width in subword tokens.
pub const TEXT_SLOT: usize = 100;

/// Minimal subword-tokenizer surface the pipeline depends on.
///
/// Implementations must be deterministic: the same text always encodes to the
/// same ids.
pub trait TokenizerHandle: Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>, String>;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    /// Number of distinct ids the tokenizer can emit (embedding table size).
    fn vocab_size(&self) -> usize;
}

/// A tokenized sample ready for batching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub binary_label: u8,
    pub category_labels: [u8; NUM_CATEGORIES],
}

#[derive(Debug, thiserror::Error)]
pub enum TokenizeError {
    #[error("tokenizer failed on sample {par_id}: {reason}")]
    Tokenizer { par_id: String, reason: String },
    #[error("tokenization failed for {} samples (first: {}: {})",
            failures.len(), failures[0].0, failures[0].1)]
    Batch { failures: Vec<(String, String)> },
    #[error("cannot read vocab {path}: {source}")]
    VocabIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab is missing special token {0}")]
    MissingSpecial(&'static str),
}

/// Encodes one sample into the fixed 106-token layout.
pub fn tokenize_sample(
    sample: &Sample,
    tok: &dyn TokenizerHandle,
) -> Result<TokenizedExample, TokenizeError> {
    let fail = |reason: String| TokenizeError::Tokenizer {
        par_id: sample.par_id.clone(),
        reason,
    };
    let keyword = normalize_keyword(&sample.keyword).unwrap_or(sample.keyword.as_str());
    let keyword_ids = tok.encode(keyword).map_err(fail)?;
    let text_ids = tok
        .encode(&sample.text)
        .map_err(|reason| TokenizeError::Tokenizer {
            par_id: sample.par_id.clone(),
            reason,
        })?;

    let mut token_ids = Vec::with_capacity(SEQ_LEN);
    let mut attention_mask = Vec::with_capacity(SEQ_LEN);
    let mut push = |id: u32, mask: u8| {
        token_ids.push(id);
        attention_mask.push(mask);
    };

    push(tok.cls_id(), 1);
    for slot in 0..KEYWORD_SLOT {
        match keyword_ids.get(slot) {
            Some(&id) => push(id, 1),
            None => push(tok.pad_id(), 0),
        }
    }
    push(tok.sep_id(), 1);
    for slot in 0..TEXT_SLOT {
        match text_ids.get(slot) {
            Some(&id) => push(id, 1),
            None => push(tok.pad_id(), 0),
        }
    }
    push(tok.sep_id(), 1);

    debug_assert_eq!(token_ids.len(), SEQ_LEN);
    Ok(TokenizedExample {
        token_ids,
        attention_mask,
        binary_label: sample.binary_label,
        category_labels: sample.category_labels,
    })
}

/// Elementwise [`tokenize_sample`] preserving order; collects all per-sample
/// failures instead of stopping at the first.
pub fn batch_tokenize(
    samples: &[Sample],
    tok: &dyn TokenizerHandle,
) -> Result<Vec<TokenizedExample>, TokenizeError> {
    let mut out = Vec::with_capacity(samples.len());
    let mut failures = Vec::new();
    for sample in samples {
        match tokenize_sample(sample, tok) {
            Ok(example) => out.push(example),
            Err(TokenizeError::Tokenizer { par_id, reason }) => failures.push((par_id, reason)),
            Err(other) => return Err(other),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(TokenizeError::Batch { failures })
    }
}

/// Deterministic whitespace-split tokenizer over a fixed plain-text vocab
/// (one token per line, id = line number). Out-of-vocabulary words map to
/// `[UNK]`.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    ids: std::collections::HashMap<String, u32>,
    cls: u32,
    sep: u32,
    pad: u32,
    unk: u32,
}

impl WhitespaceTokenizer {
    pub fn from_vocab_text(text: &str) -> Result<Self, TokenizeError> {
        let mut ids = std::collections::HashMap::new();
        for (i, line) in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
        {
            ids.entry(line.to_string()).or_insert(i as u32);
        }
        let special = |name: &'static str| {
            ids.get(name)
                .copied()
                .ok_or(TokenizeError::MissingSpecial(name))
        };
        Ok(WhitespaceTokenizer {
            cls: special("[CLS]")?,
            sep: special("[SEP]")?,
            pad: special("[PAD]")?,
            unk: special("[UNK]")?,
            ids,
        })
    }

    pub fn from_vocab_file(path: &Path) -> Result<Self, TokenizeError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizeError::VocabIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_vocab_text(&text)
    }

    /// The vocab shipped with the crate (specials, the 10 keywords, common
    /// words for toy corpora).
    pub fn builtin() -> Self {
        Self::from_vocab_text(include_str!("../assets/test_vocab.txt"))
            .expect("builtin vocab has all specials")
    }
}

impl TokenizerHandle for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, String> {
        Ok(text
            .split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                let stripped = lower.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-');
                let word = if stripped.is_empty() {
                    lower.as_str()
                } else {
                    stripped
                };
                self.ids.get(word).copied().unwrap_or(self.unk)
            })
            .collect())
    }

    fn cls_id(&self) -> u32 {
        self.cls
    }

    fn sep_id(&self) -> u32 {
        self.sep
    }

    fn pad_id(&self) -> u32 {
        self.pad
    }

    fn vocab_size(&self) -> usize {
        self.ids
            .values()
            .map(|&v| v as usize + 1)
            .max()
            .unwrap_or(0)
    }
}
