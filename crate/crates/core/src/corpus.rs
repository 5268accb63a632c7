//! Loading, validation, splitting and summary statistics for the PCL
//! paragraph dataset.
//!
//! Two tab-separated input layouts are understood, distinguished by column
//! count:
//!
//! - paragraph rows (6 columns): `par_id  art_id  keyword  country  text  label`
//! - category span rows (10 columns): `par_id  art_id  text  keyword  country
//!   span_start  span_end  span_text  category  annotators`, several rows per
//!   paragraph; these aggregate into one positive sample per paragraph with a
//!   multi-hot category vector.
//!
//! Span offsets are reduced to paragraph-level presence bits; the downstream
//! models only consume paragraph-level labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Number of PCL categories (subtask B outputs).
pub const NUM_CATEGORIES: usize = 7;

/// Category codes in canonical order.
pub const CATEGORY_CODES: [&str; NUM_CATEGORIES] = ["UPR", "SSL", "PS", "AV", "MTP", "CMP", "PM"];

/// The closed vocabulary of vulnerable-group keywords.
pub const KEYWORDS: [&str; 10] = [
    "disabled",
    "homeless",
    "hopeless",
    "immigrant",
    "in-need",
    "migrant",
    "poor-families",
    "refugee",
    "vulnerable",
    "women",
];

/// Suffix appended to `par_id` of back-translated copies.
pub const AUGMENT_ID_SUFFIX: &str = "_bt";

/// How the label column of paragraph rows is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    /// Label column already holds 0/1.
    Binary,
    /// Label column holds a 0–4 agreement score; ≥2 counts as positive.
    Scale,
}

impl LabelMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Some(LabelMode::Binary),
            "scale" => Some(LabelMode::Scale),
            _ => None,
        }
    }
}

/// One paragraph with its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub par_id: String,
    pub art_id: String,
    pub keyword: String,
    pub country: String,
    pub text: String,
    pub binary_label: u8,
    /// Multi-hot category vector in [`CATEGORY_CODES`] order; all-zero for
    /// negative samples.
    pub category_labels: [u8; NUM_CATEGORIES],
}

impl Sample {
    /// Checks the per-sample invariants; `context` names the sample in errors.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.binary_label > 1 {
            return Err(CorpusError::Validation {
                par_id: self.par_id.clone(),
                reason: format!("binary label must be 0 or 1, got {}", self.binary_label),
            });
        }
        if self.text.trim().is_empty() {
            return Err(CorpusError::Validation {
                par_id: self.par_id.clone(),
                reason: "text is empty".into(),
            });
        }
        if normalize_keyword(&self.keyword).is_none() {
            return Err(CorpusError::Validation {
                par_id: self.par_id.clone(),
                reason: format!("unknown keyword {:?}", self.keyword),
            });
        }
        if self.category_labels.iter().any(|&b| b > 1) {
            return Err(CorpusError::Validation {
                par_id: self.par_id.clone(),
                reason: "category labels must be 0 or 1".into(),
            });
        }
        if self.binary_label == 0 && self.category_labels.iter().any(|&b| b != 0) {
            return Err(CorpusError::Validation {
                par_id: self.par_id.clone(),
                reason: "negative sample carries category labels".into(),
            });
        }
        Ok(())
    }

    pub fn is_positive(&self) -> bool {
        self.binary_label == 1
    }
}

/// Lowercases and hyphenates a keyword, returning the canonical form if it is
/// in the closed vocabulary.
pub fn normalize_keyword(raw: &str) -> Option<&'static str> {
    let norm = raw.trim().to_ascii_lowercase().replace([' ', '_'], "-");
    KEYWORDS.iter().find(|&&k| k == norm).copied()
}

/// Maps a category name (short code or the long underscore form) to its index.
pub fn category_index(raw: &str) -> Option<usize> {
    let norm = raw.trim().to_ascii_lowercase().replace([' ', '-'], "_");
    match norm.as_str() {
        "upr" | "unbalanced_power_relations" => Some(0),
        "ssl" | "shallow_solution" | "shallow_solutions" => Some(1),
        "ps" | "presupposition" => Some(2),
        "av" | "authority_voice" => Some(3),
        "mtp" | "metaphor" | "metaphors" => Some(4),
        "cmp" | "compassion" => Some(5),
        "pm" | "the_poorer_the_merrier" | "poorer_the_merrier" => Some(6),
        _ => None,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("sample {par_id}: {reason}")]
    Validation { par_id: String, reason: String },
    #[error("split references unknown par_ids: {}", ids.join(", "))]
    MissingSplitIds { ids: Vec<String> },
    #[error("{count} samples are in neither split part (first: {first})")]
    UncoveredSamples { count: usize, first: String },
    #[error("train and validation splits overlap on: {}", ids.join(", "))]
    OverlappingSplit { ids: Vec<String> },
    #[error("sample {par_id} cannot be serialized: {reason}")]
    Serialize { par_id: String, reason: String },
}

/// Loads samples from either supported TSV layout (detected per file by
/// column count). A first line whose numeric column does not parse is treated
/// as a header and skipped. Category span files aggregate to one positive
/// sample per paragraph, in first-appearance order.
pub fn load_corpus(path: &Path, mode: LabelMode) -> Result<Vec<Sample>, CorpusError> {
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&content, mode)
}

/// [`load_corpus`] over in-memory TSV content.
pub fn parse_corpus(content: &str, mode: LabelMode) -> Result<Vec<Sample>, CorpusError> {
    let mut samples: Vec<Sample> = Vec::new();
    // par_id -> index into samples, for category aggregation + duplicate check
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    let mut layout: Option<usize> = None;

    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if idx == 0 && looks_like_header(&cols) {
            continue;
        }
        let ncols = match layout {
            Some(n) => {
                if cols.len() != n {
                    return Err(CorpusError::Parse {
                        line: lineno,
                        reason: format!("expected {} columns, got {}", n, cols.len()),
                    });
                }
                n
            }
            None => match cols.len() {
                6 | 10 => {
                    layout = Some(cols.len());
                    cols.len()
                }
                other => {
                    return Err(CorpusError::Parse {
                        line: lineno,
                        reason: format!("expected 6 or 10 columns, got {other}"),
                    });
                }
            },
        };

        if ncols == 6 {
            let sample = parse_paragraph_row(&cols, mode, lineno)?;
            if by_id.contains_key(&sample.par_id) {
                return Err(CorpusError::Parse {
                    line: lineno,
                    reason: format!("duplicate par_id {:?}", sample.par_id),
                });
            }
            sample.validate()?;
            by_id.insert(sample.par_id.clone(), samples.len());
            samples.push(sample);
        } else {
            let (sample, cat) = parse_category_row(&cols, lineno)?;
            match by_id.get(&sample.par_id) {
                Some(&i) => samples[i].category_labels[cat] = 1,
                None => {
                    let mut sample = sample;
                    sample.category_labels[cat] = 1;
                    sample.validate()?;
                    by_id.insert(sample.par_id.clone(), samples.len());
                    samples.push(sample);
                }
            }
        }
    }
    Ok(samples)
}

fn looks_like_header(cols: &[&str]) -> bool {
    let numeric_col = match cols.len() {
        6 => cols[5],  // label
        10 => cols[5], // span_start
        _ => return false,
    };
    numeric_col.trim().parse::<i64>().is_err()
}

fn parse_paragraph_row(
    cols: &[&str],
    mode: LabelMode,
    lineno: usize,
) -> Result<Sample, CorpusError> {
    let raw_label: i64 = cols[5].trim().parse().map_err(|_| CorpusError::Parse {
        line: lineno,
        reason: format!("label {:?} is not an integer", cols[5]),
    })?;
    let binary_label = match mode {
        LabelMode::Binary => match raw_label {
            0 | 1 => raw_label as u8,
            other => {
                return Err(CorpusError::Validation {
                    par_id: cols[0].to_string(),
                    reason: format!("binary label out of range: {other}"),
                });
            }
        },
        LabelMode::Scale => match raw_label {
            0..=4 => u8::from(raw_label >= 2),
            other => {
                return Err(CorpusError::Validation {
                    par_id: cols[0].to_string(),
                    reason: format!("scale label out of range 0–4: {other}"),
                });
            }
        },
    };
    Ok(Sample {
        par_id: cols[0].to_string(),
        art_id: cols[1].to_string(),
        keyword: cols[2].to_string(),
        country: cols[3].to_string(),
        text: cols[4].to_string(),
        binary_label,
        category_labels: [0; NUM_CATEGORIES],
    })
}

fn parse_category_row(cols: &[&str], lineno: usize) -> Result<(Sample, usize), CorpusError> {
    for (name, col) in [("span_start", cols[5]), ("span_end", cols[6])] {
        col.trim().parse::<u64>().map_err(|_| CorpusError::Parse {
            line: lineno,
            reason: format!("{name} {col:?} is not a non-negative integer"),
        })?;
    }
    cols[9]
        .trim()
        .parse::<u32>()
        .map_err(|_| CorpusError::Parse {
            line: lineno,
            reason: format!("annotators {:?} is not an integer", cols[9]),
        })?;
    let cat = category_index(cols[8]).ok_or_else(|| CorpusError::Parse {
        line: lineno,
        reason: format!("unknown category {:?}", cols[8]),
    })?;
    Ok((
        Sample {
            par_id: cols[0].to_string(),
            art_id: cols[1].to_string(),
            keyword: cols[3].to_string(),
            country: cols[4].to_string(),
            text: cols[2].to_string(),
            binary_label: 1,
            category_labels: [0; NUM_CATEGORIES],
        },
        cat,
    ))
}

/// Serializes samples to the 6-column paragraph layout.
pub fn corpus_to_tsv(samples: &[Sample]) -> Result<String, CorpusError> {
    let mut out = String::new();
    for s in samples {
        for (name, field) in [
            ("par_id", &s.par_id),
            ("art_id", &s.art_id),
            ("keyword", &s.keyword),
            ("country", &s.country),
            ("text", &s.text),
        ] {
            if field.contains('\t') || field.contains('\n') {
                return Err(CorpusError::Serialize {
                    par_id: s.par_id.clone(),
                    reason: format!("{name} contains a tab or newline"),
                });
            }
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.par_id, s.art_id, s.keyword, s.country, s.text, s.binary_label
        )
        .expect("string write");
    }
    Ok(out)
}

/// Writes samples as a paragraph-layout TSV file.
pub fn write_corpus(samples: &[Sample], path: &Path) -> Result<(), CorpusError> {
    let tsv = corpus_to_tsv(samples)?;
    std::fs::write(path, tsv).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Copies category bits from aggregated category samples onto matching
/// samples. Back-translated ids (`_bt` suffix) inherit their parent's
/// categories.
pub fn merge_category_labels(
    samples: &mut [Sample],
    categories: &[Sample],
) -> Result<(), CorpusError> {
    let by_id: BTreeMap<&str, &Sample> =
        categories.iter().map(|s| (s.par_id.as_str(), s)).collect();
    for sample in samples.iter_mut() {
        let lookup = sample
            .par_id
            .strip_suffix(AUGMENT_ID_SUFFIX)
            .unwrap_or(&sample.par_id);
        if let Some(cat) = by_id.get(lookup) {
            sample.category_labels = cat.category_labels;
            sample.validate()?;
        }
    }
    Ok(())
}

/// Disjoint train/validation id sets covering the loaded samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
}

impl SplitSpec {
    pub fn new(
        train_ids: BTreeSet<String>,
        val_ids: BTreeSet<String>,
    ) -> Result<Self, CorpusError> {
        let overlap: Vec<String> = train_ids.intersection(&val_ids).cloned().collect();
        if !overlap.is_empty() {
            return Err(CorpusError::OverlappingSplit { ids: overlap });
        }
        Ok(SplitSpec { train_ids, val_ids })
    }

    /// Reads the two one-id-per-line split files.
    pub fn from_files(train_path: &Path, val_path: &Path) -> Result<Self, CorpusError> {
        Self::new(read_id_file(train_path)?, read_id_file(val_path)?)
    }
}

fn read_id_file(path: &Path) -> Result<BTreeSet<String>, CorpusError> {
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Partitions samples into (train, val) preserving input order within each
/// part. Errors if the split references unknown ids or leaves samples
/// uncovered.
pub fn apply_split(
    samples: &[Sample],
    split: &SplitSpec,
) -> Result<(Vec<Sample>, Vec<Sample>), CorpusError> {
    let known: BTreeSet<&str> = samples.iter().map(|s| s.par_id.as_str()).collect();
    let missing: Vec<String> = split
        .train_ids
        .iter()
        .chain(split.val_ids.iter())
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(CorpusError::MissingSplitIds { ids: missing });
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut uncovered: Vec<&str> = Vec::new();
    for s in samples {
        if split.train_ids.contains(&s.par_id) {
            train.push(s.clone());
        } else if split.val_ids.contains(&s.par_id) {
            val.push(s.clone());
        } else {
            uncovered.push(&s.par_id);
        }
    }
    if let Some(first) = uncovered.first() {
        return Err(CorpusError::UncoveredSamples {
            count: uncovered.len(),
            first: first.to_string(),
        });
    }
    Ok((train, val))
}

/// Bin width of the sentences-per-sample histogram.
pub const SENTENCE_BIN_WIDTH: usize = 2;
/// Bin width of the words-per-sentence histogram.
pub const WORD_BIN_WIDTH: usize = 10;
/// Word-count threshold above which a positive sample counts as long.
pub const LONG_TEXT_WORDS: usize = 75;

/// Summary statistics over a sample collection. Histogram keys are the lower
/// edges of fixed-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub positives: usize,
    pub per_category_counts: [usize; NUM_CATEGORIES],
    pub sentence_count_histogram: BTreeMap<usize, usize>,
    pub words_per_sentence_histogram: BTreeMap<usize, usize>,
    pub long_positive_fraction: f64,
}

/// Splits text into sentences on terminal punctuation (`.`, `!`, `?`).
pub fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn compute_stats(samples: &[Sample]) -> CorpusStats {
    let mut stats = CorpusStats {
        total: samples.len(),
        positives: 0,
        per_category_counts: [0; NUM_CATEGORIES],
        sentence_count_histogram: BTreeMap::new(),
        words_per_sentence_histogram: BTreeMap::new(),
        long_positive_fraction: 0.0,
    };
    let mut long_positives = 0usize;
    for s in samples {
        if s.is_positive() {
            stats.positives += 1;
            if word_count(&s.text) > LONG_TEXT_WORDS {
                long_positives += 1;
            }
        }
        for (c, &bit) in s.category_labels.iter().enumerate() {
            stats.per_category_counts[c] += bit as usize;
        }
        let sentences = split_sentences(&s.text);
        let sbin = (sentences.len() / SENTENCE_BIN_WIDTH) * SENTENCE_BIN_WIDTH;
        *stats.sentence_count_histogram.entry(sbin).or_insert(0) += 1;
        for sentence in &sentences {
            let wbin = (word_count(sentence) / WORD_BIN_WIDTH) * WORD_BIN_WIDTH;
            *stats.words_per_sentence_histogram.entry(wbin).or_insert(0) += 1;
        }
    }
    if stats.positives > 0 {
        stats.long_positive_fraction = long_positives as f64 / stats.positives as f64;
    }
    stats
}

impl CorpusStats {
    /// Plain-text report with both histograms.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "total\t{}", self.total).unwrap();
        writeln!(out, "positives\t{}", self.positives).unwrap();
        writeln!(
            out,
            "long_positive_fraction\t{:.4}",
            self.long_positive_fraction
        )
        .unwrap();
        for (code, count) in CATEGORY_CODES.iter().zip(self.per_category_counts) {
            writeln!(out, "category\t{code}\t{count}").unwrap();
        }
        writeln!(
            out,
            "sentences-per-sample histogram (bin width {SENTENCE_BIN_WIDTH})"
        )
        .unwrap();
        for (edge, count) in &self.sentence_count_histogram {
            writeln!(out, "[{},{})\t{}", edge, edge + SENTENCE_BIN_WIDTH, count).unwrap();
        }
        writeln!(
            out,
            "words-per-sentence histogram (bin width {WORD_BIN_WIDTH})"
        )
        .unwrap();
        for (edge, count) in &self.words_per_sentence_histogram {
            writeln!(out, "[{},{})\t{}", edge, edge + WORD_BIN_WIDTH, count).unwrap();
        }
        out
    }
}
