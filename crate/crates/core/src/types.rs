//! Domain types shared across the pipeline, plus validation of ingested
//! multiple-choice records.
//!
//! The on-disk dataset format is JSONL, one object per line:
//!
//! ```json
//! {"id": "q0001", "question": "...", "options": {"A": "...", "B": "..."},
//!  "answer": "AC", "subset": "KD", "lang": "zh"}
//! ```
//!
//! `answer` is the concatenation of the golden labels. `subset` and `lang`
//! are optional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest option label accepted. Covers four- and five-option exam datasets
/// with slack.
pub const MAX_LABEL: char = 'H';

/// Smallest and largest admissible option counts.
pub const OPTION_COUNT_RANGE: (usize, usize) = (2, 8);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("missing or empty field `{0}`")]
    MissingField(&'static str),
    #[error("duplicate option label `{0}`")]
    DuplicateLabel(char),
    #[error("golden label `{0}` is not among the option labels")]
    GoldenNotInOptions(char),
    #[error("invalid option label `{0}` (expected a single letter A-{MAX_LABEL})")]
    InvalidLabel(String),
    #[error("option labels must be contiguous from 'A', got {0:?}")]
    NonContiguousLabels(Vec<char>),
    #[error("{count} options given, expected between 2 and 8")]
    OptionCount { count: usize },
    #[error("knowledge text is empty after trimming")]
    EmptyKnowledge,
    #[error("prompt has no entries")]
    EmptyPrompt,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("embedding has {data} values, expected {n_tokens} x {hidden_dim}")]
    EmbeddingShape {
        data: usize,
        n_tokens: usize,
        hidden_dim: usize,
    },
}

/// Normalizes a raw label string ("a", "A") to an uppercase label char.
fn normalize_label(raw: &str) -> Result<char, ValidationError> {
    let mut chars = raw.trim().chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Err(ValidationError::InvalidLabel(raw.to_string()));
    };
    let c = c.to_ascii_uppercase();
    if c.is_ascii_uppercase() && c <= MAX_LABEL {
        Ok(c)
    } else {
        Err(ValidationError::InvalidLabel(raw.to_string()))
    }
}

/// Splits an answer string such as "AC", "A,C" or "a c" into labels.
fn parse_answer_labels(answer: &str) -> Result<BTreeSet<char>, ValidationError> {
    let mut labels = BTreeSet::new();
    for c in answer.chars() {
        if c.is_whitespace() || matches!(c, ',' | ';' | '，' | '、' | '/') {
            continue;
        }
        labels.insert(normalize_label(&c.to_string())?);
    }
    if labels.is_empty() {
        return Err(ValidationError::MissingField("answer"));
    }
    Ok(labels)
}

/// Wire-format record as it appears in dataset JSONL files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMcqRecord {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<String, String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
}

/// A validated multiple-choice question.
///
/// Invariants, enforced by the constructor (there is no other way to build
/// one): option labels are unique, contiguous from 'A' and between 2 and 8;
/// golden labels are a non-empty subset of the option labels. Multiple golden
/// labels are allowed; exams with a single correct answer simply carry a
/// one-element set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMcqRecord", into = "RawMcqRecord")]
pub struct McqExample {
    id: String,
    question_text: String,
    options: Vec<(char, String)>,
    golden_labels: BTreeSet<char>,
    subset_tag: Option<String>,
    language_tag: String,
}

impl McqExample {
    pub fn new(
        id: impl Into<String>,
        question_text: impl Into<String>,
        options: Vec<(char, String)>,
        golden_labels: BTreeSet<char>,
        subset_tag: Option<String>,
        language_tag: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let id = id.into();
        let question_text = question_text.into();
        if id.trim().is_empty() {
            return Err(ValidationError::MissingField("id"));
        }
        if question_text.trim().is_empty() {
            return Err(ValidationError::MissingField("question"));
        }
        if options.is_empty() {
            return Err(ValidationError::MissingField("options"));
        }
        let count = options.len();
        if count < OPTION_COUNT_RANGE.0 || count > OPTION_COUNT_RANGE.1 {
            return Err(ValidationError::OptionCount { count });
        }

        let mut normalized = Vec::with_capacity(options.len());
        let mut seen = BTreeSet::new();
        for (label, text) in options {
            let label = normalize_label(&label.to_string())?;
            if !seen.insert(label) {
                return Err(ValidationError::DuplicateLabel(label));
            }
            normalized.push((label, text));
        }
        normalized.sort_by_key(|(label, _)| *label);

        let contiguous = normalized
            .iter()
            .enumerate()
            .all(|(i, (label, _))| *label as u32 == 'A' as u32 + i as u32);
        if !contiguous {
            return Err(ValidationError::NonContiguousLabels(
                normalized.iter().map(|(l, _)| *l).collect(),
            ));
        }

        if golden_labels.is_empty() {
            return Err(ValidationError::MissingField("answer"));
        }
        for label in &golden_labels {
            if !seen.contains(label) {
                return Err(ValidationError::GoldenNotInOptions(*label));
            }
        }

        Ok(Self {
            id,
            question_text,
            options: normalized,
            golden_labels,
            subset_tag,
            language_tag: language_tag.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question_text(&self) -> &str {
        &self.question_text
    }

    /// Option `(label, text)` pairs in label order.
    pub fn options(&self) -> &[(char, String)] {
        &self.options
    }

    /// Labels present on this question, in order from 'A'.
    pub fn labels(&self) -> BTreeSet<char> {
        self.options.iter().map(|(l, _)| *l).collect()
    }

    pub fn golden_labels(&self) -> &BTreeSet<char> {
        &self.golden_labels
    }

    /// Golden labels concatenated, e.g. "AC".
    pub fn golden_string(&self) -> String {
        self.golden_labels.iter().collect()
    }

    pub fn subset_tag(&self) -> Option<&str> {
        self.subset_tag.as_deref()
    }

    pub fn language_tag(&self) -> &str {
        &self.language_tag
    }
}

impl TryFrom<RawMcqRecord> for McqExample {
    type Error = ValidationError;

    fn try_from(raw: RawMcqRecord) -> Result<Self, ValidationError> {
        let mut options = Vec::with_capacity(raw.options.len());
        let mut seen = BTreeSet::new();
        for (label, text) in raw.options {
            let label = normalize_label(&label)?;
            if !seen.insert(label) {
                return Err(ValidationError::DuplicateLabel(label));
            }
            options.push((label, text));
        }
        let golden = parse_answer_labels(&raw.answer)?;
        McqExample::new(
            raw.id,
            raw.question,
            options,
            golden,
            raw.subset,
            raw.lang.unwrap_or_default(),
        )
    }
}

impl From<McqExample> for RawMcqRecord {
    fn from(ex: McqExample) -> Self {
        RawMcqRecord {
            id: ex.id,
            question: ex.question_text,
            options: ex
                .options
                .into_iter()
                .map(|(l, t)| (l.to_string(), t))
                .collect(),
            answer: ex.golden_labels.iter().collect(),
            subset: ex.subset_tag,
            lang: if ex.language_tag.is_empty() {
                None
            } else {
                Some(ex.language_tag)
            },
        }
    }
}

/// The low-dimensional vector searched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LowDimPrompt {
    values: Vec<f64>,
}

impl LowDimPrompt {
    pub fn new(values: Vec<f64>) -> Result<Self, ValidationError> {
        if values.is_empty() {
            return Err(ValidationError::EmptyPrompt);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ValidationError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl TryFrom<Vec<f64>> for LowDimPrompt {
    type Error = ValidationError;
    fn try_from(values: Vec<f64>) -> Result<Self, ValidationError> {
        LowDimPrompt::new(values)
    }
}

impl From<LowDimPrompt> for Vec<f64> {
    fn from(p: LowDimPrompt) -> Vec<f64> {
        p.values
    }
}

impl fmt::Display for LowDimPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        write!(f, "]")
    }
}

/// Shape of the soft-token embedding block consumed by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingShape {
    pub n_tokens: usize,
    pub hidden_dim: usize,
}

impl EmbeddingShape {
    pub fn new(n_tokens: usize, hidden_dim: usize) -> Self {
        Self {
            n_tokens,
            hidden_dim,
        }
    }

    /// Flattened length `n_tokens * hidden_dim`.
    pub fn total(&self) -> usize {
        self.n_tokens * self.hidden_dim
    }
}

/// Soft-token embeddings: `n_tokens` vectors of `hidden_dim` reals, stored
/// flat in token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftEmbedding {
    data: Vec<f64>,
    n_tokens: usize,
    hidden_dim: usize,
}

impl SoftEmbedding {
    pub fn new(data: Vec<f64>, shape: EmbeddingShape) -> Result<Self, ValidationError> {
        if data.len() != shape.total() || shape.total() == 0 {
            return Err(ValidationError::EmbeddingShape {
                data: data.len(),
                n_tokens: shape.n_tokens,
                hidden_dim: shape.hidden_dim,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ValidationError::NonFinite(i));
        }
        Ok(Self {
            data,
            n_tokens: shape.n_tokens,
            hidden_dim: shape.hidden_dim,
        })
    }

    pub fn shape(&self) -> EmbeddingShape {
        EmbeddingShape::new(self.n_tokens, self.hidden_dim)
    }

    /// The flattened length-D view.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// The `i`-th soft token as a `hidden_dim` slice.
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }
}

/// One generated piece of knowledge, with its filtering verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub example_id: String,
    knowledge_text: String,
    pub generator_id: String,
    /// `None` until the consistency check ran (or while it keeps failing).
    pub consistency_verdict: Option<bool>,
    pub created_at: DateTime<Utc>,
}

impl KnowledgeRecord {
    pub fn new(
        example_id: impl Into<String>,
        knowledge_text: impl Into<String>,
        generator_id: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let knowledge_text = knowledge_text.into();
        if knowledge_text.trim().is_empty() {
            return Err(ValidationError::EmptyKnowledge);
        }
        Ok(Self {
            example_id: example_id.into(),
            knowledge_text,
            generator_id: generator_id.into(),
            consistency_verdict: None,
            created_at: Utc::now(),
        })
    }

    pub fn knowledge_text(&self) -> &str {
        &self.knowledge_text
    }

    pub fn with_verdict(mut self, verdict: bool) -> Self {
        self.consistency_verdict = Some(verdict);
        self
    }
}

/// Per-example scoring result. Built by [`crate::eval::score_example`], which
/// guarantees `correct` agrees with the exact-match rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub example_id: String,
    pub predicted_labels: BTreeSet<char>,
    pub correct: bool,
    pub raw_completion: String,
    /// Endpoint failure that forced the example to score as incorrect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn options(n: usize) -> Vec<(char, String)> {
        (0..n)
            .map(|i| {
                let label = (b'A' + i as u8) as char;
                (label, format!("option {label}"))
            })
            .collect()
    }

    fn golden(s: &str) -> BTreeSet<char> {
        s.chars().collect()
    }

    #[test]
    fn multi_answer_parses() {
        let raw = RawMcqRecord {
            id: "q1".into(),
            question: "q?".into(),
            options: options(4)
                .into_iter()
                .map(|(l, t)| (l.to_string(), t))
                .collect(),
            answer: "AC".into(),
            subset: None,
            lang: None,
        };
        let ex = McqExample::try_from(raw).unwrap();
        assert_eq!(ex.golden_labels(), &golden("AC"));
        assert_eq!(ex.golden_string(), "AC");
    }

    #[test]
    fn golden_outside_options_rejected() {
        let err = McqExample::new("q1", "q?", options(4), golden("E"), None, "").unwrap_err();
        assert_eq!(err, ValidationError::GoldenNotInOptions('E'));
    }

    #[test]
    fn five_options_single_answer() {
        let ex = McqExample::new("q1", "q?", options(5), golden("E"), None, "zh").unwrap();
        assert_eq!(ex.golden_labels().len(), 1);
        assert_eq!(ex.options().len(), 5);
    }

    #[test]
    fn lowercase_labels_normalized() {
        let raw = RawMcqRecord {
            id: "q1".into(),
            question: "q?".into(),
            options: [("a", "x"), ("b", "y")]
                .into_iter()
                .map(|(l, t)| (l.to_string(), t.to_string()))
                .collect(),
            answer: "b".into(),
            subset: None,
            lang: None,
        };
        let ex = McqExample::try_from(raw).unwrap();
        assert_eq!(ex.labels(), golden("AB"));
        assert_eq!(ex.golden_labels(), &golden("B"));
    }

    #[test]
    fn duplicate_after_normalization_rejected() {
        let opts = vec![('A', "x".into()), ('a', "y".into())];
        let err = McqExample::new("q1", "q?", opts, golden("A"), None, "").unwrap_err();
        assert_eq!(err, ValidationError::DuplicateLabel('A'));
    }

    #[test]
    fn non_contiguous_rejected() {
        let opts = vec![('A', "x".into()), ('C', "y".into())];
        let err = McqExample::new("q1", "q?", opts, golden("A"), None, "").unwrap_err();
        assert!(matches!(err, ValidationError::NonContiguousLabels(_)));
    }

    #[test]
    fn option_count_bounds() {
        let err = McqExample::new("q1", "q?", options(1), golden("A"), None, "").unwrap_err();
        assert_eq!(err, ValidationError::OptionCount { count: 1 });
        let err = McqExample::new("q1", "q?", options(9), golden("A"), None, "").unwrap_err();
        assert_eq!(err, ValidationError::OptionCount { count: 9 });
        assert!(McqExample::new("q1", "q?", options(8), golden("A"), None, "").is_ok());
    }

    #[test]
    fn answer_with_separators() {
        assert_eq!(parse_answer_labels("A, c").unwrap(), golden("AC"));
        assert_eq!(parse_answer_labels("B、D").unwrap(), golden("BD"));
    }

    #[test]
    fn serde_round_trip() {
        let ex = McqExample::new("q1", "题目", options(4), golden("AC"), Some("KD".into()), "zh")
            .unwrap();
        let json = serde_json::to_string(&ex).unwrap();
        let back: McqExample = serde_json::from_str(&json).unwrap();
        assert_eq!(ex, back);
    }

    #[test]
    fn prompt_rejects_non_finite() {
        assert_eq!(
            LowDimPrompt::new(vec![0.0, f64::NAN]).unwrap_err(),
            ValidationError::NonFinite(1)
        );
        assert!(LowDimPrompt::new(vec![]).is_err());
    }

    #[test]
    fn embedding_shape_checked() {
        let shape = EmbeddingShape::new(2, 3);
        assert!(SoftEmbedding::new(vec![0.0; 6], shape).is_ok());
        assert!(SoftEmbedding::new(vec![0.0; 5], shape).is_err());
        let e = SoftEmbedding::new((0..6).map(|i| i as f64).collect(), shape).unwrap();
        assert_eq!(e.token(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn knowledge_requires_text() {
        assert_eq!(
            KnowledgeRecord::new("q1", "  \n", "gen").unwrap_err(),
            ValidationError::EmptyKnowledge
        );
        let rec = KnowledgeRecord::new("q1", "fact", "gen").unwrap();
        assert_eq!(rec.consistency_verdict, None);
        assert_eq!(rec.with_verdict(true).consistency_verdict, Some(true));
    }
}
