//! Explicit conditional-table model: a deterministic oracle for tests and
//! desk-scale experiments.
//!
//! Rows map exact token-sequence contexts to next-token distributions; the
//! longest matching suffix of the query context wins, and a required default
//! row covers everything else, so every context is scorable.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, NextTokenDistribution, TokenSequence, Vocabulary};

/// Row-sum tolerance accepted by the file format before exact renormalization.
const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TableModel {
    vocabulary: Vocabulary,
    default_row: NextTokenDistribution,
    rows: HashMap<Vec<String>, NextTokenDistribution>,
    max_key_len: usize,
    context_limit: Option<usize>,
}

impl TableModel {
    pub fn builder(vocabulary: Vocabulary) -> TableModelBuilder {
        TableModelBuilder {
            vocabulary,
            default_row: None,
            rows: Vec::new(),
            context_limit: None,
        }
    }

    /// Loads the JSON table-model format:
    /// `{"vocab": [...], "default": [...], "rows": {"tok1 tok2": [...]}}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: TableModelFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            location: Some(format!("line {} column {}", e.line(), e.column())),
            message: e.to_string(),
        })?;
        Self::from_file_repr(file)
    }

    /// Companion save operation; `save` then [`TableModel::load`] round-trips,
    /// and re-saving a loaded file reproduces it byte-identically (keys are
    /// written in sorted order).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let repr = self.to_file_repr();
        let mut text = serde_json::to_string_pretty(&repr)
            .map_err(|e| Error::validation(format!("serializing table model: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn from_file_repr(file: TableModelFile) -> Result<Self> {
        let vocabulary = Vocabulary::new(file.vocab)?;
        let default = file.default.ok_or_else(|| {
            Error::validation("table model is missing the required default row")
        })?;
        let mut builder = Self::builder(vocabulary);
        builder = builder.default_row(default);
        for (key, probs) in file.rows {
            let context: Vec<String> = key.split_whitespace().map(str::to_string).collect();
            builder = builder.row(context, probs);
        }
        builder.build()
    }

    fn to_file_repr(&self) -> TableModelFile {
        let rows: BTreeMap<String, Vec<f64>> = self
            .rows
            .iter()
            .map(|(k, v)| (k.join(" "), v.probs().to_vec()))
            .collect();
        TableModelFile {
            vocab: self.vocabulary.tokens().to_vec(),
            default: Some(self.default_row.probs().to_vec()),
            rows,
        }
    }

    pub fn rows_len(&self) -> usize {
        self.rows.len()
    }

    /// The row the model would use for `context`: the longest suffix with an
    /// exact-match row, falling back to the default row.
    fn lookup(&self, context: &[String]) -> &NextTokenDistribution {
        let longest = context.len().min(self.max_key_len);
        for len in (1..=longest).rev() {
            if let Some(row) = self.rows.get(&context[context.len() - len..]) {
                return row;
            }
        }
        &self.default_row
    }
}

impl LanguageModel for TableModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn next_token_distribution(&self, context: &TokenSequence) -> Result<NextTokenDistribution> {
        for token in context.tokens() {
            self.vocabulary.require_position(token)?;
        }
        Ok(self.lookup(context.tokens()).clone())
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }
}

pub struct TableModelBuilder {
    vocabulary: Vocabulary,
    default_row: Option<Vec<f64>>,
    rows: Vec<(Vec<String>, Vec<f64>)>,
    context_limit: Option<usize>,
}

impl TableModelBuilder {
    pub fn default_row(mut self, probs: impl Into<Vec<f64>>) -> Self {
        self.default_row = Some(probs.into());
        self
    }

    pub fn row<I, S>(mut self, context: I, probs: impl Into<Vec<f64>>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rows.push((
            context.into_iter().map(Into::into).collect(),
            probs.into(),
        ));
        self
    }

    pub fn context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    pub fn build(self) -> Result<TableModel> {
        let vocab_len = self.vocabulary.len();
        let default_probs = self
            .default_row
            .ok_or_else(|| Error::validation("table model is missing the required default row"))?;
        let default_row = validate_row("default", &default_probs, vocab_len)?;
        let mut rows = HashMap::with_capacity(self.rows.len());
        let mut max_key_len = 0;
        for (context, probs) in self.rows {
            let key = context.join(" ");
            let row = validate_row(&key, &probs, vocab_len)?;
            max_key_len = max_key_len.max(context.len());
            if rows.insert(context, row).is_some() {
                return Err(Error::validation(format!("duplicate row for context {key:?}")));
            }
        }
        Ok(TableModel {
            vocabulary: self.vocabulary,
            default_row,
            rows,
            max_key_len,
            context_limit: self.context_limit,
        })
    }
}

fn validate_row(key: &str, probs: &[f64], vocab_len: usize) -> Result<NextTokenDistribution> {
    if probs.len() != vocab_len {
        return Err(Error::validation(format!(
            "row {key:?} has {} entries, vocabulary has {vocab_len}",
            probs.len()
        )));
    }
    for (i, &p) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::validation(format!(
                "row {key:?} has probability out of range at index {i}: {p}"
            )));
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::validation(format!(
            "row {key:?} sums to {sum}, expected 1 within {ROW_SUM_TOLERANCE}"
        )));
    }
    if (sum - 1.0).abs() <= NextTokenDistribution::SUM_TOLERANCE {
        // Keep hand-given probabilities bit-exact.
        NextTokenDistribution::new(probs.to_vec())
    } else {
        NextTokenDistribution::from_weights(probs.to_vec())
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TableModelFile {
    vocab: Vec<String>,
    default: Option<Vec<f64>>,
    #[serde(default)]
    rows: BTreeMap<String, Vec<f64>>,
}
