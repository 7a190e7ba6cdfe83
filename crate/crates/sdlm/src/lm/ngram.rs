//! Trainable add-k smoothed n-gram model.
//!
//! `P(w | ctx) = (count(ctx, w) + k) / (count(ctx) + k·|V|)`, backing off to
//! the longest seen shorter suffix when the (n−1)-gram context is unseen and
//! ending at the unigram distribution, so every context is scorable and every
//! token keeps strictly positive probability (k > 0).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, NextTokenDistribution, TokenSequence, Vocabulary};

#[derive(Debug, Clone)]
pub struct NGramModel {
    vocabulary: Vocabulary,
    order: usize,
    smoothing_k: f64,
    /// context (0..order-1 tokens) -> next token -> count
    counts: HashMap<Vec<String>, HashMap<String, u64>>,
    totals: HashMap<Vec<String>, u64>,
    context_limit: Option<usize>,
}

impl NGramModel {
    /// Trains on a corpus, recording counts for every context length from 0
    /// (unigram) up to order−1.
    pub fn train(corpus: &TokenSequence, order: usize, smoothing_k: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::input("empty training corpus"));
        }
        if order < 1 {
            return Err(Error::input("n-gram order must be at least 1"));
        }
        if corpus.len() < order {
            return Err(Error::input(format!(
                "corpus of {} tokens is shorter than order {order}",
                corpus.len()
            )));
        }
        if smoothing_k <= 0.0 || !smoothing_k.is_finite() {
            return Err(Error::input(format!(
                "smoothing_k must be positive, got {smoothing_k}"
            )));
        }
        let vocabulary = Vocabulary::from_unique(corpus.tokens().iter().cloned())?;
        let tokens = corpus.tokens();
        let mut counts: HashMap<Vec<String>, HashMap<String, u64>> = HashMap::new();
        let mut totals: HashMap<Vec<String>, u64> = HashMap::new();
        for i in 0..tokens.len() {
            for ctx_len in 0..order {
                if ctx_len > i {
                    break;
                }
                let context = tokens[i - ctx_len..i].to_vec();
                *counts
                    .entry(context.clone())
                    .or_default()
                    .entry(tokens[i].clone())
                    .or_insert(0) += 1;
                *totals.entry(context).or_insert(0) += 1;
            }
        }
        Ok(NGramModel {
            vocabulary,
            order,
            smoothing_k,
            counts,
            totals,
            context_limit: None,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    /// Saves the model as JSON with order, smoothing_k, vocab and sparse
    /// counts (context keys are space-joined, "" for the empty context).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let counts: BTreeMap<String, BTreeMap<String, u64>> = self
            .counts
            .iter()
            .map(|(ctx, per_token)| {
                (
                    ctx.join(" "),
                    per_token.iter().map(|(t, c)| (t.clone(), *c)).collect(),
                )
            })
            .collect();
        let file = NGramModelFile {
            order: self.order,
            smoothing_k: self.smoothing_k,
            vocab: self.vocabulary.tokens().to_vec(),
            counts,
        };
        let mut text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::validation(format!("serializing n-gram model: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: NGramModelFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            location: Some(format!("line {} column {}", e.line(), e.column())),
            message: e.to_string(),
        })?;
        if file.order < 1 {
            return Err(Error::validation("n-gram order must be at least 1"));
        }
        if file.smoothing_k <= 0.0 {
            return Err(Error::validation("smoothing_k must be positive"));
        }
        let vocabulary = Vocabulary::new(file.vocab)?;
        let mut counts: HashMap<Vec<String>, HashMap<String, u64>> = HashMap::new();
        let mut totals: HashMap<Vec<String>, u64> = HashMap::new();
        for (key, per_token) in file.counts {
            let context: Vec<String> = key.split_whitespace().map(str::to_string).collect();
            if context.len() >= file.order {
                return Err(Error::validation(format!(
                    "context {key:?} is longer than order {} allows",
                    file.order
                )));
            }
            let mut map = HashMap::with_capacity(per_token.len());
            let mut total = 0u64;
            for (token, count) in per_token {
                total += count;
                map.insert(token, count);
            }
            totals.insert(context.clone(), total);
            counts.insert(context, map);
        }
        if !totals.contains_key(&Vec::new()) {
            return Err(Error::validation(
                "n-gram model is missing unigram counts for the empty context",
            ));
        }
        Ok(NGramModel {
            vocabulary,
            order: file.order,
            smoothing_k: file.smoothing_k,
            counts,
            totals,
            context_limit: None,
        })
    }

    fn smoothed_row(&self, context: &[String]) -> NextTokenDistribution {
        let vocab_len = self.vocabulary.len() as f64;
        let per_token = self.counts.get(context);
        let total = self.totals.get(context).copied().unwrap_or(0) as f64;
        let denom = total + self.smoothing_k * vocab_len;
        let probs = self
            .vocabulary
            .tokens()
            .iter()
            .map(|tok| {
                let count = per_token
                    .and_then(|m| m.get(tok))
                    .copied()
                    .unwrap_or(0) as f64;
                (count + self.smoothing_k) / denom
            })
            .collect();
        // Smoothed add-k rows sum to 1 by construction.
        NextTokenDistribution::new(probs).expect("add-k row is a valid distribution")
    }
}

impl LanguageModel for NGramModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn next_token_distribution(&self, context: &TokenSequence) -> Result<NextTokenDistribution> {
        for token in context.tokens() {
            self.vocabulary.require_position(token)?;
        }
        let tokens = context.tokens();
        let longest = (self.order - 1).min(tokens.len());
        for len in (0..=longest).rev() {
            let suffix = &tokens[tokens.len() - len..];
            if self.totals.contains_key(suffix) {
                return Ok(self.smoothed_row(suffix));
            }
        }
        // The empty context always has counts after training.
        Ok(self.smoothed_row(&[]))
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct NGramModelFile {
    order: usize,
    smoothing_k: f64,
    vocab: Vec<String>,
    counts: BTreeMap<String, BTreeMap<String, u64>>,
}
