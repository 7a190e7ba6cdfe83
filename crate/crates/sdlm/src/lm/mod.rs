//! Language-model contract and the domain types every algorithm manipulates.
//!
//! A [`LanguageModel`] turns a context (token sequence) into a probability
//! distribution over the next token. Three implementations are provided:
//! an explicit conditional [`TableModel`] (deterministic test oracle), a
//! trainable add-k smoothed [`NGramModel`], and a [`RemoteLm`] client for a
//! model server speaking the wire protocol documented in `remote`.

mod ngram;
mod remote;
mod table;

pub use ngram::NGramModel;
pub use remote::RemoteLm;
pub use table::{TableModel, TableModelBuilder};

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// An ordered set of distinct token strings with a position index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    end_token: Option<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from distinct tokens. Duplicates are rejected;
    /// at least two tokens are required.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::validation(format!(
                    "duplicate token {tok:?} in vocabulary"
                )));
            }
        }
        if tokens.len() < 2 {
            return Err(Error::validation(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        Ok(Vocabulary {
            tokens,
            index,
            end_token: None,
        })
    }

    /// Builds a vocabulary from a token stream, keeping the first occurrence
    /// of each token in order.
    pub fn from_unique<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashMap::new();
        let mut unique = Vec::new();
        for tok in tokens {
            let tok = tok.into();
            if seen.insert(tok.clone(), ()).is_none() {
                unique.push(tok);
            }
        }
        Vocabulary::new(unique)
    }

    /// Declares one token as an end-of-sequence marker. Generation stops a
    /// hypothesis that emits it; reference models have no end semantics
    /// unless this is set.
    pub fn with_end_token(mut self, token: &str) -> Result<Self> {
        let pos = self.require_position(token)?;
        self.end_token = Some(pos);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, position: usize) -> &str {
        &self.tokens[position]
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Position of `token`, or [`Error::UnknownToken`].
    pub fn require_position(&self, token: &str) -> Result<usize> {
        self.position(token).ok_or_else(|| Error::UnknownToken {
            token: token.to_string(),
        })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn end_token(&self) -> Option<usize> {
        self.end_token
    }
}

/// A whitespace-tokenized context: the input `x` and the scored prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TokenSequence {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    /// Splits on any whitespace. The reference models in this crate are
    /// word-token based; subword tokenization belongs to remote servers.
    pub fn from_text(text: &str) -> Self {
        TokenSequence::new(text.split_whitespace())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: impl Into<String>) {
        self.tokens.push(token.into());
    }

    /// Space-joined text form.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// The sequence truncated from the left to at most `limit` tokens.
    pub fn tail(&self, limit: usize) -> TokenSequence {
        let start = self.tokens.len().saturating_sub(limit);
        TokenSequence {
            tokens: self.tokens[start..].to_vec(),
        }
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.text())
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSequence::new(iter)
    }
}

/// A probability vector aligned with a [`Vocabulary`]'s token order.
///
/// Entries are in [0, 1] and sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct NextTokenDistribution {
    probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validates entries and the sum-to-one invariant.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("empty probability vector"));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::validation(format!(
                    "probability out of range at index {i}: {p}"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "probabilities sum to {sum}, expected 1 within {}",
                Self::SUM_TOLERANCE
            )));
        }
        Ok(NextTokenDistribution { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::validation("empty weight vector"));
        }
        for (i, &w) in weights.iter().enumerate() {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::validation(format!(
                    "negative or non-finite weight at index {i}: {w}"
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateModel(
                "weights sum to zero, cannot normalize".into(),
            ));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        NextTokenDistribution::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, position: usize) -> f64 {
        self.probs[position]
    }

    /// Index of the most probable token; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// The abstract contract: context in, next-token distribution out.
///
/// Models are immutable after construction and safe to score concurrently
/// from multiple threads.
pub trait LanguageModel: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Distribution over the next token given `context`.
    fn next_token_distribution(&self, context: &TokenSequence) -> Result<NextTokenDistribution>;

    /// Maximum context length the model accepts, if any.
    fn context_limit(&self) -> Option<usize> {
        None
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_token_distribution(&self, context: &TokenSequence) -> Result<NextTokenDistribution> {
        (**self).next_token_distribution(context)
    }

    fn context_limit(&self) -> Option<usize> {
        (**self).context_limit()
    }
}

impl LanguageModel for Box<dyn LanguageModel> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_token_distribution(&self, context: &TokenSequence) -> Result<NextTokenDistribution> {
        (**self).next_token_distribution(context)
    }

    fn context_limit(&self) -> Option<usize> {
        (**self).context_limit()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_rejects_duplicates() {
        let err = Vocabulary::new(["a", "b", "a"]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn vocabulary_requires_two_tokens() {
        assert!(Vocabulary::new(["only"]).is_err());
        assert!(Vocabulary::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn from_unique_keeps_first_occurrence_order() {
        let v = Vocabulary::from_unique(["b", "a", "b", "c", "a"]).unwrap();
        assert_eq!(v.tokens(), ["b", "a", "c"]);
        assert_eq!(v.position("c"), Some(2));
    }

    #[test]
    fn distribution_validates_sum() {
        let err = NextTokenDistribution::new(vec![0.5, 0.4]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(NextTokenDistribution::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn distribution_validates_range() {
        assert!(NextTokenDistribution::new(vec![1.2, -0.2]).is_err());
        assert!(NextTokenDistribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn from_weights_normalizes() {
        let d = NextTokenDistribution::from_weights(vec![2.0, 2.0]).unwrap();
        assert_eq!(d.probs(), [0.5, 0.5]);
        assert!(matches!(
            NextTokenDistribution::from_weights(vec![0.0, 0.0]).unwrap_err(),
            Error::DegenerateModel(_)
        ));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let d = NextTokenDistribution::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(d.argmax(), 0);
        let d = NextTokenDistribution::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn token_sequence_from_text_splits_on_any_whitespace() {
        let s = TokenSequence::from_text("a  b\nc\t d");
        assert_eq!(s.tokens(), ["a", "b", "c", "d"]);
        assert!(TokenSequence::from_text("").is_empty());
    }

    #[test]
    fn tail_truncates_from_the_left() {
        let s = TokenSequence::new(["a", "b", "c"]);
        assert_eq!(s.tail(2).tokens(), ["b", "c"]);
        assert_eq!(s.tail(9).tokens(), ["a", "b", "c"]);
    }
}
