//! HTTP client for a remote model server.
//!
//! Wire protocol:
//! - `GET {endpoint}/v1/vocab` -> `{"tokens": [...]}`, fetched once per
//!   session to pin the vocabulary.
//! - `POST {endpoint}/v1/next_token_logprobs` with `{"context": [...]}` ->
//!   `{"vocab_size": N, "logprobs": [N reals]}`.
//!
//! The server returns full-vocabulary log-prob vectors, not top-k, because
//! the debiasing arithmetic needs aligned full supports. That is a known
//! scalability limitation of the protocol.

use std::time::Duration;

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, NextTokenDistribution, TokenSequence, Vocabulary};

/// Tolerated deviation of the reconstructed probability sum from 1 before
/// the reply is rejected. Within it, the vector is renormalized.
pub const REMOTE_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct RemoteLm {
    endpoint: String,
    vocabulary: Vocabulary,
    agent: ureq::Agent,
    context_limit: Option<usize>,
}

impl RemoteLm {
    /// Connects to `endpoint` and fetches the session vocabulary.
    pub fn connect(endpoint: &str) -> Result<Self> {
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        let url = format!("{endpoint}/v1/vocab");
        let mut response = agent
            .get(&url)
            .call()
            .map_err(|e| Error::transport(format!("GET {url}: {e}")))?;
        let status = response.status();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::transport(format!("reading reply from {url}: {e}")))?;
        if !status.is_success() {
            return Err(Error::Transport {
                message: format!("GET {url} returned status {status}"),
                raw: Some(body),
                retry_after: None,
            });
        }
        let reply: VocabReply = serde_json::from_str(&body).map_err(|e| Error::Transport {
            message: format!("malformed vocabulary reply: {e}"),
            raw: Some(body.clone()),
            retry_after: None,
        })?;
        let vocabulary = Vocabulary::new(reply.tokens)?;
        Ok(RemoteLm {
            endpoint,
            vocabulary,
            agent,
            context_limit: None,
        })
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl LanguageModel for RemoteLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn next_token_distribution(&self, context: &TokenSequence) -> Result<NextTokenDistribution> {
        let url = format!("{}/v1/next_token_logprobs", self.endpoint);
        let request = LogprobsRequest {
            context: context.tokens().to_vec(),
        };
        let mut response = self
            .agent
            .post(&url)
            .send_json(&request)
            .map_err(|e| Error::transport(format!("POST {url}: {e}")))?;
        let status = response.status();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::transport(format!("reading reply from {url}: {e}")))?;
        if !status.is_success() {
            return Err(Error::Transport {
                message: format!("POST {url} returned status {status}"),
                raw: Some(body),
                retry_after: None,
            });
        }
        let reply: LogprobsReply = serde_json::from_str(&body).map_err(|e| Error::Transport {
            message: format!("malformed logprobs reply: {e}"),
            raw: Some(body.clone()),
            retry_after: None,
        })?;
        distribution_from_logprobs(reply.vocab_size, &reply.logprobs, self.vocabulary.len())
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }
}

/// Reconstructs a distribution from log-probabilities, checking the declared
/// size against the session vocabulary and renormalizing small deviations.
pub fn distribution_from_logprobs(
    declared_size: usize,
    logprobs: &[f64],
    session_vocab_size: usize,
) -> Result<NextTokenDistribution> {
    if declared_size != session_vocab_size {
        return Err(Error::validation(format!(
            "vocabulary-size mismatch: server declared {declared_size}, session vocabulary has {session_vocab_size}"
        )));
    }
    if logprobs.len() != declared_size {
        return Err(Error::validation(format!(
            "vocabulary-size mismatch: reply carries {} logprobs, declared {declared_size}",
            logprobs.len()
        )));
    }
    let mut probs = Vec::with_capacity(logprobs.len());
    for (i, &lp) in logprobs.iter().enumerate() {
        let p = lp.exp();
        if !p.is_finite() {
            return Err(Error::validation(format!(
                "logprob at index {i} ({lp}) does not exponentiate to a finite probability"
            )));
        }
        probs.push(p);
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > REMOTE_SUM_TOLERANCE {
        return Err(Error::validation(format!(
            "reconstructed probabilities sum to {sum}, deviation exceeds {REMOTE_SUM_TOLERANCE}"
        )));
    }
    NextTokenDistribution::from_weights(probs)
}

#[derive(serde::Serialize)]
struct LogprobsRequest {
    context: Vec<String>,
}

#[derive(serde::Deserialize)]
struct LogprobsReply {
    vocab_size: usize,
    logprobs: Vec<f64>,
}

#[derive(serde::Deserialize)]
struct VocabReply {
    tokens: Vec<String>,
}
