//! Attribute scorers: a moderation-API-style remote client with retry and
//! rate-limit handling, and a deterministic lexicon double for tests and
//! desk-scale runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

/// Scores a text for each requested attribute, returning probabilities in
/// [0, 1]. Implementations are safe to call from multiple threads.
pub trait AttributeScorer: Send + Sync {
    fn score(&self, text: &str, attributes: &[String]) -> Result<BTreeMap<String, f64>>;
}

/// Word-list scorer: `score = 1 - 2^(-m)` where `m` counts case-insensitive
/// whole-token matches of the attribute's word set in the text.
///
/// The score is bounded, monotone in the match count and crosses the 0.5
/// exhibit threshold at exactly one match. This is a test double; word lists
/// are no substitute for a real attribute model.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    wordlists: BTreeMap<String, BTreeSet<String>>,
}

impl LexiconScorer {
    pub fn new<I, S, W>(wordlists: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, W)>,
        S: Into<String>,
        W: IntoIterator,
        W::Item: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (attribute, words) in wordlists {
            let attribute = attribute.into();
            let words: BTreeSet<String> = words
                .into_iter()
                .map(|w| w.into().to_lowercase())
                .collect();
            if words.is_empty() {
                return Err(Error::config(format!(
                    "lexicon for attribute {attribute:?} is empty"
                )));
            }
            map.insert(attribute, words);
        }
        Ok(LexiconScorer { wordlists: map })
    }

    /// Loads `{"attribute": ["word", ...], ...}`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.display().to_string(),
                location: Some(format!("line {} column {}", e.line(), e.column())),
                message: e.to_string(),
            })?;
        LexiconScorer::new(raw)
    }

    fn matches(&self, words: &BTreeSet<String>, text: &str) -> u32 {
        text.split_whitespace()
            .filter(|token| words.contains(&token.to_lowercase()))
            .count() as u32
    }
}

impl AttributeScorer for LexiconScorer {
    fn score(&self, text: &str, attributes: &[String]) -> Result<BTreeMap<String, f64>> {
        let mut scores = BTreeMap::new();
        for attribute in attributes {
            let words = self.wordlists.get(attribute).ok_or_else(|| {
                Error::config(format!("no lexicon configured for attribute {attribute:?}"))
            })?;
            let m = self.matches(words, text);
            scores.insert(attribute.clone(), 1.0 - 0.5f64.powi(m as i32));
        }
        Ok(scores)
    }
}

/// Client for the remote scorer protocol:
/// `POST {endpoint}/v1/score` with `{"text": ..., "attributes": [...]}` ->
/// `{"scores": {attr: real}}`.
///
/// Transient failures (transport errors, 429, 5xx) are retried with
/// exponential backoff up to 5 attempts, honoring `Retry-After`. A thin
/// configuration mapping connects this protocol to Perspective-style
/// endpoints; nothing here is baked to one vendor.
pub struct RemoteScorer {
    endpoint: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    max_attempts: u32,
    backoff_base: Duration,
    in_flight: Option<Semaphore>,
}

impl RemoteScorer {
    pub fn new(endpoint: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        RemoteScorer {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            api_key: None,
            max_attempts: 5,
            backoff_base: Duration::from_millis(100),
            in_flight: None,
        }
    }

    /// Bearer credential sent with every request. The value is never logged
    /// or echoed into reports.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    /// Caps concurrent in-flight requests.
    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = Some(Semaphore::new(limit.max(1)));
        self
    }

    fn attempt(&self, text: &str, attributes: &[String]) -> AttemptOutcome {
        let url = format!("{}/v1/score", self.endpoint);
        let request = ScoreRequest {
            text: text.to_string(),
            attributes: attributes.to_vec(),
        };
        let mut builder = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = match builder.send_json(&request) {
            Ok(r) => r,
            Err(e) => {
                return AttemptOutcome::Retry {
                    message: format!("POST {url}: {e}"),
                    retry_after: None,
                }
            }
        };
        let status = response.status();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok());
        let body = match response.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => {
                return AttemptOutcome::Retry {
                    message: format!("reading reply from {url}: {e}"),
                    retry_after,
                }
            }
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return AttemptOutcome::Retry {
                message: format!("POST {url} returned status {status}"),
                retry_after,
            };
        }
        if !status.is_success() {
            return AttemptOutcome::Fail(Error::Transport {
                message: format!("POST {url} returned status {status}"),
                raw: Some(body),
                retry_after,
            });
        }
        match serde_json::from_str::<ScoreReply>(&body) {
            Ok(reply) => AttemptOutcome::Done(reply.scores),
            Err(e) => AttemptOutcome::Fail(Error::Transport {
                message: format!("malformed scorer reply: {e}"),
                raw: Some(body),
                retry_after: None,
            }),
        }
    }
}

enum AttemptOutcome {
    Done(BTreeMap<String, f64>),
    Retry {
        message: String,
        retry_after: Option<u64>,
    },
    Fail(Error),
}

impl AttributeScorer for RemoteScorer {
    fn score(&self, text: &str, attributes: &[String]) -> Result<BTreeMap<String, f64>> {
        let _permit = self.in_flight.as_ref().map(Semaphore::acquire);
        let mut last_message = String::new();
        let mut last_retry_after = None;
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                let wait = match last_retry_after {
                    Some(seconds) => Duration::from_secs(seconds),
                    None => self.backoff_base * 2u32.pow(attempt - 1),
                };
                std::thread::sleep(wait);
            }
            match self.attempt(text, attributes) {
                AttemptOutcome::Done(scores) => {
                    for attribute in attributes {
                        if !scores.contains_key(attribute) {
                            return Err(Error::Transport {
                                message: format!(
                                    "scorer reply is missing attribute {attribute:?}"
                                ),
                                raw: None,
                                retry_after: None,
                            });
                        }
                    }
                    return Ok(scores);
                }
                AttemptOutcome::Retry {
                    message,
                    retry_after,
                } => {
                    last_message = message;
                    last_retry_after = retry_after;
                }
                AttemptOutcome::Fail(e) => return Err(e),
            }
        }
        Err(Error::Transport {
            message: format!(
                "giving up after {} attempts: {last_message}",
                self.max_attempts
            ),
            raw: None,
            retry_after: last_retry_after,
        })
    }
}

#[derive(serde::Serialize)]
struct ScoreRequest {
    text: String,
    attributes: Vec<String>,
}

#[derive(serde::Deserialize)]
struct ScoreReply {
    scores: BTreeMap<String, f64>,
}

/// Counting semaphore over Mutex + Condvar; std has no blocking semaphore.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.available.notify_one();
    }
}
