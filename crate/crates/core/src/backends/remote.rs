//! HTTP client for the model sidecar.
//!
//! Wire protocol (JSON over HTTP):
//!
//! - `GET /v1/vocab` returns `{"tokens": [..], "marker_ids": {..}, "eos_id": n}`
//! - `POST /v1/logits` with `{"context": .., "prefixes": [[..]..]}` returns
//!   `{"logprobs": [[..]..]}` in prefix order
//! - `POST /v1/nli` with `{"pairs": [{"premise": .., "hypothesis": ..}..]}`
//!   returns `{"logprobs": [{"entailment": .., "neutral": .., "contradiction": ..}..]}`
//!
//! 400 carries `{"error": ..}`; 503 means the model is still loading and is retried.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::table::check_normalized;
use crate::decoding::TokenScorer;
use crate::error::{Error, Result};
use crate::nli::{NliLogProbs, NliScorer};
use crate::vocab::{TokenId, Vocab};

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteScorerConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retries: u32,
}

impl RemoteScorerConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteScorerConfig {
            base_url: base_url.into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
            retries: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::invalid("remote timeout must be > 0"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::invalid("max in-flight requests must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabResponse {
    pub tokens: Vec<String>,
    pub marker_ids: BTreeMap<String, TokenId>,
    pub eos_id: TokenId,
}

impl VocabResponse {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        VocabResponse {
            tokens: vocab.tokens().to_vec(),
            marker_ids: vocab.marker_ids(),
            eos_id: vocab.eos_id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub context: String,
    pub prefixes: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logprobs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliRequest {
    pub pairs: Vec<NliPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliResponse {
    pub logprobs: Vec<NliLogProbs>,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

/// Shared HTTP transport with retries and an in-flight bound.
#[derive(Debug)]
pub struct RemoteClient {
    config: RemoteScorerConfig,
    http: reqwest::blocking::Client,
    gate: Gate,
}

enum Attempt {
    Retry(String),
    Fail(Error),
}

impl RemoteClient {
    pub fn new(config: RemoteScorerConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        Ok(RemoteClient {
            gate: Gate::new(config.max_in_flight),
            config,
            http,
        })
    }

    pub fn config(&self) -> &RemoteScorerConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn once(&self, path: &str, body: Option<&[u8]>) -> std::result::Result<String, Attempt> {
        let _permit = self.gate.acquire();
        let req = match body {
            Some(b) => self
                .http
                .post(self.url(path))
                .header("content-type", "application/json")
                .body(b.to_vec()),
            None => self.http.get(self.url(path)),
        };
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200 => Ok(text),
            503 => Err(Attempt::Retry(format!("{path}: model loading (503)"))),
            400 => {
                let message = serde_json::from_str::<ErrorBody>(&text)
                    .map(|b| b.error)
                    .unwrap_or_else(|_| "bad request".to_string());
                Err(Attempt::Fail(Error::Protocol {
                    message: format!("{path} rejected request: {message}"),
                    excerpt: excerpt(&text),
                }))
            }
            other => Err(Attempt::Fail(Error::Protocol {
                message: format!("{path} returned HTTP {other}"),
                excerpt: excerpt(&text),
            })),
        }
    }

    fn call<T: DeserializeOwned>(&self, path: &str, body: Option<&[u8]>) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
            match self.once(path, body) {
                Ok(text) => {
                    return serde_json::from_str(&text).map_err(|e| Error::Protocol {
                        message: format!("{path}: malformed response: {e}"),
                        excerpt: excerpt(&text),
                    })
                }
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{} after {} attempts: {last}",
            self.url(path),
            self.config.retries + 1
        )))
    }

    pub fn vocab(&self) -> Result<VocabResponse> {
        self.call("/v1/vocab", None)
    }

    pub fn logits(&self, request: &LogitsRequest) -> Result<LogitsResponse> {
        let body = serde_json::to_vec(request)?;
        self.call("/v1/logits", Some(&body))
    }

    pub fn nli(&self, request: &NliRequest) -> Result<NliResponse> {
        let body = serde_json::to_vec(request)?;
        self.call("/v1/nli", Some(&body))
    }
}

/// Token scorer backed by the sidecar's `/v1/logits` endpoint.
#[derive(Debug)]
pub struct RemoteScorer {
    client: RemoteClient,
    vocab: Vocab,
}

impl RemoteScorer {
    /// Connects and fetches the vocabulary.
    pub fn connect(config: RemoteScorerConfig) -> Result<Self> {
        let client = RemoteClient::new(config)?;
        let v = client.vocab()?;
        let vocab = Vocab::new(v.tokens, v.eos_id).map_err(|e| Error::Protocol {
            message: format!("invalid vocabulary: {e}"),
            excerpt: String::new(),
        })?;
        Ok(RemoteScorer { client, vocab })
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }
}

impl TokenScorer for RemoteScorer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_token_logprobs_batch(context, &[prefix])?.remove(0))
    }

    fn next_token_logprobs_batch(
        &self,
        context: &str,
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<Vec<f64>>> {
        let request = LogitsRequest {
            context: context.to_string(),
            prefixes: prefixes.iter().map(|p| p.to_vec()).collect(),
        };
        let response = self.client.logits(&request)?;
        let protocol = |message: String| Error::Protocol {
            message,
            excerpt: String::new(),
        };
        if response.logprobs.len() != prefixes.len() {
            return Err(protocol(format!(
                "/v1/logits returned {} vectors for {} prefixes",
                response.logprobs.len(),
                prefixes.len()
            )));
        }
        for v in &response.logprobs {
            if v.len() != self.vocab.len() {
                return Err(protocol(format!(
                    "/v1/logits vector has length {} but the vocabulary has {}",
                    v.len(),
                    self.vocab.len()
                )));
            }
            check_normalized(v).map_err(|e| protocol(format!("/v1/logits: {e}")))?;
        }
        Ok(response.logprobs)
    }
}

/// NLI scorer backed by the sidecar's `/v1/nli` endpoint.
#[derive(Debug)]
pub struct RemoteNli {
    client: RemoteClient,
}

impl RemoteNli {
    pub fn new(config: RemoteScorerConfig) -> Result<Self> {
        Ok(RemoteNli {
            client: RemoteClient::new(config)?,
        })
    }
}

impl NliScorer for RemoteNli {
    fn nli_logprobs(&self, premise: &str, hypothesis: &str) -> Result<NliLogProbs> {
        Ok(self.nli_logprobs_batch(&[(premise, hypothesis)])?.remove(0))
    }

    fn nli_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliLogProbs>> {
        if pairs
            .iter()
            .any(|(p, h)| p.trim().is_empty() || h.trim().is_empty())
        {
            return Err(Error::invalid("premise and hypothesis must be non-empty"));
        }
        let request = NliRequest {
            pairs: pairs
                .iter()
                .map(|(p, h)| NliPair {
                    premise: p.to_string(),
                    hypothesis: h.to_string(),
                })
                .collect(),
        };
        let response = self.client.nli(&request)?;
        if response.logprobs.len() != pairs.len() {
            return Err(Error::Protocol {
                message: format!(
                    "/v1/nli returned {} results for {} pairs",
                    response.logprobs.len(),
                    pairs.len()
                ),
                excerpt: String::new(),
            });
        }
        for lp in &response.logprobs {
            check_normalized(&[lp.entailment, lp.neutral, lp.contradiction]).map_err(|e| {
                Error::Protocol {
                    message: format!("/v1/nli: {e}"),
                    excerpt: String::new(),
                }
            })?;
        }
        Ok(response.logprobs)
    }
}
