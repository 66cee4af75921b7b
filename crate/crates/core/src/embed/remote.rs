//! HTTP client for an external embedding service.
//!
//! Each batch is one `POST` of `{"texts": [...]}` answered by
//! `{"embeddings": [[f64; 384], ...]}`.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::cache::EmbeddingCache;
use super::EMBED_DIM;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Request<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct Response {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    batch_size: usize,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
    cache: Option<EmbeddingCache>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, batch_size: usize, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            batch_size: batch_size.max(1),
            retries: 3,
            backoff: Duration::from_millis(200),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Delay before the first retry; doubled on each further attempt.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.agent.post(&self.endpoint).send_json(Request { texts }) {
                Ok(resp) => {
                    let body: Response = resp
                        .into_json()
                        .map_err(|e| Error::Remote(format!("malformed response: {e}")))?;
                    return validate(body.embeddings, texts.len());
                }
                Err(ureq::Error::Status(code, _)) if code < 500 && code != 429 => {
                    return Err(Error::Remote(format!("HTTP status {code}")));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Remote(format!(
            "request failed after {} retries: {last}",
            self.retries
        )))
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut found: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for &t in texts {
            if found.contains_key(t) || missing.contains(&t) {
                continue;
            }
            match self.cache.as_ref().and_then(|c| c.get(t)) {
                Some(v) => {
                    found.insert(t, v);
                }
                None => missing.push(t),
            }
        }
        for chunk in missing.chunks(self.batch_size) {
            let vectors = self.post(chunk)?;
            for (&t, v) in chunk.iter().zip(vectors) {
                if let Some(c) = &self.cache {
                    c.put(t, &v)?;
                }
                found.insert(t, v);
            }
        }
        Ok(texts.iter().map(|t| found[t].clone()).collect())
    }
}

fn validate(vectors: Vec<Vec<f64>>, expected: usize) -> Result<Vec<Vec<f64>>> {
    if vectors.len() != expected {
        return Err(Error::Remote(format!(
            "expected {expected} embeddings, got {}",
            vectors.len()
        )));
    }
    for v in &vectors {
        if v.len() != EMBED_DIM {
            return Err(Error::Dimension {
                expected: EMBED_DIM,
                got: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Remote("non-finite embedding rejected".into()));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::Remote("zero-norm embedding rejected".into()));
        }
    }
    Ok(vectors)
}
