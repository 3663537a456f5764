//! HTTP client for the scoring service.
//!
//! Wire protocol: `POST /v1/score` with
//! `{"metric": str, "items": [{"src", "mt", "ref": str|null}]}`, answered by
//! `{"scores": [number]}` or, on a non-2xx status, `{"error": str}`.
//! Requests carry at most [`BATCH_LIMIT`] items; larger inputs are split and
//! the partitions are sent concurrently.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RemoteError, Result};
use crate::par;
use crate::scoring::{ScoreItem, Scorer, BATCH_LIMIT};
use crate::textmetrics::MetricId;

/// Environment variable naming the scoring service base URL.
pub const ENDPOINT_ENV: &str = "MTPREF_SCORER_URL";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub metric: String,
    pub reference_based: bool,
    pub timeout: Duration,
    /// Retries after the first attempt, transport failures only.
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, metric: impl Into<String>, reference_based: bool) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            metric: metric.into(),
            reference_based,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    metric: &'a str,
    items: &'a [ScoreItem],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

#[derive(Deserialize)]
struct ErrorResponse {
    error: String,
}

pub struct RemoteScorer {
    config: RemoteConfig,
    url: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Self {
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/v1/score") {
            base.to_string()
        } else {
            format!("{base}/v1/score")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteScorer { config, url, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post_once(&self, body: &str, batch: usize, n_items: usize) -> std::result::Result<Vec<f64>, Attempt> {
        let response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body);
        let mut response = match response {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Timeout),
            Err(e) => return Err(Attempt::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Timeout),
            Err(e) => return Err(Attempt::Transport(format!("reading body: {e}"))),
        };
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<ErrorResponse>(&text)
                .map(|e| e.error)
                .unwrap_or(text);
            return Err(Attempt::Fatal(RemoteError::Status { batch, status, message }));
        }
        let parsed: ScoreResponse = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(RemoteError::Malformed {
                batch,
                detail: e.to_string(),
            })
        })?;
        if parsed.scores.len() != n_items {
            return Err(Attempt::Fatal(RemoteError::Malformed {
                batch,
                detail: format!("{} scores for {} items", parsed.scores.len(), n_items),
            }));
        }
        if let Some(bad) = parsed.scores.iter().find(|s| !s.is_finite()) {
            return Err(Attempt::Fatal(RemoteError::Malformed {
                batch,
                detail: format!("non-finite score {bad}"),
            }));
        }
        Ok(parsed.scores)
    }

    /// Sends one partition, retrying transport failures with exponential
    /// backoff. Error responses and malformed bodies are not retried.
    fn post_batch(&self, batch: usize, items: &[ScoreItem]) -> Result<Vec<f64>, RemoteError> {
        let body = serde_json::to_string(&ScoreRequest {
            metric: &self.config.metric,
            items,
        })
        .expect("score request serializes");
        let attempts = self.config.max_retries + 1;
        let mut delay = self.config.backoff;
        let mut last = Attempt::Transport(String::new());
        for attempt in 1..=attempts {
            match self.post_once(&body, batch, items.len()) {
                Ok(scores) => return Ok(scores),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(other) => {
                    log::debug!("scoring batch {batch} attempt {attempt} failed: {other:?}");
                    last = other;
                }
            }
            if attempt < attempts {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
        }
        Err(match last {
            Attempt::Timeout => RemoteError::Timeout { batch, attempts },
            Attempt::Transport(detail) => RemoteError::Transport {
                batch,
                attempts,
                detail,
            },
            Attempt::Fatal(e) => e,
        })
    }
}

#[derive(Debug)]
enum Attempt {
    Timeout,
    Transport(String),
    Fatal(RemoteError),
}

impl Scorer for RemoteScorer {
    fn metric_id(&self) -> MetricId {
        MetricId::Remote {
            name: self.config.metric.as_str().into(),
            reference_based: self.config.reference_based,
        }
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        remote_score_batch(self, items)
    }
}

/// Splits `items` into partitions of at most [`BATCH_LIMIT`], scores them
/// concurrently and concatenates the results in request order.
pub fn remote_score_batch(client: &RemoteScorer, items: &[ScoreItem]) -> Result<Vec<f64>> {
    let parts = par::map_chunks(items, BATCH_LIMIT, |start, chunk| {
        client.post_batch(start / BATCH_LIMIT, chunk).map_err(Error::from)
    });
    Ok(par::collect_ordered(parts)?.concat())
}

/// Number of requests needed for `n` items.
pub fn request_count(n: usize) -> usize {
    n.div_ceil(BATCH_LIMIT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_joining() {
        let a = RemoteScorer::new(RemoteConfig::new("http://h:1/", "m", true));
        assert_eq!(a.url, "http://h:1/v1/score");
        let b = RemoteScorer::new(RemoteConfig::new("http://h:1/v1/score", "m", true));
        assert_eq!(b.url, "http://h:1/v1/score");
    }

    #[test]
    fn request_counts() {
        assert_eq!(request_count(1), 1);
        assert_eq!(request_count(256), 1);
        assert_eq!(request_count(257), 2);
        assert_eq!(request_count(600), 3);
    }

    #[test]
    fn wire_format() {
        let items = [ScoreItem::qe("a", "b"), ScoreItem::with_ref("a", "b", "c")];
        let body = serde_json::to_string(&ScoreRequest { metric: "m", items: &items }).unwrap();
        assert_eq!(
            body,
            r#"{"metric":"m","items":[{"src":"a","mt":"b","ref":null},{"src":"a","mt":"b","ref":"c"}]}"#
        );
    }
}
