//! Blocking JSON-over-HTTP client with bounded retries, and an order-preserving
//! bounded-parallel map used for batch calls.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
            timeout_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff: base · 2^attempt, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    client: Client,
    url: String,
    token: Option<String>,
    policy: RetryPolicy,
}

impl JsonClient {
    pub fn new(url: impl Into<String>, token: Option<String>, policy: RetryPolicy) -> Result<Self, String> {
        let client = Client::builder()
            .timeout(Duration::from_millis(policy.timeout_ms))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(JsonClient {
            client,
            url: url.into(),
            token,
            policy,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body` and decodes the response. Transport errors, 429 and 5xx are
    /// retried; other statuses and undecodable bodies fail immediately.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, String> {
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&self.url).json(body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status == StatusCode::OK {
                        let bytes = resp.bytes().map_err(|e| format!("reading body: {e}"))?;
                        return serde_json::from_slice(&bytes).map_err(|e| format!("malformed response: {e}"));
                    }
                    let msg = format!("HTTP {status}");
                    if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                        msg
                    } else {
                        return Err(msg);
                    }
                }
                Err(e) => format!("transport: {e}"),
            };
            if attempt >= self.policy.max_retries {
                return Err(format!("{retryable} (after {} attempts)", attempt + 1));
            }
            thread::sleep(self.policy.delay(attempt));
            attempt += 1;
        }
    }
}

/// Applies `f` to every item with at most `parallelism` calls in flight and
/// returns results in input order.
pub fn ordered_parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
