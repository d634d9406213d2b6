//! Model services behind two small traits, with HTTP clients and
//! deterministic scripted stand-ins.

mod http;
mod image;
mod scripted;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::http::{HttpPolicy, HttpSegmenter, PolicyApi};
pub use self::image::{ImageSource, ImageView, ViewKind};
pub use self::scripted::{
    BoxRasterizeSegmenter, OracleGse, OracleLpr, OracleSegmenter, OracleTruth, RuleFn, ScriptedPolicy,
};

use crate::geometry::{BBox, Point};
use crate::mask::MaskRle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("server answered {0}: {1}")]
    Status(u16, String),
    #[error("malformed response body: {0}")]
    MalformedBody(String),
    #[error("malformed mask: {0}")]
    MalformedMask(String),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("image unavailable: {0}")]
    Image(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("no scripted completion for {0}")]
    NoScript(String),
}

impl BackendError {
    /// Transport-level failures worth another attempt.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Connection(_) => true,
            BackendError::Status(code, _) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// A policy model: image plus prompt in, `n` raw completions out.
pub trait PolicyBackend: Send + Sync {
    fn complete(&self, image: &ImageView, prompt: &str, n: usize, temperature: f64) -> Result<Vec<String>>;
}

/// A promptable segmenter: box and two foreground points in, mask out.
/// Geometry is given in the frame of `image`.
pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, image: &ImageView, bbox: &BBox, points: (&Point, &Point)) -> Result<MaskRle>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub attempts: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self { attempts: 3, backoff_ms: 200, max_backoff_ms: 5_000 }
    }
}

impl RetryConfig {
    /// Runs `f` until it succeeds, fails with a non-retryable error or the
    /// attempts run out. Backoff doubles after each failure.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let attempts = self.attempts.max(1);
        let mut delay = self.backoff_ms;
        let mut last = None;
        for i in 0..attempts {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() => {
                    log::debug!("attempt {} failed: {e}", i + 1);
                    last = Some(e);
                    if i + 1 < attempts && delay > 0 {
                        std::thread::sleep(std::time::Duration::from_millis(delay));
                        delay = (delay * 2).min(self.max_backoff_ms);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Unavailable { attempts, last: last.map(|e| e.to_string()).unwrap_or_default() })
    }
}

/// Caps the number of concurrent requests a client has in flight.
#[derive(Debug)]
pub struct InFlightGate {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct GatePermit<'a>(&'a InFlightGate);

impl InFlightGate {
    pub fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Connection settings for the HTTP clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub policy_url: Option<String>,
    pub seg_url: Option<String>,
    pub api: PolicyApi,
    /// Model name sent to chat-completions servers.
    pub model: String,
    pub bearer_token: Option<String>,
    pub timeout_ms: u64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub retry: RetryConfig,
    /// Mock LPR only answers accurately when the target keeps this margin
    /// from the crop edges.
    pub mock_lpr_margin: f64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            policy_url: None,
            seg_url: None,
            api: PolicyApi::Native,
            model: "policy".into(),
            bearer_token: None,
            timeout_ms: 120_000,
            max_tokens: 1024,
            max_in_flight: 8,
            retry: RetryConfig::default(),
            mock_lpr_margin: 0.0,
        }
    }
}

pub const POLICY_URL_ENV: &str = "ZOOMSEG_POLICY_URL";
pub const SEG_URL_ENV: &str = "ZOOMSEG_SEG_URL";
pub const TOKEN_ENV: &str = "ZOOMSEG_API_TOKEN";

impl BackendsConfig {
    /// Fills unset URLs and token from the environment.
    pub fn with_env(mut self) -> Self {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        self.policy_url = self.policy_url.or_else(|| get(POLICY_URL_ENV));
        self.seg_url = self.seg_url.or_else(|| get(SEG_URL_ENV));
        self.bearer_token = self.bearer_token.or_else(|| get(TOKEN_ENV));
        self
    }
}
