//! JSON-over-HTTP clients.
//!
//! Policy, native form: `POST {"image_b64", "prompt", "n", "temperature"}`
//! answered by `{"completions": [..]}`. The chat form talks to servers that
//! expose an OpenAI-style chat-completions route.
//!
//! Segmenter: `POST {"image_b64", "box", "points", "point_labels"}` answered
//! by `{"mask": {"width", "height", "counts"}}`.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, BackendsConfig, ImageView, InFlightGate, PolicyBackend, Result, RetryConfig, SegmenterBackend,
};
use crate::geometry::{BBox, Point};
use crate::mask::MaskRle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyApi {
    #[default]
    Native,
    ChatCompletions,
}

struct Transport {
    client: Client,
    url: String,
    token: Option<String>,
    retry: RetryConfig,
    gate: InFlightGate,
}

impl Transport {
    fn new(url: &str, cfg: &BackendsConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            client,
            url: url.to_string(),
            token: cfg.bearer_token.clone(),
            retry: cfg.retry.clone(),
            gate: InFlightGate::new(cfg.max_in_flight),
        })
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let _permit = self.gate.acquire();
        self.retry.run(|| {
            let mut req = self.client.post(&self.url).json(body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = req.send().map_err(transport_error)?;
            let status = resp.status();
            let text = resp.text().map_err(transport_error)?;
            if !status.is_success() {
                return Err(BackendError::Status(status.as_u16(), truncate(&text, 200)));
            }
            serde_json::from_str(&text).map_err(|e| BackendError::MalformedBody(e.to_string()))
        })
    }
}

fn transport_error(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Connection(e.to_string())
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

pub struct HttpPolicy {
    transport: Transport,
    api: PolicyApi,
    model: String,
    max_tokens: u32,
}

impl HttpPolicy {
    pub fn new(cfg: &BackendsConfig) -> Result<Self> {
        let url = cfg.policy_url.as_deref().ok_or_else(|| BackendError::Config("policy endpoint not set".into()))?;
        Ok(Self {
            transport: Transport::new(url, cfg)?,
            api: cfg.api,
            model: cfg.model.clone(),
            max_tokens: cfg.max_tokens,
        })
    }

    fn request_body(&self, image_b64: String, prompt: &str, n: usize, temperature: f64) -> Value {
        match self.api {
            PolicyApi::Native => json!({
                "image_b64": image_b64,
                "prompt": prompt,
                "n": n,
                "temperature": temperature,
            }),
            PolicyApi::ChatCompletions => json!({
                "model": self.model,
                "n": n,
                "temperature": temperature,
                "max_tokens": self.max_tokens,
                "messages": [{
                    "role": "user",
                    "content": [
                        {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{image_b64}")}},
                        {"type": "text", "text": prompt},
                    ],
                }],
            }),
        }
    }

    fn completions(&self, body: &Value) -> Result<Vec<String>> {
        let bad = |m: &str| BackendError::MalformedBody(m.to_string());
        let as_text = |v: &Value| v.as_str().map(str::to_owned).ok_or_else(|| bad("completion is not a string"));
        match self.api {
            PolicyApi::Native => body
                .get("completions")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing `completions` array"))?
                .iter()
                .map(as_text)
                .collect(),
            PolicyApi::ChatCompletions => body
                .get("choices")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing `choices` array"))?
                .iter()
                .map(|c| as_text(c.pointer("/message/content").unwrap_or(&Value::Null)))
                .collect(),
        }
    }
}

impl PolicyBackend for HttpPolicy {
    fn complete(&self, image: &ImageView, prompt: &str, n: usize, temperature: f64) -> Result<Vec<String>> {
        let body = self.request_body(image.png_base64()?, prompt, n, temperature);
        let out = self.completions(&self.transport.post(&body)?)?;
        if out.len() != n {
            return Err(BackendError::MalformedBody(format!("asked for {n} completions, got {}", out.len())));
        }
        Ok(out)
    }
}

pub struct HttpSegmenter {
    transport: Transport,
}

impl HttpSegmenter {
    pub fn new(cfg: &BackendsConfig) -> Result<Self> {
        let url = cfg.seg_url.as_deref().ok_or_else(|| BackendError::Config("segmenter endpoint not set".into()))?;
        Ok(Self { transport: Transport::new(url, cfg)? })
    }
}

impl SegmenterBackend for HttpSegmenter {
    fn segment(&self, image: &ImageView, bbox: &BBox, points: (&Point, &Point)) -> Result<MaskRle> {
        let body = json!({
            "image_b64": image.png_base64()?,
            "box": bbox.to_array(),
            "points": [points.0.to_array(), points.1.to_array()],
            "point_labels": [1, 1],
        });
        let resp = self.transport.post(&body)?;
        let mask = resp.get("mask").ok_or_else(|| BackendError::MalformedMask("missing `mask`".into()))?;
        let mask: MaskRle =
            serde_json::from_value(mask.clone()).map_err(|e| BackendError::MalformedMask(e.to_string()))?;
        let f = image.frame();
        if (mask.width(), mask.height()) != (f.width(), f.height()) {
            return Err(BackendError::MalformedMask(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                f.width(),
                f.height()
            )));
        }
        Ok(mask)
    }
}
