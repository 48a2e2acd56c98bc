//! Pluggable model backends.
//!
//! Five capabilities are abstracted behind traits: text completion, layout
//! conditioned image generation, box-prompted mask proposals, crop/text
//! scoring and text embedding. Each has a deterministic in-process stub
//! ([`stub`]) and a JSON-over-HTTP client ([`http`]).
//!
//! Calls go through [`invoke`], which applies the retry policy and appends a
//! [`CallRecord`] to a caller-owned [`CallLog`]. Logs are per task so that
//! concurrent stages can concatenate them in a deterministic order.

pub mod http;
pub mod image;
pub mod stub;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, ConfidenceMap, Mask};
use crate::hashing::{checksum, combine, hash_str, unit_f64};
use crate::scene::Layout;

pub use image::{PaintedImage, PaintedImageStore, Patch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Llm,
    Layout2image,
    Maskgen,
    Scorer,
    Embed,
}

impl ProviderKind {
    pub const ALL: [ProviderKind; 5] = [
        ProviderKind::Llm,
        ProviderKind::Layout2image,
        ProviderKind::Maskgen,
        ProviderKind::Scorer,
        ProviderKind::Embed,
    ];

    /// Path segment under `/v1/`.
    pub fn route(self) -> &'static str {
        match self {
            ProviderKind::Llm => "llm",
            ProviderKind::Layout2image => "layout2image",
            ProviderKind::Maskgen => "maskgen",
            ProviderKind::Scorer => "score",
            ProviderKind::Embed => "embed",
        }
    }

    /// Environment variable that overrides the base URL.
    pub fn env_var(self) -> &'static str {
        match self {
            ProviderKind::Llm => "DREAMFORGE_LLM_URL",
            ProviderKind::Layout2image => "DREAMFORGE_LAYOUT2IMAGE_URL",
            ProviderKind::Maskgen => "DREAMFORGE_MASKGEN_URL",
            ProviderKind::Scorer => "DREAMFORGE_SCORER_URL",
            ProviderKind::Embed => "DREAMFORGE_EMBED_URL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub kind: ProviderKind,
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    3
}

impl ProviderEndpoint {
    pub fn new(kind: ProviderKind, base_url: impl Into<String>) -> Self {
        Self {
            kind,
            base_url: base_url.into(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("{:?} endpoint timeout must be > 0", self.kind));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("{:?} endpoint base_url must be http(s): {}", self.kind, self.base_url));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}/v1/{}", self.base_url.trim_end_matches('/'), self.kind.route())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    /// Timeouts, transport errors and 5xx/429 responses.
    #[error("retryable provider error: {0}")]
    Retryable(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("{kind:?} provider failed after {attempts} attempts: {last}")]
    Exhausted {
        kind: ProviderKind,
        attempts: u32,
        last: String,
    },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Retryable(_))
    }
}

/// Locator of a generated image plus its dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageHandle {
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

/// Visible pixels of one layout item in a generated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionStat {
    pub item: usize,
    pub visible_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub handle: ImageHandle,
    #[serde(default)]
    pub regions: Vec<RegionStat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub mask: Mask,
    pub confidence: ConfidenceMap,
    pub area: u64,
}

impl MaskCandidate {
    pub fn new(mask: Mask, confidence: ConfidenceMap) -> Self {
        let area = mask.area();
        Self { mask, confidence, area }
    }
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, ProviderError>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, layout: &Layout, seed: u64) -> Result<GeneratedImage, ProviderError>;
}

pub trait MaskGenerator: Send + Sync {
    /// Candidate masks for the object inside `bbox`, all clipped to it.
    fn propose(&self, image: &ImageHandle, bbox: &BBox) -> Result<Vec<MaskCandidate>, ProviderError>;
}

pub trait CropScorer: Send + Sync {
    /// Image-text similarity of the crop at `bbox` against `class_name`, in `[0, 1]`.
    fn score(&self, image: &ImageHandle, bbox: &BBox, class_name: &str) -> Result<f64, ProviderError>;
}

pub trait TextEmbedder: Send + Sync {
    /// Unit-norm embedding.
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Part-of-speech oracle for candidate names. `None` means "no opinion",
/// in which case the local stop-list decides.
pub trait NounTagger: Send + Sync {
    fn is_noun(&self, name: &str) -> Option<bool>;
}

/// A tagger with no opinion; leaves every decision to the stop-list.
pub struct NoTagger;

impl NounTagger for NoTagger {
    fn is_noun(&self, _name: &str) -> Option<bool> {
        None
    }
}

/// The full set of backends used by the pipeline.
#[derive(Clone)]
pub struct Providers {
    pub llm: Arc<dyn LanguageModel>,
    pub images: Arc<dyn ImageGenerator>,
    pub masks: Arc<dyn MaskGenerator>,
    pub scorer: Arc<dyn CropScorer>,
    pub embedder: Arc<dyn TextEmbedder>,
    pub tagger: Arc<dyn NounTagger>,
}

impl Providers {
    /// All-stub providers sharing one painted-image store.
    pub fn stub(seed: u64, store: Arc<PaintedImageStore>) -> Self {
        Self {
            llm: Arc::new(stub::StubLlm),
            images: Arc::new(stub::StubImageGenerator::new(store.clone())),
            masks: Arc::new(stub::StubMaskGenerator::new(store, seed)),
            scorer: Arc::new(stub::StubScorer::new(seed)),
            embedder: Arc::new(stub::StubEmbedder::new(seed, stub::STUB_EMBED_DIM)),
            tagger: Arc::new(stub::StubTagger),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: u32) -> Self {
        Self {
            retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Exponential backoff with full jitter, keyed by the request hash so
    /// replays sleep for the same durations.
    pub fn delay(&self, attempt: u32, request_key: u64) -> Duration {
        if self.base_delay_ms == 0 {
            return Duration::ZERO;
        }
        let cap = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        let jitter = unit_f64(combine(request_key, u64::from(attempt)));
        Duration::from_millis((cap as f64 * (0.5 + 0.5 * jitter)) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    Failed(String),
}

/// Persisted record of one logical provider call (possibly several attempts).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: ProviderKind,
    pub request_hash: String,
    pub attempts: u32,
    pub outcome: CallOutcome,
}

/// Wall-clock latency of a call. Kept apart from [`CallRecord`] because it
/// is not reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLatency {
    pub kind: ProviderKind,
    pub request_hash: String,
    pub latency_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CallLog {
    pub records: Vec<CallRecord>,
    pub latencies: Vec<CallLatency>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, other: CallLog) {
        self.records.extend(other.records);
        self.latencies.extend(other.latencies);
    }
}

/// Runs `call` under `policy`, recording the outcome in `log`.
pub fn invoke<T, R, F>(
    log: &mut CallLog,
    kind: ProviderKind,
    request: &R,
    policy: &RetryPolicy,
    mut call: F,
) -> Result<T, ProviderError>
where
    R: Serialize + ?Sized,
    F: FnMut() -> Result<T, ProviderError>,
{
    let request_hash = checksum(request);
    let key = hash_str(&request_hash);
    let started = Instant::now();
    let mut attempts = 0;
    let result = loop {
        attempts += 1;
        match call() {
            Ok(v) => break Ok(v),
            Err(e) if e.is_retryable() && attempts <= policy.retries => {
                log::debug!("{kind:?} attempt {attempts} failed: {e}; retrying");
                std::thread::sleep(policy.delay(attempts - 1, key));
            }
            Err(e) if e.is_retryable() => {
                break Err(ProviderError::Exhausted {
                    kind,
                    attempts,
                    last: e.to_string(),
                })
            }
            Err(e) => break Err(e),
        }
    };
    log.records.push(CallRecord {
        kind,
        request_hash: request_hash.clone(),
        attempts,
        outcome: match &result {
            Ok(_) => CallOutcome::Ok,
            Err(e) => CallOutcome::Failed(e.to_string()),
        },
    });
    log.latencies.push(CallLatency {
        kind,
        request_hash,
        latency_us: started.elapsed().as_micros() as u64,
    });
    result
}
