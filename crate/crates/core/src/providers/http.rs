//! JSON-over-HTTP provider client.
//!
//! One endpoint per capability, `POST {base_url}/v1/{route}`:
//!
//! | route          | request                             | response                                              |
//! |----------------|-------------------------------------|-------------------------------------------------------|
//! | `llm`          | `{prompt, seed}`                    | `{text}`                                              |
//! | `layout2image` | `{layout, seed}`                    | `{image_uri, regions?}`                               |
//! | `maskgen`      | `{image_uri, bbox}`                 | `{candidates: [{runs, width, height, confidence_uri}]}` |
//! | `score`        | `{image_uri, bbox, class_name}`     | `{score}`                                             |
//! | `embed`        | `{text}`                            | `{vector}`                                            |
//!
//! Images travel by URI only. A `confidence_uri` is either a
//! `data:application/octet-stream;base64,...` URI or an http(s) URL; both
//! carry the box-resolution confidences as little-endian f32.
//!
//! Every request carries an `Idempotency-Key` header with the SHA-256 of its
//! body. The client performs a single attempt; retries live in
//! [`super::invoke`].

use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    CropScorer, GeneratedImage, ImageGenerator, ImageHandle, LanguageModel, MaskCandidate, MaskGenerator,
    ProviderEndpoint, ProviderError, ProviderKind, RegionStat, TextEmbedder,
};
use crate::dataset::{BBox, ConfidenceMap, Mask};
use crate::hashing::{canonical_json, sha256_hex};
use crate::scene::Layout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout2ImageRequest {
    pub layout: Layout,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout2ImageResponse {
    pub image_uri: String,
    #[serde(default)]
    pub regions: Vec<RegionStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskgenRequest {
    pub image_uri: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub runs: Vec<u32>,
    pub width: u32,
    pub height: u32,
    pub confidence_uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskgenResponse {
    pub candidates: Vec<WireCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image_uri: String,
    pub bbox: BBox,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

const DATA_URI_PREFIX: &str = "data:application/octet-stream;base64,";

/// Encodes confidences as a data URI accepted by [`HttpProvider`].
pub fn confidence_data_uri(map: &ConfidenceMap) -> String {
    format!(
        "{DATA_URI_PREFIX}{}",
        base64::engine::general_purpose::STANDARD.encode(map.to_le_bytes())
    )
}

/// Client for one provider endpoint.
pub struct HttpProvider {
    endpoint: ProviderEndpoint,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint: ProviderEndpoint) -> Result<Self, String> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { endpoint, agent })
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    fn expect_kind(&self, kind: ProviderKind) -> Result<(), ProviderError> {
        if self.endpoint.kind != kind {
            return Err(ProviderError::Rejected(format!(
                "endpoint configured for {:?} used as {kind:?}",
                self.endpoint.kind
            )));
        }
        Ok(())
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, kind: ProviderKind, body: &Req) -> Result<Resp, ProviderError> {
        self.expect_kind(kind)?;
        let bytes = canonical_json(body);
        let response = self
            .agent
            .post(&self.endpoint.url())
            .header("Content-Type", "application/json")
            .header("Idempotency-Key", sha256_hex(&bytes))
            .send(&bytes[..])
            .map_err(transport_error)?;
        let status = response.status().as_u16();
        let mut body = response.into_body();
        if status == 429 || status >= 500 {
            return Err(ProviderError::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = body.read_to_string().unwrap_or_default();
            return Err(ProviderError::Rejected(format!("HTTP {status}: {detail}")));
        }
        body.read_json::<Resp>().map_err(|e| match e {
            ureq::Error::Json(e) => ProviderError::InvalidResponse(e.to_string()),
            other => transport_error(other),
        })
    }

    fn fetch_confidence(&self, uri: &str, bbox: &BBox) -> Result<ConfidenceMap, ProviderError> {
        let bytes = if let Some(data) = uri.strip_prefix(DATA_URI_PREFIX) {
            base64::engine::general_purpose::STANDARD
                .decode(data.as_bytes())
                .map_err(|e| ProviderError::InvalidResponse(format!("confidence data uri: {e}")))?
        } else if uri.starts_with("http://") || uri.starts_with("https://") {
            let response = self.agent.get(uri).call().map_err(transport_error)?;
            let status = response.status().as_u16();
            if status == 429 || status >= 500 {
                return Err(ProviderError::Retryable(format!("HTTP {status} fetching {uri}")));
            }
            if status >= 400 {
                return Err(ProviderError::Rejected(format!("HTTP {status} fetching {uri}")));
            }
            response.into_body().read_to_vec().map_err(transport_error)?
        } else {
            return Err(ProviderError::InvalidResponse(format!("unsupported confidence uri {uri}")));
        };
        ConfidenceMap::from_le_bytes(bbox.w, bbox.h, &bytes).map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }
}

fn transport_error(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::Timeout(_)
        | ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled => ProviderError::Retryable(e.to_string()),
        ureq::Error::StatusCode(s) if s == 429 || s >= 500 => ProviderError::Retryable(e.to_string()),
        ureq::Error::Json(e) => ProviderError::InvalidResponse(e.to_string()),
        other => ProviderError::Rejected(other.to_string()),
    }
}

impl LanguageModel for HttpProvider {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, ProviderError> {
        let r: LlmResponse = self.post(
            ProviderKind::Llm,
            &LlmRequest {
                prompt: prompt.to_string(),
                seed,
            },
        )?;
        Ok(r.text)
    }
}

impl ImageGenerator for HttpProvider {
    fn generate(&self, layout: &Layout, seed: u64) -> Result<GeneratedImage, ProviderError> {
        let r: Layout2ImageResponse = self.post(
            ProviderKind::Layout2image,
            &Layout2ImageRequest {
                layout: layout.clone(),
                seed,
            },
        )?;
        if r.image_uri.is_empty() {
            return Err(ProviderError::InvalidResponse("empty image_uri".into()));
        }
        Ok(GeneratedImage {
            handle: ImageHandle {
                uri: r.image_uri,
                width: layout.canvas.width,
                height: layout.canvas.height,
            },
            regions: r.regions,
        })
    }
}

impl MaskGenerator for HttpProvider {
    fn propose(&self, image: &ImageHandle, bbox: &BBox) -> Result<Vec<MaskCandidate>, ProviderError> {
        let r: MaskgenResponse = self.post(
            ProviderKind::Maskgen,
            &MaskgenRequest {
                image_uri: image.uri.clone(),
                bbox: *bbox,
            },
        )?;
        r.candidates
            .into_iter()
            .map(|c| {
                if c.width != image.width || c.height != image.height {
                    return Err(ProviderError::InvalidResponse(format!(
                        "candidate is {}x{}, image is {}x{}",
                        c.width, c.height, image.width, image.height
                    )));
                }
                let mask = Mask::new(c.width, c.height, c.runs).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
                if !mask.within(bbox) {
                    return Err(ProviderError::InvalidResponse("candidate mask extends outside the box".into()));
                }
                let confidence = self.fetch_confidence(&c.confidence_uri, bbox)?;
                Ok(MaskCandidate::new(mask, confidence))
            })
            .collect()
    }
}

impl CropScorer for HttpProvider {
    fn score(&self, image: &ImageHandle, bbox: &BBox, class_name: &str) -> Result<f64, ProviderError> {
        let r: ScoreResponse = self.post(
            ProviderKind::Scorer,
            &ScoreRequest {
                image_uri: image.uri.clone(),
                bbox: *bbox,
                class_name: class_name.to_string(),
            },
        )?;
        if !r.score.is_finite() {
            return Err(ProviderError::InvalidResponse(format!("non-finite score {}", r.score)));
        }
        Ok(r.score.clamp(0.0, 1.0))
    }
}

impl TextEmbedder for HttpProvider {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let r: EmbedResponse = self.post(ProviderKind::Embed, &EmbedRequest { text: text.to_string() })?;
        let norm = r.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(ProviderError::InvalidResponse("embedding has zero or non-finite norm".into()));
        }
        Ok(r.vector.into_iter().map(|x| x / norm).collect())
    }
}
