//! HTTP client for the optional model gateway.
//!
//! Routes (all `POST`, JSON bodies):
//!
//! | route          | request                           | response                                   |
//! |----------------|-----------------------------------|--------------------------------------------|
//! | `/v1/handshake`| `{}`                              | `{d, models: {embedder, segmenter, describer}}` |
//! | `/v1/embed`    | `{kind: "text"\|"image", payload}` | `{vector, model}`                          |
//! | `/v1/segment`  | `{image, prompt}`                 | `{mask, model}`                            |
//! | `/v1/describe` | `{image}`                         | `{items, overall, truncated?, model}`      |
//!
//! Images travel as base64 PNG, masks as base64 single-channel PNG. A `null`
//! model in the handshake means that capability is unavailable and callers
//! fall back to the local providers.

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embedding::{Embedder, Embedding, EmbeddingError, ToyEmbedder};
use crate::image::RasterImage;
use crate::segmentation::{ObjectMask, SegmentationError, Segmenter, SimilaritySegmenter};
use crate::semantics::{Describer, SemanticDescription, SemanticItem, SemanticsError};

pub const NORM_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway transport: {0}")]
    Transport(String),
    #[error("gateway returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gateway response violates the schema: {0}")]
    Schema(String),
    #[error("gateway has no {0} model loaded")]
    Unavailable(&'static str),
    #[error("image encoding: {0}")]
    Image(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct GatewayModels {
    pub embedder: Option<String>,
    pub segmenter: Option<String>,
    pub describer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct Handshake {
    pub d: usize,
    pub models: GatewayModels,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
    model: String,
}

#[derive(Deserialize)]
struct SegmentResponse {
    mask: String,
    model: String,
}

#[derive(Deserialize)]
struct DescribeResponse {
    items: Vec<SemanticItem>,
    overall: String,
    #[serde(default)]
    truncated: bool,
    model: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    kind: &'a str,
    payload: &'a str,
}

/// Description returned by the gateway, with its truncation flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatewayDescription {
    pub description: SemanticDescription,
    pub truncated: bool,
    pub model: String,
}

pub fn encode_png(img: &RasterImage) -> Result<String, GatewayError> {
    let buf = ::image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| GatewayError::Image("raw buffer size mismatch".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ::image::ImageFormat::Png)
        .map_err(|e| GatewayError::Image(e.to_string()))?;
    Ok(B64.encode(out))
}

/// Decodes a base64 single-channel PNG into values in `[0, 1]`.
pub fn decode_mask_png(b64: &str) -> Result<(usize, usize, Vec<f64>), GatewayError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| GatewayError::Schema(format!("mask is not base64: {e}")))?;
    let img = ::image::load_from_memory_with_format(&bytes, ::image::ImageFormat::Png)
        .map_err(|e| GatewayError::Schema(format!("mask is not a PNG: {e}")))?;
    if img.color().channel_count() != 1 {
        return Err(GatewayError::Schema(format!("mask has {} channels, expected 1", img.color().channel_count())));
    }
    let luma = img.to_luma8();
    let data = luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok((luma.width() as usize, luma.height() as usize, data))
}

/// Encodes a mask as a base64 8-bit grayscale PNG.
pub fn encode_mask_png(width: usize, height: usize, data: &[f64]) -> Result<String, GatewayError> {
    let raw: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = ::image::GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| GatewayError::Image("mask buffer size mismatch".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ::image::ImageFormat::Png)
        .map_err(|e| GatewayError::Image(e.to_string()))?;
    Ok(B64.encode(out))
}

#[derive(Clone)]
pub struct GatewayClient {
    base: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for GatewayClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatewayClient").field("base", &self.base).finish()
    }
}

impl GatewayClient {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, route: &str, body: &impl Serialize) -> Result<T, GatewayError> {
        let url = format!("{}{route}", self.base);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(GatewayError::Http { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Schema(format!("{route}: {e}")))
    }

    pub fn handshake(&self) -> Result<Handshake, GatewayError> {
        let h: Handshake = self.post("/v1/handshake", &json!({}))?;
        if h.d == 0 {
            return Err(GatewayError::Schema("handshake declares d = 0".into()));
        }
        Ok(h)
    }

    fn embed(&self, kind: &str, payload: &str, d: usize) -> Result<(Embedding, String), GatewayError> {
        let r: EmbedResponse = self.post("/v1/embed", &EmbedRequest { kind, payload })?;
        if r.vector.len() != d {
            return Err(GatewayError::Schema(format!("embedding has {} dims, handshake declared {d}", r.vector.len())));
        }
        let e = Embedding::new(r.vector).map_err(|e| GatewayError::Schema(e.to_string()))?;
        if (e.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(GatewayError::Schema(format!("embedding norm {} is not 1", e.norm())));
        }
        Ok((e, r.model))
    }

    pub fn embed_text(&self, text: &str, d: usize) -> Result<Embedding, GatewayError> {
        Ok(self.embed("text", text, d)?.0)
    }

    pub fn embed_image(&self, img: &RasterImage, d: usize) -> Result<Embedding, GatewayError> {
        Ok(self.embed("image", &encode_png(img)?, d)?.0)
    }

    /// Soft mask at the request image's resolution.
    pub fn segment(&self, img: &RasterImage, prompt: &str) -> Result<Vec<f64>, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::Schema("empty segmentation prompt".into()));
        }
        let r: SegmentResponse = self.post("/v1/segment", &json!({"image": encode_png(img)?, "prompt": prompt}))?;
        if r.model.is_empty() {
            return Err(GatewayError::Schema("segment response lacks a model id".into()));
        }
        let (w, h, data) = decode_mask_png(&r.mask)?;
        if (w, h) != (img.width(), img.height()) {
            return Err(GatewayError::Schema(format!(
                "mask is {w}x{h}, request was {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(data)
    }

    pub fn describe(&self, img: &RasterImage) -> Result<GatewayDescription, GatewayError> {
        let r: DescribeResponse = self.post("/v1/describe", &json!({"image": encode_png(img)?}))?;
        let description =
            SemanticDescription::new(r.items, r.overall).map_err(|e| GatewayError::Schema(e.to_string()))?;
        Ok(GatewayDescription {
            description,
            truncated: r.truncated,
            model: r.model,
        })
    }
}

/// Joint embedder served by the gateway.
#[derive(Clone, Debug)]
pub struct GatewayEmbedder {
    client: GatewayClient,
    d: usize,
    model: String,
}

impl Embedder for GatewayEmbedder {
    fn dim(&self) -> usize {
        self.d
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        self.client.embed_text(text, self.d).map_err(|e| EmbeddingError::Provider(e.to_string()))
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, EmbeddingError> {
        if image.pixel_count() == 0 {
            return Err(EmbeddingError::EmptyInput);
        }
        self.client.embed_image(image, self.d).map_err(|e| EmbeddingError::Provider(e.to_string()))
    }
}

/// Open-vocabulary segmenter served by the gateway; masks are upsampled to
/// full resolution.
#[derive(Clone, Debug)]
pub struct GatewaySegmenter {
    client: GatewayClient,
}

impl Segmenter for GatewaySegmenter {
    fn segment(
        &self,
        half_res: &RasterImage,
        item_index: usize,
        item: &SemanticItem,
    ) -> Result<ObjectMask, SegmentationError> {
        let data = self
            .client
            .segment(half_res, &item.prompt())
            .map_err(|e| SegmentationError::Provider(e.to_string()))?;
        let mask = ObjectMask {
            width: half_res.width(),
            height: half_res.height(),
            item: item_index,
            data,
        };
        Ok(mask.resized(2 * half_res.width(), 2 * half_res.height()))
    }
}

#[derive(Clone, Debug)]
pub struct GatewayDescriber {
    client: GatewayClient,
}

impl Describer for GatewayDescriber {
    fn describe(&self, image: &RasterImage) -> Result<SemanticDescription, SemanticsError> {
        match self.client.describe(image) {
            Ok(r) => {
                if r.truncated {
                    log::warn!("gateway truncated the description to fit the word budget");
                }
                Ok(r.description)
            }
            Err(e) => Err(SemanticsError::GatewayUnavailable(e.to_string())),
        }
    }
}

/// Providers resolved from a handshake; unavailable gateway models are
/// `None`.
#[derive(Clone, Debug)]
pub struct GatewayProviders {
    pub handshake: Handshake,
    pub embedder: Option<GatewayEmbedder>,
    pub segmenter: Option<GatewaySegmenter>,
    pub describer: Option<GatewayDescriber>,
}

pub fn connect(client: &GatewayClient) -> Result<GatewayProviders, GatewayError> {
    let handshake = client.handshake()?;
    let m = &handshake.models;
    Ok(GatewayProviders {
        embedder: m.embedder.as_ref().map(|model| GatewayEmbedder {
            client: client.clone(),
            d: handshake.d,
            model: model.clone(),
        }),
        segmenter: m.segmenter.as_ref().map(|_| GatewaySegmenter { client: client.clone() }),
        describer: m.describer.as_ref().map(|_| GatewayDescriber { client: client.clone() }),
        handshake,
    })
}

/// The gateway embedder, or the toy embedder when the gateway reports no
/// embedder.
pub fn embedder_or_toy(p: &GatewayProviders) -> Arc<dyn Embedder> {
    match &p.embedder {
        Some(e) => Arc::new(e.clone()),
        None => {
            log::warn!("gateway has no embedder; falling back to the toy embedder");
            Arc::new(ToyEmbedder)
        }
    }
}

/// The gateway segmenter, or patch similarity over `fallback` when the
/// gateway reports no segmenter.
pub fn segmenter_or_similarity(p: &GatewayProviders, fallback: Arc<dyn Embedder>) -> Arc<dyn Segmenter> {
    match &p.segmenter {
        Some(s) => Arc::new(s.clone()),
        None => {
            log::warn!("gateway has no segmenter; falling back to patch similarity");
            Arc::new(SimilaritySegmenter::new(fallback))
        }
    }
}

pub fn describer(p: &GatewayProviders) -> Result<Arc<dyn Describer>, GatewayError> {
    p.describer
        .as_ref()
        .map(|d| Arc::new(d.clone()) as Arc<dyn Describer>)
        .ok_or(GatewayError::Unavailable("describer"))
}
