//! Joint text/image embedding providers.
//!
//! The toy provider is deterministic and has no notion of cross-modal
//! meaning: text is hashed by character trigrams, images are summarized by
//! color and edge-orientation histograms. It exists so that the alignment
//! feature and the decoder-side segmentation are mechanically testable;
//! meaningful text/image similarity needs the gateway provider or an
//! explicit [`FixtureEmbedder`] pairing.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::image::RasterImage;

pub const TOY_DIM: usize = 64;
const COLOR_BINS: usize = 16;
const ORIENTATION_BINS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// A finite, nonzero embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        if norm(&values) == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self(values))
    }

    /// Builds an L2-normalized embedding.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let n = norm(&values);
        if n == 0.0 || !n.is_finite() {
            return Err(EmbeddingError::ZeroNorm);
        }
        values.iter_mut().for_each(|v| *v /= n);
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, k: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.0.iter().map(|v| v * k).collect())
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, `a·b / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn model_id(&self) -> &str;
    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError>;
    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, EmbeddingError>;
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        (**self).embed_text(text)
    }
    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, EmbeddingError> {
        (**self).embed_image(image)
    }
}

/// Trigram-hash text / histogram image embedder, `d = 64`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyEmbedder;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        TOY_DIM
    }

    fn model_id(&self) -> &str {
        "toy-trigram-histogram-v1"
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        let mut v = vec![0.0; TOY_DIM];
        let mut buf = [0u8; 12];
        for tri in padded.windows(3) {
            let mut len = 0;
            for ch in tri {
                len += ch.encode_utf8(&mut buf[len..]).len();
            }
            v[(fnv1a(&buf[..len]) % TOY_DIM as u64) as usize] += 1.0;
        }
        Embedding::normalized(v)
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, EmbeddingError> {
        let n = image.pixel_count();
        if n == 0 {
            return Err(EmbeddingError::EmptyInput);
        }
        let mut v = vec![0.0; TOY_DIM];
        let inv = 1.0 / n as f64;
        for c in 0..3 {
            for &s in image.plane(c) {
                let bin = ((s * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
                v[c * COLOR_BINS + bin] += inv;
            }
        }
        let gray = image.to_gray();
        let (w, h) = (gray.width as isize, gray.height as isize);
        let base = 3 * COLOR_BINS;
        for y in 0..h {
            for x in 0..w {
                let p = |dx: isize, dy: isize| gray.get_clamped(x + dx, y + dy);
                let gx = (p(1, -1) - p(-1, -1)) + 2.0 * (p(1, 0) - p(-1, 0)) + (p(1, 1) - p(-1, 1));
                let gy = (p(-1, 1) - p(-1, -1)) + 2.0 * (p(0, 1) - p(0, -1)) + (p(1, 1) - p(1, -1));
                let mag = gx.hypot(gy);
                if mag < 1e-9 {
                    continue;
                }
                // undirected orientation in [0, pi)
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += std::f64::consts::PI;
                }
                let bin = ((theta / std::f64::consts::PI * ORIENTATION_BINS as f64) as usize)
                    .min(ORIENTATION_BINS - 1);
                v[base + bin] += mag * inv;
            }
        }
        Embedding::normalized(v)
    }
}

/// Wraps another embedder and overrides selected texts with fixed vectors.
///
/// Used to pair a prompt with an image statistic when a test needs real
/// cross-modal agreement from the toy provider.
#[derive(Clone)]
pub struct FixtureEmbedder<E> {
    inner: E,
    text_overrides: HashMap<String, Embedding>,
}

impl<E: Embedder> FixtureEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            text_overrides: HashMap::new(),
        }
    }

    pub fn with_text(mut self, text: &str, embedding: Embedding) -> Self {
        self.text_overrides.insert(text.to_string(), embedding);
        self
    }
}

impl<E: Embedder> Embedder for FixtureEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        match self.text_overrides.get(text) {
            Some(e) => Ok(e.clone()),
            None => self.inner.embed_text(text),
        }
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, EmbeddingError> {
        self.inner.embed_image(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_embedding_is_deterministic_and_normalized() {
        let e = ToyEmbedder;
        assert_eq!(e.embed_text("sky").unwrap(), e.embed_text("sky").unwrap());
        for t in ["sky", "a photo of a mountain", "é", "x"] {
            assert!((e.embed_text(t).unwrap().norm() - 1.0).abs() < 1e-6);
        }
        assert_ne!(e.embed_text("sky").unwrap(), e.embed_text("dog").unwrap());
        assert_eq!(e.embed_text("  \n").unwrap_err(), EmbeddingError::EmptyInput);
    }

    #[test]
    fn color_patches_separate() {
        let e = ToyEmbedder;
        let red = e.embed_image(&RasterImage::filled(8, 8, [1.0, 0.0, 0.0])).unwrap();
        let blue = e.embed_image(&RasterImage::filled(8, 8, [0.0, 0.0, 1.0])).unwrap();
        let c = cosine(&red, &blue).unwrap();
        // shared green-zero bin only: 1 / (sqrt(3) * sqrt(3))
        assert!((c - 1.0 / 3.0).abs() < 1e-12);
        assert!(c < 0.9);
        assert!((cosine(&red, &red.clone()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_image_rotation_invariant() {
        let img = RasterImage::filled(12, 7, [0.3, 0.6, 0.1]);
        let e = ToyEmbedder;
        assert_eq!(e.embed_image(&img).unwrap(), e.embed_image(&img.rotate90()).unwrap());
    }

    #[test]
    fn cosine_identities() {
        let v = Embedding::new(vec![0.3, -1.2, 2.0]).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&v, &v.negated()).unwrap() + 1.0).abs() < 1e-15);
        let x = Embedding::new(vec![1.0, 0.0]).unwrap();
        let y = Embedding::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        assert_eq!(cosine(&x, &v), Err(EmbeddingError::DimensionMismatch(2, 3)));
        assert_eq!(Embedding::new(vec![0.0, 0.0]), Err(EmbeddingError::ZeroNorm));
    }

    #[test]
    fn fixture_override() {
        let red = ToyEmbedder.embed_image(&RasterImage::filled(4, 4, [1.0, 0.0, 0.0])).unwrap();
        let e = FixtureEmbedder::new(ToyEmbedder).with_text("red", red.clone());
        assert_eq!(e.embed_text("red").unwrap(), red);
        assert_eq!(e.embed_text("sky").unwrap(), ToyEmbedder.embed_text("sky").unwrap());
    }

    fn vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 5)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_properties(a in vector(), b in vector()) {
            let (a, b) = (Embedding::new(a).unwrap(), Embedding::new(b).unwrap());
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0 + 1e-9);
            prop_assert!((cosine(&a.scaled(2.0).unwrap(), &b).unwrap() - ab).abs() <= 1e-9);
        }
    }
}
