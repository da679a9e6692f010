//! Controller input features computed from the initial reconstruction.
//!
//! Two statistical features (Canny edge density, Laplacian variance), four
//! perceptual proxies and two embedding-based alignment scores. The flip
//! invariance of the statistical features is exact: every kernel sum is
//! written as a sum of mirror pairs so a horizontally flipped input adds the
//! same floating-point terms in the same order.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{cosine, Embedder, EmbeddingError};
use crate::image::{GrayImage, RasterImage};
use crate::semantics::SemanticDescription;

pub const FEATURE_COUNT: usize = 8;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "edge_density",
    "log_laplacian_var",
    "entropy",
    "rms_contrast",
    "colorfulness",
    "noise_sigma",
    "quality_alignment",
    "semantic_alignment",
];
pub const QUALITY_PROMPT: &str = "a sharp high quality photo";

pub const CANNY_SIGMA: f64 = 1.4;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.3;
const CANNY_MIN_SIDE: usize = 16;
/// Peak Sobel magnitude below which an image is treated as flat.
const FLAT_GRADIENT: f64 = 1e-6;
const TAN_22_5: f64 = 0.414_213_562_373_095_03;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} is smaller than the required {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("feature schema mismatch")]
    SchemaMismatch,
    #[error("normalizer needs at least one sample")]
    NoSamples,
}

fn require(g: &GrayImage, min: usize) -> Result<(), FeatureError> {
    if g.width < min || g.height < min {
        return Err(FeatureError::ImageTooSmall {
            width: g.width,
            height: g.height,
            min,
        });
    }
    Ok(())
}

pub fn grayscale(img: &RasterImage) -> GrayImage {
    img.to_gray()
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn gaussian5(sigma: f64) -> [f64; 3] {
    let raw = [1.0, (-1.0 / (2.0 * sigma * sigma)).exp(), (-4.0 / (2.0 * sigma * sigma)).exp()];
    let total = raw[0] + 2.0 * (raw[1] + raw[2]);
    [raw[0] / total, raw[1] / total, raw[2] / total]
}

fn blur5(g: &GrayImage, sigma: f64) -> Vec<f64> {
    let k = gaussian5(sigma);
    let (w, h) = (g.width, g.height);
    let at = |v: &[f64], x: isize, y: usize| v[y * w + reflect(x, w)];
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xi = x as isize;
            tmp[y * w + x] = k[0] * at(&g.data, xi, y)
                + k[1] * (at(&g.data, xi - 1, y) + at(&g.data, xi + 1, y))
                + k[2] * (at(&g.data, xi - 2, y) + at(&g.data, xi + 2, y));
        }
    }
    let col = |v: &[f64], x: usize, y: isize| v[reflect(y, h) * w + x];
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let yi = y as isize;
        for x in 0..w {
            out[y * w + x] = k[0] * col(&tmp, x, yi)
                + k[1] * (col(&tmp, x, yi - 1) + col(&tmp, x, yi + 1))
                + k[2] * (col(&tmp, x, yi - 2) + col(&tmp, x, yi + 2));
        }
    }
    out
}

/// Binary Canny edge map (row-major, `true` = edge).
pub fn canny(g: &GrayImage) -> Result<Vec<bool>, FeatureError> {
    require(g, CANNY_MIN_SIDE)?;
    let (w, h) = (g.width, g.height);
    let b = blur5(g, CANNY_SIGMA);
    let px = |x: isize, y: isize| b[reflect(y, h) * w + reflect(x, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let colsum = |cx: isize| (px(cx, y - 1) + px(cx, y + 1)) + 2.0 * px(cx, y);
            let rowsum = |ry: isize| (px(x - 1, ry) + px(x + 1, ry)) + 2.0 * px(x, ry);
            let i = y as usize * w + x as usize;
            gx[i] = colsum(x + 1) - colsum(x - 1);
            gy[i] = rowsum(y + 1) - rowsum(y - 1);
            mag[i] = gx[i].hypot(gy[i]);
        }
    }
    // thresholds are fractions of the strongest response in the image
    let peak = mag.iter().fold(0.0f64, |a, &b| a.max(b));
    if peak < FLAT_GRADIENT {
        return Ok(vec![false; w * h]);
    }
    mag.iter_mut().for_each(|v| *v /= peak);
    let m = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (n1, n2) = if ay <= TAN_22_5 * ax {
                (m(x - 1, y), m(x + 1, y))
            } else if ax <= TAN_22_5 * ay {
                (m(x, y - 1), m(x, y + 1))
            } else if gx[i] * gy[i] > 0.0 {
                (m(x - 1, y - 1), m(x + 1, y + 1))
            } else {
                (m(x + 1, y - 1), m(x - 1, y + 1))
            };
            if v >= n1 && v >= n2 {
                thin[i] = v;
            }
        }
    }
    let mut edges = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= CANNY_HIGH).collect();
    for &i in &stack {
        edges[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] >= CANNY_LOW {
                    edges[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(edges)
}

/// Fraction of Canny edge pixels.
pub fn edge_density(img: &RasterImage) -> Result<f64, FeatureError> {
    let edges = canny(&img.to_gray())?;
    Ok(edges.iter().filter(|&&e| e).count() as f64 / edges.len() as f64)
}

/// Sums a row as mirror pairs so the result is unchanged by reversing it.
fn mirror_sum(row: &[f64]) -> f64 {
    let n = row.len();
    let mut s = 0.0;
    for i in 0..n / 2 {
        s += row[i] + row[n - 1 - i];
    }
    if n % 2 == 1 {
        s += row[n / 2];
    }
    s
}

/// Variance of the 4-neighbour Laplacian over interior pixels.
pub fn blurriness(img: &RasterImage) -> Result<f64, FeatureError> {
    laplacian_variance(&img.to_gray())
}

pub fn laplacian_variance(g: &GrayImage) -> Result<f64, FeatureError> {
    require(g, 3)?;
    let (w, h) = (g.width, g.height);
    let iw = w - 2;
    let mut resp = Vec::with_capacity(iw * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |x: usize, y: usize| g.data[y * w + x];
            resp.push((p(x - 1, y) + p(x + 1, y)) + (p(x, y - 1) + p(x, y + 1)) - 4.0 * p(x, y));
        }
    }
    let n = resp.len() as f64;
    let mean = resp.chunks(iw).map(mirror_sum).sum::<f64>() / n;
    let sq: Vec<f64> = resp.iter().map(|r| (r - mean) * (r - mean)).collect();
    Ok(sq.chunks(iw).map(mirror_sum).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptualProxies {
    pub entropy: f64,
    pub rms_contrast: f64,
    pub colorfulness: f64,
    pub noise_sigma: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn gray_entropy(g: &GrayImage) -> f64 {
    let mut hist = [0usize; 256];
    for &v in &g.data {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let n = g.data.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Hasler–Süsstrunk colorfulness on the `[0, 1]` sample scale.
pub fn colorfulness(img: &RasterImage) -> f64 {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let rg = (0..r.len()).map(|i| r[i] - g[i]);
    let yb = (0..r.len()).map(|i| 0.5 * (r[i] + g[i]) - b[i]);
    let (mrg, srg) = mean_std(rg);
    let (myb, syb) = mean_std(yb);
    (srg * srg + syb * syb).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt()
}

/// Robust noise estimate from the finest Haar diagonal band.
pub fn noise_sigma(g: &GrayImage) -> f64 {
    let (w, h) = (g.width, g.height);
    let mut hh = Vec::with_capacity((w / 2) * (h / 2));
    for y in (0..h - h % 2).step_by(2) {
        for x in (0..w - w % 2).step_by(2) {
            let p = |dx: usize, dy: usize| g.data[(y + dy) * w + x + dx];
            hh.push(((p(0, 0) - p(1, 0) - p(0, 1) + p(1, 1)) / 2.0).abs());
        }
    }
    if hh.is_empty() {
        return 0.0;
    }
    hh.sort_by(f64::total_cmp);
    let n = hh.len();
    let median = if n % 2 == 1 { hh[n / 2] } else { 0.5 * (hh[n / 2 - 1] + hh[n / 2]) };
    median / 0.6745
}

pub fn perceptual_proxies(img: &RasterImage) -> PerceptualProxies {
    let g = img.to_gray();
    PerceptualProxies {
        entropy: gray_entropy(&g),
        rms_contrast: mean_std(g.data.iter().copied()).1,
        colorfulness: colorfulness(img),
        noise_sigma: noise_sigma(&g),
    }
}

pub fn quality_alignment(img: &RasterImage, embedder: &dyn Embedder) -> Result<f64, FeatureError> {
    let e_img = embedder.embed_image(img)?;
    let e_txt = embedder.embed_text(QUALITY_PROMPT)?;
    Ok(cosine(&e_img, &e_txt)?)
}

/// Cosine between the description text and the image embedding.
pub fn semantic_alignment(
    img: &RasterImage,
    d: &SemanticDescription,
    embedder: &dyn Embedder,
) -> Result<f64, FeatureError> {
    let e_s = embedder.embed_text(&d.alignment_text())?;
    let e_r = embedder.embed_image(img)?;
    Ok(cosine(&e_s, &e_r)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// SHA-256 over the ordered feature names.
pub fn schema_hash() -> [u8; 32] {
    let mut h = Sha256::new();
    for name in FEATURE_NAMES {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    h.finalize().into()
}

/// Unnormalized features in schema order.
pub fn raw_features(
    img: &RasterImage,
    d: &SemanticDescription,
    embedder: &dyn Embedder,
) -> Result<FeatureVector, FeatureError> {
    let p = perceptual_proxies(img);
    Ok(FeatureVector([
        edge_density(img)?,
        blurriness(img)?.ln_1p(),
        p.entropy,
        p.rms_contrast,
        p.colorfulness,
        p.noise_sigma,
        quality_alignment(img, embedder)?,
        semantic_alignment(img, d, embedder)?,
    ]))
}

/// Features z-scored with the statistics stored next to a trained model.
pub fn build_features(
    img: &RasterImage,
    d: &SemanticDescription,
    embedder: &dyn Embedder,
    normalizer: &FeatureNormalizer,
) -> Result<FeatureVector, FeatureError> {
    Ok(normalizer.normalize(&raw_features(img, d, embedder)?))
}

/// Per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    pub mean: [f64; FEATURE_COUNT],
    pub std: [f64; FEATURE_COUNT],
}

impl Default for FeatureNormalizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl FeatureNormalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_COUNT],
            std: [1.0; FEATURE_COUNT],
        }
    }

    /// Fits population statistics; constant features get std 1.
    pub fn fit(samples: &[FeatureVector]) -> Result<Self, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::NoSamples);
        }
        let mut out = Self::identity();
        for k in 0..FEATURE_COUNT {
            let (m, s) = mean_std(samples.iter().map(|f| f.0[k]));
            out.mean[k] = m;
            out.std[k] = if s > 1e-12 { s } else { 1.0 };
        }
        Ok(out)
    }

    pub fn normalize(&self, f: &FeatureVector) -> FeatureVector {
        FeatureVector(std::array::from_fn(|k| (f.0[k] - self.mean[k]) / self.std[k]))
    }

    pub fn unnormalize(&self, z: &FeatureVector) -> FeatureVector {
        FeatureVector(std::array::from_fn(|k| z.0[k] * self.std[k] + self.mean[k]))
    }
}
