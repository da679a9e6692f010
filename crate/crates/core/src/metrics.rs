//! Full-reference and no-reference quality metrics, range normalization and
//! the three-group report.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::embedding::{cosine, Embedder, EmbeddingError};
use crate::features::{perceptual_proxies, quality_alignment, FeatureError};
use crate::image::RasterImage;

/// Default range table, also shipped as `data/metric_ranges.csv`.
pub const DEFAULT_RANGES_CSV: &str = include_str!("../data/metric_ranges.csv");

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("image {width}x{height} is smaller than the {min}x{min} window")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("degenerate range for '{0}'")]
    DegenerateRange(String),
    #[error("non-finite value for '{0}'")]
    NonFinite(String),
    #[error("range table line {line}: {reason}")]
    RangeTableFormat { line: usize, reason: String },
    #[error("reading range table: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

fn same_shape(a: &RasterImage, b: &RasterImage) -> Result<(), MetricError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricError::ShapeMismatch(
            (a.width(), a.height()),
            (b.width(), b.height()),
        ));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all channels; `+inf` for identical inputs.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    // Neumaier summation: a constant offset gives an exact mean
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let v = (x - y) * (x - y);
        let t = sum + v;
        comp += if sum.abs() >= v { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    let mse = (sum + comp) / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> (f64, f64) {
    let k = gaussian_window();
    let c1 = (K1 * 1.0) * (K1 * 1.0);
    let c2 = (K2 * 1.0) * (K2 * 1.0);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let (mu_a, _, _) = filter_valid(a, w, h, &k);
    let (mu_b, _, _) = filter_valid(b, w, h, &k);
    let (saa, _, _) = filter_valid(&prod(a, a), w, h, &k);
    let (sbb, _, _) = filter_valid(&prod(b, b), w, h, &k);
    let (sab, _, _) = filter_valid(&prod(a, b), w, h, &k);
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

fn check_window(w: usize, h: usize) -> Result<(), MetricError> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall {
            width: w,
            height: h,
            min: SSIM_WINDOW,
        });
    }
    Ok(())
}

/// SSIM averaged over the three channels.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    check_window(w, h)?;
    Ok((0..3).map(|c| ssim_plane(a.plane(c), b.plane(c), w, h).0).sum::<f64>() / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    /// Scales actually used; fewer than five on small images.
    pub scales: usize,
}

/// Number of dyadic scales that keep the SSIM window inside the image.
pub fn ms_ssim_scales(w: usize, h: usize) -> usize {
    let m = w.min(h);
    if m < SSIM_WINDOW {
        return 0;
    }
    ((m as f64 / SSIM_WINDOW as f64).log2().floor() as usize + 1).min(MS_SSIM_WEIGHTS.len())
}

fn half(p: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let s = p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1];
            out[y * ow + x] = s / 4.0;
        }
    }
    (out, ow, oh)
}

/// Multi-scale SSIM with renormalized weights when fewer scales fit.
pub fn ms_ssim(a: &RasterImage, b: &RasterImage) -> Result<MsSsim, MetricError> {
    same_shape(a, b)?;
    let (w0, h0) = (a.width(), a.height());
    let scales = ms_ssim_scales(w0, h0);
    check_window(w0, h0)?;
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let mut total = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb) = (a.plane(c).to_vec(), b.plane(c).to_vec());
        let (mut w, mut h) = (w0, h0);
        let mut value = 1.0;
        for (j, wj) in weights.iter().enumerate() {
            let (s, cs) = ssim_plane(&pa, &pb, w, h);
            let term = if j + 1 == scales { s } else { cs };
            value *= term.max(0.0).powf(wj / wsum);
            if j + 1 < scales {
                let (na, nw, nh) = half(&pa, w, h);
                pb = half(&pb, w, h).0;
                pa = na;
                w = nw;
                h = nh;
            }
        }
        total += value;
    }
    Ok(MsSsim {
        value: total / 3.0,
        scales,
    })
}

/// `0.5·(1 − MS-SSIM) + 0.5·(1 − cos(E(a), E(b)))`; lower is better.
pub fn perceptual_distance(
    a: &RasterImage,
    b: &RasterImage,
    embedder: &dyn Embedder,
) -> Result<f64, MetricError> {
    let ms = ms_ssim(a, b)?.value;
    let cos = cosine(&embedder.embed_image(a)?, &embedder.embed_image(b)?)?;
    Ok(0.5 * (1.0 - ms) + 0.5 * (1.0 - cos))
}

/// Cosine similarity of image embeddings.
pub fn embedding_similarity(
    a: &RasterImage,
    b: &RasterImage,
    embedder: &dyn Embedder,
) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    Ok(cosine(&embedder.embed_image(a)?, &embedder.embed_image(b)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlindQuality {
    pub entropy: f64,
    pub rms_contrast: f64,
    pub colorfulness: f64,
    pub noise_sigma: f64,
    pub quality_alignment: f64,
}

pub fn blind_quality(img: &RasterImage, embedder: &dyn Embedder) -> Result<BlindQuality, MetricError> {
    let p = perceptual_proxies(img);
    Ok(BlindQuality {
        entropy: p.entropy,
        rms_contrast: p.rms_contrast,
        colorfulness: p.colorfulness,
        noise_sigma: p.noise_sigma,
        quality_alignment: quality_alignment(img, embedder)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricGroup {
    Pixel,
    Similarity,
    Quality,
}

impl MetricGroup {
    pub const ALL: [MetricGroup; 3] = [MetricGroup::Pixel, MetricGroup::Similarity, MetricGroup::Quality];

    pub fn name(self) -> &'static str {
        match self {
            MetricGroup::Pixel => "pixel",
            MetricGroup::Similarity => "perceptual_similarity",
            MetricGroup::Quality => "perceptual_quality",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRange {
    pub lo: f64,
    pub hi: f64,
    /// `false` for distance-type metrics where lower raw values are better.
    pub higher_is_better: bool,
    pub group: MetricGroup,
}

/// Per-metric normalization ranges, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeTable {
    entries: Vec<(String, MetricRange)>,
}

impl RangeTable {
    /// Parses `metric,lo,hi,orientation,group` records with a header line.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut entries = Vec::new();
        let mut header_seen = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| MetricError::RangeTableFormat {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if !header_seen {
                if cols != ["metric", "lo", "hi", "orientation", "group"] {
                    return Err(err("expected header metric,lo,hi,orientation,group"));
                }
                header_seen = true;
                continue;
            }
            if cols.len() != 5 {
                return Err(err("expected 5 columns"));
            }
            let lo: f64 = cols[1].parse().map_err(|_| err("bad lo"))?;
            let hi: f64 = cols[2].parse().map_err(|_| err("bad hi"))?;
            let higher_is_better = match cols[3] {
                "+" => true,
                "-" => false,
                _ => return Err(err("orientation must be + or -")),
            };
            let group = MetricGroup::parse(cols[4]).ok_or_else(|| err("unknown group"))?;
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(MetricError::DegenerateRange(cols[0].to_string()));
            }
            entries.push((
                cols[0].to_string(),
                MetricRange {
                    lo,
                    hi,
                    higher_is_better,
                    group,
                },
            ));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_table() -> Self {
        Self::parse(DEFAULT_RANGES_CSV).expect("shipped range table parses")
    }

    pub fn get(&self, metric: &str) -> Option<&MetricRange> {
        self.entries.iter().find(|(n, _)| n == metric).map(|(_, r)| r)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: &str, range: MetricRange) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = range,
            None => self.entries.push((name.to_string(), range)),
        }
    }
}

/// Maps a raw value into `[0, 1]`, flipping distance metrics.
pub fn normalize_value(v: f64, r: &MetricRange) -> f64 {
    let t = if v == f64::INFINITY {
        1.0
    } else if v == f64::NEG_INFINITY {
        0.0
    } else {
        ((v - r.lo) / (r.hi - r.lo)).clamp(0.0, 1.0)
    };
    if r.higher_is_better {
        t
    } else {
        1.0 - t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub raw: BTreeMap<String, f64>,
    pub normalized: BTreeMap<String, f64>,
    pub groups: BTreeMap<MetricGroup, f64>,
    pub bpp: Option<f64>,
}

impl MetricReport {
    pub fn group(&self, g: MetricGroup) -> Option<f64> {
        self.groups.get(&g).copied()
    }
}

pub fn normalize_and_group(
    raw: &BTreeMap<String, f64>,
    table: &RangeTable,
    bpp: Option<f64>,
) -> Result<MetricReport, MetricError> {
    let mut normalized = BTreeMap::new();
    let mut members: BTreeMap<MetricGroup, Vec<f64>> = BTreeMap::new();
    for (name, &v) in raw {
        let r = table
            .get(name)
            .ok_or_else(|| MetricError::UnknownMetric(name.clone()))?;
        if v.is_nan() {
            return Err(MetricError::NonFinite(name.clone()));
        }
        if !(r.hi > r.lo) {
            return Err(MetricError::DegenerateRange(name.clone()));
        }
        let n = normalize_value(v, r);
        normalized.insert(name.clone(), n);
        members.entry(r.group).or_default().push(n);
    }
    let groups = members
        .into_iter()
        .map(|(g, vals)| (g, vals.iter().sum::<f64>() / vals.len() as f64))
        .collect();
    Ok(MetricReport {
        raw: raw.clone(),
        normalized,
        groups,
        bpp,
    })
}

/// Every metric in the default range table for one reconstruction.
pub fn full_metrics(
    original: &RasterImage,
    recon: &RasterImage,
    embedder: &dyn Embedder,
) -> Result<BTreeMap<String, f64>, MetricError> {
    let ms = ms_ssim(original, recon)?.value;
    let sim = embedding_similarity(original, recon, embedder)?;
    let bq = blind_quality(recon, embedder)?;
    let mut m = BTreeMap::new();
    m.insert("psnr".into(), psnr(original, recon)?);
    m.insert("ssim".into(), ssim(original, recon)?);
    m.insert("ms_ssim".into(), ms);
    m.insert("perceptual_distance".into(), 0.5 * (1.0 - ms) + 0.5 * (1.0 - sim));
    m.insert("embedding_similarity".into(), sim);
    m.insert("entropy".into(), bq.entropy);
    m.insert("rms_contrast".into(), bq.rms_contrast);
    m.insert("colorfulness".into(), bq.colorfulness);
    m.insert("noise_sigma".into(), bq.noise_sigma);
    m.insert("quality_alignment".into(), bq.quality_alignment);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ToyEmbedder;

    #[test]
    fn psnr_closed_forms() {
        let a = RasterImage::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = RasterImage::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let zero = RasterImage::filled(4, 4, [0.0; 3]);
        let one = RasterImage::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert!(matches!(
            psnr(&a, &RasterImage::filled(2, 4, [0.0; 3])),
            Err(MetricError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn ssim_identity_and_inverse() {
        let x = RasterImage::from_fn(24, 24, |x, y| {
            let v = ((x + y) % 2) as f64;
            [v, v, v]
        });
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = RasterImage::from_fn(24, 24, |px, py| {
            let v = 1.0 - x.get(px, py, 0);
            [v, v, v]
        });
        assert!(ssim(&x, &inv).unwrap() < 0.0);
        let ms = ms_ssim(&x, &x).unwrap();
        assert!((ms.value - 1.0).abs() < 1e-12);
        assert_eq!(ms.scales, 2);
    }

    #[test]
    fn scale_counts() {
        assert_eq!(ms_ssim_scales(10, 100), 0);
        assert_eq!(ms_ssim_scales(11, 11), 1);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(4096, 4096), 5);
    }

    #[test]
    fn perceptual_distance_identity_and_symmetry() {
        let a = RasterImage::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.5]);
        let b = RasterImage::from_fn(16, 16, |x, _| [0.3, x as f64 / 20.0, 0.1]);
        assert_eq!(perceptual_distance(&a, &a, &ToyEmbedder).unwrap(), 0.0);
        assert_eq!(
            perceptual_distance(&a, &b, &ToyEmbedder).unwrap(),
            perceptual_distance(&b, &a, &ToyEmbedder).unwrap()
        );
    }

    fn table() -> RangeTable {
        RangeTable::parse("metric,lo,hi,orientation,group\na,0,10,+,pixel\nd,0,1,-,perceptual_similarity\nq,0,1,+,perceptual_quality\nr,0,1,+,perceptual_quality\ns,0,1,+,perceptual_quality\n").unwrap()
    }

    #[test]
    fn normalization_boundaries() {
        let t = table();
        let r = t.get("a").unwrap();
        assert_eq!(normalize_value(0.0, r), 0.0);
        assert_eq!(normalize_value(10.0, r), 1.0);
        assert_eq!(normalize_value(25.0, r), 1.0);
        assert_eq!(normalize_value(f64::INFINITY, r), 1.0);
        assert_eq!(normalize_value(0.25, t.get("d").unwrap()), 0.75);
    }

    #[test]
    fn group_means() {
        let raw: BTreeMap<String, f64> = [("q", 0.2), ("r", 0.4), ("s", 0.6), ("a", 5.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let rep = normalize_and_group(&raw, &table(), Some(0.1)).unwrap();
        assert!((rep.group(MetricGroup::Quality).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(rep.group(MetricGroup::Pixel), Some(0.5));
        assert_eq!(rep.group(MetricGroup::Similarity), None);
        let unknown: BTreeMap<String, f64> = [("zz".to_string(), 1.0)].into_iter().collect();
        assert!(matches!(normalize_and_group(&unknown, &table(), None), Err(MetricError::UnknownMetric(_))));
    }

    #[test]
    fn range_table_errors() {
        assert!(matches!(
            RangeTable::parse("metric,lo,hi,orientation,group\nx,1,1,+,pixel\n"),
            Err(MetricError::DegenerateRange(_))
        ));
        assert!(matches!(
            RangeTable::parse("metric,lo,hi,orientation,group\nx,0,1,?,pixel\n"),
            Err(MetricError::RangeTableFormat { line: 2, .. })
        ));
        let t = RangeTable::default_table();
        for name in ["psnr", "ssim", "ms_ssim", "perceptual_distance", "quality_alignment"] {
            assert!(t.get(name).is_some(), "{name}");
        }
    }
}
