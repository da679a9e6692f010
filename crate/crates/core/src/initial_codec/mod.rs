//! Low-bitrate path: 2x box downsampling and a block-transform codec that
//! produces the blurry initial reconstruction the diffusion decoder starts
//! from.
//!
//! Latent payload layout:
//!
//! ```text
//! "DCT0"        magic
//! u16 BE        width of the coded (half-resolution) image
//! u16 BE        height
//! u8            quality (1..=8)
//! ...           range-coded coefficients, channels Y, Cb, Cr in order,
//!               blocks in raster order within each channel
//! ```
//!
//! Samples are level-shifted, converted to full-range YCbCr and transformed
//! with an orthonormal 8x8 DCT-II. Blocks past the right/bottom edge are
//! filled by reflection; the stored size is used to crop on decode.
//!
//! Per block the coder writes the DC difference to the previous block of the
//! same channel, then (run, level) pairs over the zigzag-ordered AC
//! coefficients, each preceded by a continue flag, so a block ends with a
//! single zero flag (or implicitly at position 63).

mod range_coder;

use thiserror::Error;

use crate::image::RasterImage;
use range_coder::{Prob, RangeDecoder, RangeEncoder, UintModel};

pub const BLOCK: usize = 8;
pub const MIN_QUALITY: u8 = 1;
pub const MAX_QUALITY: u8 = 8;
const MAGIC: [u8; 4] = *b"DCT0";
const HEADER_BYTES: usize = 9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid dimensions: {0}")]
    DimensionInvalid(String),
    #[error("quality {0} outside 1..=8")]
    QualityOutOfRange(u8),
    #[error("malformed latent payload: {0}")]
    MalformedPayload(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitialCodecConfig {
    quality: u8,
}

impl InitialCodecConfig {
    pub fn new(quality: u8) -> Result<Self, CodecError> {
        if !(MIN_QUALITY..=MAX_QUALITY).contains(&quality) {
            return Err(CodecError::QualityOutOfRange(quality));
        }
        Ok(Self { quality })
    }

    pub fn quality(&self) -> u8 {
        self.quality
    }

    /// Multiplier on the base quantizer tables; halves every two steps.
    pub fn step_scale(&self) -> f64 {
        2f64.powf((5.0 - self.quality as f64) / 2.0)
    }

    pub fn block(&self) -> usize {
        BLOCK
    }
}

/// The boundary behind which a learned latent codec could replace the
/// transform codec.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, half_res: &RasterImage) -> Vec<u8>;
    fn decode(&self, payload: &[u8]) -> Result<RasterImage, CodecError>;
}

#[derive(Clone, Copy, Debug)]
pub struct DctCodec {
    pub config: InitialCodecConfig,
}

impl LatentCodec for DctCodec {
    fn encode(&self, half_res: &RasterImage) -> Vec<u8> {
        encode_initial(half_res, &self.config)
    }

    fn decode(&self, payload: &[u8]) -> Result<RasterImage, CodecError> {
        decode_initial(payload)
    }
}

/// Box-filter 2x downsampling; each output pixel is the mean of its 2x2
/// source block.
pub fn downsample_half(img: &RasterImage) -> Result<RasterImage, CodecError> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 || w < 2 || h < 2 {
        return Err(CodecError::DimensionInvalid(format!(
            "{w}x{h} cannot be halved"
        )));
    }
    Ok(RasterImage::from_fn(w / 2, h / 2, |x, y| {
        let mut px = [0.0; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let (x2, y2) = (2 * x, 2 * y);
            *v = ((img.get(x2, y2, c) + img.get(x2 + 1, y2, c))
                + (img.get(x2, y2 + 1, c) + img.get(x2 + 1, y2 + 1, c)))
                / 4.0;
        }
        px
    }))
}

// Annex K tables, in natural (row-major) order, on the 0..255 scale.
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69,
    56, 14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104,
    113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];
const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99,
    99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

/// Zigzag scan position -> natural index.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// cos(m * pi / 16) for m = 0..=8, written out so the basis is identical on
/// every platform.
const COS16: [f64; 9] = [
    1.0,
    0.980_785_280_403_230_4,
    0.923_879_532_511_286_7,
    0.831_469_612_302_545_2,
    0.707_106_781_186_547_6,
    0.555_570_233_019_602_2,
    0.382_683_432_365_089_8,
    0.195_090_322_016_128_25,
    0.0,
];
const SQRT_1_8: f64 = 0.353_553_390_593_273_8;

fn cos_pi16(m: usize) -> f64 {
    let m = m % 32;
    match m {
        0..=8 => COS16[m],
        9..=16 => -COS16[16 - m],
        17..=24 => -COS16[m - 16],
        _ => COS16[32 - m],
    }
}

/// Orthonormal DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let scale = if k == 0 { SQRT_1_8 } else { 0.5 };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale * cos_pi16((2 * n + 1) * k);
        }
    }
    b
}

fn fdct(block: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for k in 0..8 {
            let mut s = 0.0;
            for n in 0..8 {
                s += basis[k][n] * block[y * 8 + n];
            }
            tmp[y * 8 + k] = s;
        }
    }
    let mut out = [0.0; 64];
    for x in 0..8 {
        for k in 0..8 {
            let mut s = 0.0;
            for n in 0..8 {
                s += basis[k][n] * tmp[n * 8 + x];
            }
            out[k * 8 + x] = s;
        }
    }
    out
}

fn idct(coef: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for x in 0..8 {
        for n in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += basis[k][n] * coef[k * 8 + x];
            }
            tmp[n * 8 + x] = s;
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for n in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += basis[k][n] * tmp[y * 8 + k];
            }
            out[y * 8 + n] = s;
        }
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn to_ycbcr(img: &RasterImage) -> [Vec<f64>; 3] {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let n = img.pixel_count();
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        y.push(0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i] - 0.5);
        cb.push(-0.168_736 * r[i] - 0.331_264 * g[i] + 0.5 * b[i]);
        cr.push(0.5 * r[i] - 0.418_688 * g[i] - 0.081_312 * b[i]);
    }
    [y, cb, cr]
}

fn quant_steps(cfg: &InitialCodecConfig) -> [[f64; 64]; 2] {
    let scale = cfg.step_scale();
    let mut steps = [[0.0; 64]; 2];
    for i in 0..64 {
        steps[0][i] = LUMA_TABLE[i] as f64 / 255.0 * scale;
        steps[1][i] = CHROMA_TABLE[i] as f64 / 255.0 * scale;
    }
    steps
}

/// Quantizer step for the DC coefficient of the given channel class
/// (0 = luma, 1 = chroma).
pub fn dc_step(cfg: &InitialCodecConfig, chroma: bool) -> f64 {
    quant_steps(cfg)[chroma as usize][0]
}

fn band(pos: usize) -> usize {
    match pos {
        0..=2 => 0,
        3..=5 => 1,
        6..=14 => 2,
        15..=27 => 3,
        _ => 4,
    }
}

#[derive(Default)]
struct ChannelModels {
    dc_zero: Prob,
    dc_mag: UintModel,
    more: [Prob; 5],
    run: [UintModel; 5],
    level: [UintModel; 5],
}

pub fn encode_initial(img: &RasterImage, cfg: &InitialCodecConfig) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    assert!(w <= u16::MAX as usize && h <= u16::MAX as usize, "image too large for the latent header");
    let mut out = Vec::with_capacity(HEADER_BYTES + 64);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(w as u16).to_be_bytes());
    out.extend_from_slice(&(h as u16).to_be_bytes());
    out.push(cfg.quality);

    let basis = dct_basis();
    let steps = quant_steps(cfg);
    let (bw, bh) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let mut enc = RangeEncoder::new();
    let mut models = [ChannelModels::default(), ChannelModels::default()];
    for (c, plane) in to_ycbcr(img).iter().enumerate() {
        let class = (c > 0) as usize;
        let models = &mut models[class];
        let steps = &steps[class];
        let mut prev_dc: i64 = 0;
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = [0.0; 64];
                for y in 0..BLOCK {
                    let sy = reflect(by * BLOCK + y, h);
                    for x in 0..BLOCK {
                        let sx = reflect(bx * BLOCK + x, w);
                        block[y * 8 + x] = plane[sy * w + sx];
                    }
                }
                let coef = fdct(&block, &basis);
                let mut q = [0i64; 64];
                for i in 0..64 {
                    q[i] = (coef[ZIGZAG[i]] / steps[ZIGZAG[i]]).round() as i64;
                }
                encode_block(&mut enc, models, &q, &mut prev_dc);
            }
        }
    }
    out.extend(enc.finish());
    out
}

fn encode_block(enc: &mut RangeEncoder, m: &mut ChannelModels, q: &[i64; 64], prev_dc: &mut i64) {
    let diff = q[0] - *prev_dc;
    *prev_dc = q[0];
    enc.encode_bit(&mut m.dc_zero, diff == 0);
    if diff != 0 {
        enc.encode_direct(diff < 0);
        enc.encode_uint(&mut m.dc_mag, (diff.unsigned_abs() - 1) as u32);
    }
    let mut pos = 1;
    while pos < 64 {
        let next = (pos..64).find(|&i| q[i] != 0);
        let b = band(pos);
        enc.encode_bit(&mut m.more[b], next.is_some());
        let Some(next) = next else { break };
        enc.encode_uint(&mut m.run[b], (next - pos) as u32);
        let v = q[next];
        enc.encode_uint(&mut m.level[band(next)], (v.unsigned_abs() - 1) as u32);
        enc.encode_direct(v < 0);
        pos = next + 1;
    }
}

pub fn decode_initial(payload: &[u8]) -> Result<RasterImage, CodecError> {
    let malformed = |m: &str| CodecError::MalformedPayload(m.to_string());
    if payload.len() < HEADER_BYTES {
        return Err(malformed("truncated header"));
    }
    if payload[..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let w = u16::from_be_bytes([payload[4], payload[5]]) as usize;
    let h = u16::from_be_bytes([payload[6], payload[7]]) as usize;
    if w == 0 || h == 0 {
        return Err(malformed("zero dimension"));
    }
    let cfg = InitialCodecConfig::new(payload[8]).map_err(|e| malformed(&e.to_string()))?;
    let basis = dct_basis();
    let steps = quant_steps(&cfg);
    let (bw, bh) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let body = &payload[HEADER_BYTES..];
    let mut dec = RangeDecoder::new(body);
    let mut models = [ChannelModels::default(), ChannelModels::default()];
    let mut planes = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for (c, plane) in planes.iter_mut().enumerate() {
        let class = (c > 0) as usize;
        let models = &mut models[class];
        let steps = &steps[class];
        let mut prev_dc: i64 = 0;
        for by in 0..bh {
            for bx in 0..bw {
                let q = decode_block(&mut dec, models, &mut prev_dc)
                    .ok_or_else(|| malformed("corrupt coefficient data"))?;
                if dec.overrun() {
                    return Err(malformed("truncated coefficient data"));
                }
                let mut coef = [0.0; 64];
                for i in 0..64 {
                    coef[ZIGZAG[i]] = q[i] as f64 * steps[ZIGZAG[i]];
                }
                let block = idct(&coef, &basis);
                for y in 0..BLOCK {
                    let py = by * BLOCK + y;
                    if py >= h {
                        break;
                    }
                    for x in 0..BLOCK {
                        let px = bx * BLOCK + x;
                        if px < w {
                            plane[py * w + px] = block[y * 8 + x];
                        }
                    }
                }
            }
        }
    }
    if dec.consumed() != body.len() {
        return Err(malformed("trailing bytes"));
    }
    let [yp, cb, cr] = &planes;
    Ok(RasterImage::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let l = yp[i] + 0.5;
        [
            l + 1.402 * cr[i],
            l - 0.344_136 * cb[i] - 0.714_136 * cr[i],
            l + 1.772 * cb[i],
        ]
    }))
}

fn decode_block(dec: &mut RangeDecoder<'_>, m: &mut ChannelModels, prev_dc: &mut i64) -> Option<[i64; 64]> {
    let mut q = [0i64; 64];
    let diff = if dec.decode_bit(&mut m.dc_zero) {
        0
    } else {
        let negative = dec.decode_direct();
        let mag = dec.decode_uint(&mut m.dc_mag)? as i64 + 1;
        if negative {
            -mag
        } else {
            mag
        }
    };
    q[0] = prev_dc.checked_add(diff)?;
    *prev_dc = q[0];
    let mut pos = 1;
    while pos < 64 {
        let b = band(pos);
        if !dec.decode_bit(&mut m.more[b]) {
            break;
        }
        let run = dec.decode_uint(&mut m.run[b])? as usize;
        let at = pos.checked_add(run).filter(|&p| p < 64)?;
        let mag = dec.decode_uint(&mut m.level[band(at)])? as i64 + 1;
        q[at] = if dec.decode_direct() { -mag } else { mag };
        pos = at + 1;
        if dec.overrun() {
            return None;
        }
    }
    Some(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn scene(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let disc = (fx - 0.6).powi(2) + (fy - 0.4).powi(2) < 0.05;
            if disc {
                [0.85, 0.2, 0.15]
            } else if fy > 0.7 {
                [0.2, 0.55 + 0.1 * (fx * 9.0).sin(), 0.25]
            } else {
                [0.4 + 0.3 * fy, 0.6 + 0.2 * fy, 0.95]
            }
        })
    }

    #[test]
    fn downsample_examples() {
        let c = RasterImage::filled(2, 2, [0.5, 0.5, 0.5]);
        assert_eq!(downsample_half(&c).unwrap().pixel(0, 0), [0.5, 0.5, 0.5]);
        let b = RasterImage::from_fn(2, 2, |_, y| [y as f64; 3]);
        assert_eq!(downsample_half(&b).unwrap().pixel(0, 0), [0.5; 3]);
        assert!(downsample_half(&RasterImage::filled(3, 2, [0.0; 3])).is_err());
    }

    #[test]
    fn downsample_preserves_mean() {
        let img = scene(32, 16);
        let half = downsample_half(&img).unwrap();
        for c in 0..3 {
            let a: f64 = img.plane(c).iter().sum::<f64>() / img.pixel_count() as f64;
            let b: f64 = half.plane(c).iter().sum::<f64>() / half.pixel_count() as f64;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let basis = dct_basis();
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 11) as f64 / 10.0);
        let back = idct(&fdct(&block, &basis), &basis);
        for (a, b) in block.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dc = fdct(&[0.25; 64], &basis)[0];
        assert!((dc - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_table_matches_libm() {
        for m in 0..32 {
            let reference = (m as f64 * std::f64::consts::PI / 16.0).cos();
            assert!((cos_pi16(m) - reference).abs() < 1e-15, "m = {m}");
        }
    }

    #[test]
    fn constant_gray_within_dc_bound() {
        for quality in [1, 4, 8] {
            let cfg = InitialCodecConfig::new(quality).unwrap();
            // DC error is at most step/2, spread over 8 samples of an
            // orthonormal 8x8 basis function.
            let bound = dc_step(&cfg, false) / 2.0 / 8.0 + 1e-12;
            for v in [0.1, 0.3, 0.77] {
                let img = RasterImage::filled(16, 24, [v; 3]);
                let out = decode_initial(&encode_initial(&img, &cfg)).unwrap();
                for &s in out.data() {
                    assert!((s - v).abs() <= bound, "q{quality} v{v}: {s}");
                }
            }
        }
    }

    #[test]
    fn constant_half_is_exact() {
        let img = RasterImage::filled(32, 32, [0.5; 3]);
        let cfg = InitialCodecConfig::new(3).unwrap();
        let out = decode_initial(&encode_initial(&img, &cfg)).unwrap();
        assert!(out.data().iter().all(|&s| (s - 0.5).abs() < 1e-3));
    }

    #[test]
    fn quality_eight_psnr_and_rate() {
        let img = scene(64, 64);
        let hi = encode_initial(&img, &InitialCodecConfig::new(8).unwrap());
        let lo = encode_initial(&img, &InitialCodecConfig::new(1).unwrap());
        assert!(hi.len() > lo.len());
        let out = decode_initial(&hi).unwrap();
        assert!(psnr(&img, &out).unwrap() >= 25.0);
    }

    #[test]
    fn deterministic_and_padded() {
        let img = scene(21, 13);
        let cfg = InitialCodecConfig::new(5).unwrap();
        let a = encode_initial(&img, &cfg);
        assert_eq!(a, encode_initial(&img, &cfg));
        let out = decode_initial(&a).unwrap();
        assert_eq!((out.width(), out.height()), (21, 13));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let img = scene(32, 32);
        let bytes = encode_initial(&img, &InitialCodecConfig::new(6).unwrap());
        for cut in [0, 4, 8, HEADER_BYTES + 2, bytes.len() - 1] {
            assert!(matches!(
                decode_initial(&bytes[..cut]),
                Err(CodecError::MalformedPayload(_))
            ), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_initial(&bad).is_err());
    }
}
