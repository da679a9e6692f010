//! Pixel containers shared by every stage of the codec.
//!
//! [`RasterImage`] is a planar RGB image with samples in `[0, 1]`.
//! [`ImageTensor`] carries the same layout without the range constraint and
//! is what the diffusion sampler works on.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("sample {index} = {value} is outside [0, 1]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("unsupported image file: {0}")]
    Unsupported(String),
    #[error("image codec error: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Planar RGB raster, samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Dimension(format!("{width}x{height} is empty")));
        }
        if data.len() != width * height * 3 {
            return Err(ImageError::Dimension(format!(
                "expected {} samples for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::SampleOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        let plane = width * height;
        let mut data = vec![0.0; plane * 3];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = clamp01(px[c]);
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[c * self.pixel_count() + y * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        [self.get(x, y, 0), self.get(x, y, 1), self.get(x, y, 2)]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, ImageError> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(ImageError::Dimension(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.pixel(self.width - 1 - x, y)
        })
    }

    /// Rotates 90 degrees clockwise.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.height, self.width);
        Self::from_fn(w, h, |x, y| self.pixel(y, self.height - 1 - x))
    }

    pub fn to_tensor(&self) -> ImageTensor {
        ImageTensor {
            channels: 3,
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixel_count() * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize_u8(self.get(x, y, c)));
                }
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageError::Dimension(format!(
                "expected {} bytes of RGB, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| {
            let i = (y * width + x) * 3;
            [
                rgb[i] as f64 / 255.0,
                rgb[i + 1] as f64 / 255.0,
                rgb[i + 2] as f64 / 255.0,
            ]
        }))
    }

    /// Hex SHA-256 over the dimensions and the 8-bit quantized samples.
    ///
    /// This is the key used by fixture files, so it only depends on what an
    /// 8-bit image file can represent.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"SGIC-IMG");
        hasher.update((self.width as u32).to_be_bytes());
        hasher.update((self.height as u32).to_be_bytes());
        hasher.update(self.to_rgb8());
        hex::encode(hasher.finalize())
    }

    /// Loads a PNG or binary PPM file as 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path).map_err(|e| match e {
            ::image::ImageError::IoError(io) => ImageError::Io(io),
            other => ImageError::Codec(other.to_string()),
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    /// Saves as PNG (`.png`) or binary PPM (`.ppm`).
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let format = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => ::image::ImageFormat::Png,
            Some("ppm") => ::image::ImageFormat::Pnm,
            _ => return Err(ImageError::Unsupported(path.display().to_string())),
        };
        let buf = ::image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.to_rgb8(),
        )
        .ok_or_else(|| ImageError::Codec("raw buffer size mismatch".into()))?;
        buf.save_with_format(path, format)
            .map_err(|e| ImageError::Codec(e.to_string()))
    }

    pub fn to_gray(&self) -> GrayImage {
        let n = self.pixel_count();
        let data = (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bicubic 2x upsampling, clamped back into `[0, 1]`.
    pub fn upsample2x_bicubic(&self) -> Self {
        self.to_tensor().upsample2x_bicubic().to_raster_clamped()
    }
}

/// Single-channel raster (luma), samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Planar multi-channel float tensor without a range constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn from_vec(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * width * height, "tensor size mismatch");
        Self {
            channels,
            width,
            height,
            data,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.width == other.width && self.height == other.height
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_raster_clamped(&self) -> RasterImage {
        assert_eq!(self.channels, 3, "raster conversion needs 3 channels");
        RasterImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| clamp01(v)).collect(),
        }
    }

    pub fn upsample2x_bicubic(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for c in 0..self.channels {
            out.extend(bicubic_upsample2x_plane(self.plane(c), w, h));
        }
        Self::from_vec(self.channels, w * 2, h * 2, out)
    }
}

#[inline]
pub fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn quantize_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic_weight(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0
    } else if d < 2.0 {
        ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for output index `o` when upsampling by 2.
fn upsample_taps(o: usize, n: usize) -> ([usize; 4], [f64; 4]) {
    let u = (o as f64 + 0.5) / 2.0 - 0.5;
    let base = u.floor() as isize;
    let mut idx = [0usize; 4];
    let mut w = [0.0; 4];
    for k in 0..4 {
        let s = base - 1 + k as isize;
        idx[k] = s.clamp(0, n as isize - 1) as usize;
        w[k] = cubic_weight(u - s as f64);
    }
    (idx, w)
}

fn bicubic_upsample2x_plane(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (ow, oh) = (w * 2, h * 2);
    let mut tmp = vec![0.0; ow * h];
    for x in 0..ow {
        let (idx, wt) = upsample_taps(x, w);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            tmp[y * ow + x] =
                wt[0] * row[idx[0]] + wt[1] * row[idx[1]] + wt[2] * row[idx[2]] + wt[3] * row[idx[3]];
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        let (idx, wt) = upsample_taps(y, h);
        for x in 0..ow {
            out[y * ow + x] = wt[0] * tmp[idx[0] * ow + x]
                + wt[1] * tmp[idx[1] * ow + x]
                + wt[2] * tmp[idx[2] * ow + x]
                + wt[3] * tmp[idx[3] * ow + x];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_samples() {
        let err = RasterImage::new(1, 1, vec![0.0, 1.5, 0.0]).unwrap_err();
        assert!(matches!(err, ImageError::SampleOutOfRange { index: 1, .. }));
    }

    #[test]
    fn bicubic_preserves_constants() {
        let img = RasterImage::filled(5, 3, [0.2, 0.4, 0.9]);
        let up = img.upsample2x_bicubic();
        assert_eq!((up.width(), up.height()), (10, 6));
        for (a, b) in up.data().iter().zip(
            RasterImage::filled(10, 6, [0.2, 0.4, 0.9]).data(),
        ) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_kernel_partitions_unity() {
        for &u in &[0.25, 0.75] {
            let s: f64 = (-1..3).map(|k| cubic_weight(u - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_and_flip_geometry() {
        let img = RasterImage::from_fn(3, 2, |x, y| [x as f64 / 2.0, y as f64, 0.0]);
        let r = img.rotate90();
        assert_eq!((r.width(), r.height()), (2, 3));
        // top-left of the rotated image is the bottom-left of the source
        assert_eq!(r.pixel(0, 0), img.pixel(0, 1));
        let f = img.flip_horizontal();
        assert_eq!(f.pixel(0, 0), img.pixel(2, 0));
    }

    #[test]
    fn png_round_trip_preserves_hash() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::from_fn(8, 4, |x, y| [x as f64 / 7.0, y as f64 / 3.0, 0.5]);
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = RasterImage::load(&path).unwrap();
        assert_eq!(back.content_hash(), img.content_hash());
        let ppm = dir.path().join("a.ppm");
        img.save(&ppm).unwrap();
        assert_eq!(RasterImage::load(&ppm).unwrap().to_rgb8(), img.to_rgb8());
    }
}
