//! Decoder-side object masks and the 8×8 grid-map baseline.
//!
//! Masks are computed from the half-resolution initial reconstruction by
//! sliding a patch window, scoring each patch against the item prompt, and
//! bilinearly upsampling the normalized score grid to full resolution.

use thiserror::Error;

use crate::embedding::{cosine, Embedder, EmbeddingError};
use crate::image::RasterImage;
use crate::semantics::{SemanticDescription, SemanticItem, MAX_ITEMS};

pub const GRID_SIDE: usize = 8;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
pub const GRID_THRESHOLD: f64 = 0.2;
pub const DEFAULT_PATCH: usize = 16;
pub const DEFAULT_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("image {width}x{height} is smaller than the {min}x{min} patch")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("grid maps support at most {MAX_ITEMS} items, got {0}")]
    TooManyItems(usize),
    #[error("grid cell value {value} exceeds item count {items}")]
    CellOutOfRange { value: u8, items: usize },
    #[error("grid payload is {found} bytes, expected {expected}")]
    MalformedGrid { expected: usize, found: usize },
    #[error("invalid patch geometry: patch {patch}, stride {stride}")]
    InvalidGeometry { patch: usize, stride: usize },
    #[error("mask is {found:?}, expected {expected:?}")]
    MaskShape { expected: (usize, usize), found: (usize, usize) },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("segmenter failed: {0}")]
    Provider(String),
}

/// Soft per-pixel weights in `[0, 1]` for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub width: usize,
    pub height: usize,
    pub item: usize,
    pub data: Vec<f64>,
}

impl ObjectMask {
    pub fn filled(width: usize, height: usize, item: usize, v: f64) -> Self {
        Self {
            width,
            height,
            item,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn threshold(&self, t: f64) -> Vec<bool> {
        self.data.iter().map(|&v| v >= t).collect()
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let xs: Vec<f64> = (0..self.width).map(|i| i as f64).collect();
        let ys: Vec<f64> = (0..self.height).map(|i| i as f64).collect();
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let data = bilinear(&self.data, &xs, &ys, width, height, |x| (x as f64 + 0.5) * sx - 0.5, |y| {
            (y as f64 + 0.5) * sy - 0.5
        });
        Self {
            width,
            height,
            item: self.item,
            data,
        }
    }
}

/// Intersection over union of two binary masks.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Window offsets covering `0..n`, the last one flush with the border.
fn patch_offsets(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n - patch).step_by(stride).collect();
    if *v.last().unwrap() != n - patch {
        v.push(n - patch);
    }
    v
}

/// Linear interpolation weights for `u` against sorted knot positions.
fn interp(knots: &[f64], u: f64) -> (usize, usize, f64) {
    if knots.len() == 1 || u <= knots[0] {
        return (0, 0, 0.0);
    }
    let last = knots.len() - 1;
    if u >= knots[last] {
        return (last, last, 0.0);
    }
    let i = knots.partition_point(|&k| k <= u) - 1;
    let t = (u - knots[i]) / (knots[i + 1] - knots[i]);
    (i, i + 1, t)
}

fn bilinear(
    grid: &[f64],
    xs: &[f64],
    ys: &[f64],
    width: usize,
    height: usize,
    to_x: impl Fn(usize) -> f64,
    to_y: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let gw = xs.len();
    let cols: Vec<_> = (0..width).map(|x| interp(xs, to_x(x))).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, ty) = interp(ys, to_y(y));
        for &(x0, x1, tx) in &cols {
            let top = grid[y0 * gw + x0] * (1.0 - tx) + grid[y0 * gw + x1] * tx;
            let bot = grid[y1 * gw + x0] * (1.0 - tx) + grid[y1 * gw + x1] * tx;
            out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    out
}

/// Patch/text similarity mask from the half-resolution reconstruction,
/// returned at twice the input resolution.
pub fn similarity_mask(
    img: &RasterImage,
    item_index: usize,
    item: &SemanticItem,
    embedder: &dyn Embedder,
    patch: usize,
    stride: usize,
) -> Result<ObjectMask, SegmentationError> {
    if patch == 0 || stride == 0 {
        return Err(SegmentationError::InvalidGeometry { patch, stride });
    }
    let (w, h) = (img.width(), img.height());
    if w < patch || h < patch {
        return Err(SegmentationError::ImageTooSmall {
            width: w,
            height: h,
            min: patch,
        });
    }
    let text = embedder.embed_text(&item.prompt())?;
    let ox = patch_offsets(w, patch, stride);
    let oy = patch_offsets(h, patch, stride);
    let mut sims = Vec::with_capacity(ox.len() * oy.len());
    for &y in &oy {
        for &x in &ox {
            let crop = img.crop(x, y, patch, patch).expect("patch inside image");
            sims.push(cosine(&embedder.embed_image(&crop)?, &text)?);
        }
    }
    let (lo, hi) = sims
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &s| (l.min(s), u.max(s)));
    let (fw, fh) = (2 * w, 2 * h);
    if hi - lo < 1e-12 {
        return Ok(ObjectMask::filled(fw, fh, item_index, 0.5));
    }
    let grid: Vec<f64> = sims.iter().map(|s| (s - lo) / (hi - lo)).collect();
    let centre = |o: &usize| *o as f64 + patch as f64 / 2.0 - 0.5;
    let xs: Vec<f64> = ox.iter().map(centre).collect();
    let ys: Vec<f64> = oy.iter().map(centre).collect();
    let to_half = |p: usize| (p as f64 + 0.5) / 2.0 - 0.5;
    Ok(ObjectMask {
        width: fw,
        height: fh,
        item: item_index,
        data: bilinear(&grid, &xs, &ys, fw, fh, to_half, to_half),
    })
}

/// Produces a full-resolution mask for one item of the description.
pub trait Segmenter: Send + Sync {
    fn segment(
        &self,
        half_res: &RasterImage,
        item_index: usize,
        item: &SemanticItem,
    ) -> Result<ObjectMask, SegmentationError>;
}

pub struct SimilaritySegmenter<E> {
    pub embedder: E,
    pub patch: usize,
    pub stride: usize,
}

impl<E: Embedder> SimilaritySegmenter<E> {
    pub fn new(embedder: E) -> Self {
        Self {
            embedder,
            patch: DEFAULT_PATCH,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl<E: Embedder> Segmenter for SimilaritySegmenter<E> {
    fn segment(
        &self,
        half_res: &RasterImage,
        item_index: usize,
        item: &SemanticItem,
    ) -> Result<ObjectMask, SegmentationError> {
        similarity_mask(half_res, item_index, item, &self.embedder, self.patch, self.stride)
    }
}

/// 8×8 cell-to-item assignment; 0 is background, items are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    pub cells: [u8; GRID_CELLS],
}

impl GridMap {
    pub fn filled(v: u8) -> Self {
        Self { cells: [v; GRID_CELLS] }
    }

    pub fn get(&self, cx: usize, cy: usize) -> u8 {
        self.cells[cy * GRID_SIDE + cx]
    }
}

fn cell_span(i: usize, n: usize) -> (usize, usize) {
    (i * n / GRID_SIDE, (i + 1) * n / GRID_SIDE)
}

/// Encoder-side grid assignment against item names.
pub fn grid_assign(
    img: &RasterImage,
    d: &SemanticDescription,
    embedder: &dyn Embedder,
) -> Result<GridMap, SegmentationError> {
    let (w, h) = (img.width(), img.height());
    if w < GRID_SIDE || h < GRID_SIDE {
        return Err(SegmentationError::ImageTooSmall {
            width: w,
            height: h,
            min: GRID_SIDE,
        });
    }
    if d.items.len() > MAX_ITEMS {
        return Err(SegmentationError::TooManyItems(d.items.len()));
    }
    let texts = d
        .items
        .iter()
        .map(|it| embedder.embed_text(&it.name))
        .collect::<Result<Vec<_>, _>>()?;
    let mut g = GridMap::filled(0);
    for cy in 0..GRID_SIDE {
        let (y0, y1) = cell_span(cy, h);
        for cx in 0..GRID_SIDE {
            let (x0, x1) = cell_span(cx, w);
            let cell = img.crop(x0, y0, x1 - x0, y1 - y0).expect("cell inside image");
            let e = embedder.embed_image(&cell)?;
            let mut best = (0u8, f64::NEG_INFINITY);
            for (j, t) in texts.iter().enumerate() {
                let s = cosine(&e, t)?;
                if s > best.1 {
                    best = (j as u8 + 1, s);
                }
            }
            g.cells[cy * GRID_SIDE + cx] = if best.1 < GRID_THRESHOLD { 0 } else { best.0 };
        }
    }
    Ok(g)
}

pub fn bits_per_cell(items: usize) -> usize {
    (usize::BITS - items.leading_zeros()) as usize
}

/// Exact bit cost of a grid map for `items` objects.
pub fn grid_bits(items: usize) -> usize {
    GRID_CELLS * bits_per_cell(items)
}

/// Packs cells MSB-first with `ceil(log2(J+1))` bits each.
pub fn grid_encode(g: &GridMap, items: usize) -> Result<Vec<u8>, SegmentationError> {
    if items > MAX_ITEMS {
        return Err(SegmentationError::TooManyItems(items));
    }
    let b = bits_per_cell(items);
    let mut out = vec![0u8; grid_bits(items).div_ceil(8)];
    let mut pos = 0;
    for &v in &g.cells {
        if v as usize > items {
            return Err(SegmentationError::CellOutOfRange { value: v, items });
        }
        for k in (0..b).rev() {
            if (v >> k) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

pub fn grid_decode(bytes: &[u8], items: usize) -> Result<GridMap, SegmentationError> {
    if items > MAX_ITEMS {
        return Err(SegmentationError::TooManyItems(items));
    }
    let expected = grid_bits(items).div_ceil(8);
    if bytes.len() != expected {
        return Err(SegmentationError::MalformedGrid {
            expected,
            found: bytes.len(),
        });
    }
    let b = bits_per_cell(items);
    let mut g = GridMap::filled(0);
    let mut pos = 0;
    for cell in g.cells.iter_mut() {
        let mut v = 0u8;
        for _ in 0..b {
            v = (v << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1);
            pos += 1;
        }
        if v as usize > items {
            return Err(SegmentationError::CellOutOfRange { value: v, items });
        }
        *cell = v;
    }
    Ok(g)
}

/// Binary mask of the cells assigned to `item`, nearest-neighbour scaled.
pub fn grid_to_mask(g: &GridMap, item: usize, width: usize, height: usize) -> ObjectMask {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let cy = y * GRID_SIDE / height;
        for x in 0..width {
            let cx = x * GRID_SIDE / width;
            data.push(if g.get(cx, cy) as usize == item { 1.0 } else { 0.0 });
        }
    }
    ObjectMask {
        width,
        height,
        item,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedding, FixtureEmbedder, ToyEmbedder};
    use proptest::prelude::*;

    fn red_blue(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, |x, _| if x < w / 2 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] })
    }

    fn red_embedder() -> FixtureEmbedder<ToyEmbedder> {
        let red = ToyEmbedder.embed_image(&RasterImage::filled(4, 4, [1.0, 0.0, 0.0])).unwrap();
        FixtureEmbedder::new(ToyEmbedder).with_text("red", red)
    }

    #[test]
    fn two_region_mask() {
        let img = red_blue(32, 32);
        let item = SemanticItem::new("red", "");
        let m = similarity_mask(&img, 1, &item, &red_embedder(), 16, 8).unwrap();
        assert_eq!((m.width, m.height), (64, 64));
        let left: f64 = (0..64).flat_map(|y| (0..32).map(move |x| (x, y))).map(|(x, y)| m.get(x, y)).sum();
        let right: f64 = (0..64).flat_map(|y| (32..64).map(move |x| (x, y))).map(|(x, y)| m.get(x, y)).sum();
        assert!(left > right);
        let truth: Vec<bool> = (0..64 * 64).map(|i| i % 64 < 32).collect();
        assert!(iou(&m.threshold(0.5), &truth) >= 0.7);
        assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_image_gives_half_mask() {
        let img = RasterImage::filled(20, 18, [0.3, 0.3, 0.3]);
        let m = similarity_mask(&img, 1, &SemanticItem::new("sky", "blue"), &ToyEmbedder, 16, 8).unwrap();
        assert_eq!((m.width, m.height), (40, 36));
        assert!(m.data.iter().all(|&v| v == 0.5));
        assert!(matches!(
            similarity_mask(&RasterImage::filled(8, 8, [0.0; 3]), 1, &SemanticItem::new("a", ""), &ToyEmbedder, 16, 8),
            Err(SegmentationError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn offsets_cover_border() {
        assert_eq!(patch_offsets(32, 16, 8), vec![0, 8, 16]);
        assert_eq!(patch_offsets(20, 16, 8), vec![0, 4]);
        assert_eq!(patch_offsets(16, 16, 8), vec![0]);
    }

    #[test]
    fn grid_assignment_cases() {
        let img = red_blue(64, 64);
        let one = SemanticDescription::new(vec![SemanticItem::new("red", "")], "x").unwrap();
        // every cell is either pure red or pure blue; cos(red, blue) = 1/3 > 0.2
        assert_eq!(grid_assign(&img, &one, &red_embedder()).unwrap(), GridMap::filled(1));

        let mut far = vec![0.0; 64];
        far[63] = 1.0;
        let below = FixtureEmbedder::new(ToyEmbedder).with_text("red", Embedding::new(far).unwrap());
        assert_eq!(grid_assign(&img, &one, &below).unwrap(), GridMap::filled(0));

        let blue = ToyEmbedder.embed_image(&RasterImage::filled(4, 4, [0.0, 0.0, 1.0])).unwrap();
        let two = SemanticDescription::new(
            vec![SemanticItem::new("red", ""), SemanticItem::new("blue", "")],
            "x",
        )
        .unwrap();
        let e = red_embedder().with_text("blue", blue);
        let g = grid_assign(&img, &two, &e).unwrap();
        for cy in 0..8 {
            for cx in 0..8 {
                assert_eq!(g.get(cx, cy), if cx < 4 { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn grid_costs() {
        assert_eq!(grid_encode(&GridMap::filled(1), 1).unwrap().len(), 8);
        assert_eq!(grid_bits(1), 64);
        assert_eq!(grid_encode(&GridMap::filled(3), 3).unwrap().len(), 16);
        assert_eq!(grid_bits(3), 128);
        assert_eq!(grid_bits(4), 192);
        assert_eq!(grid_bits(8), 256);
        assert!(matches!(
            grid_encode(&GridMap::filled(2), 1),
            Err(SegmentationError::CellOutOfRange { value: 2, items: 1 })
        ));
    }

    #[test]
    fn grid_masks() {
        assert!(grid_to_mask(&GridMap::filled(2), 2, 64, 64).data.iter().all(|&v| v == 1.0));
        assert!(grid_to_mask(&GridMap::filled(1), 2, 64, 64).data.iter().all(|&v| v == 0.0));
        let mut g = GridMap::filled(0);
        g.cells[2 * 8 + 5] = 3;
        let m = grid_to_mask(&g, 3, 64, 64);
        assert_eq!(m.data.iter().sum::<f64>(), 64.0);
        for y in 16..24 {
            for x in 40..48 {
                assert_eq!(m.get(x, y), 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn grid_round_trip(items in 0usize..=8, seed in prop::collection::vec(any::<u8>(), 64)) {
            let mut g = GridMap::filled(0);
            for (c, s) in g.cells.iter_mut().zip(&seed) {
                *c = (*s as usize % (items + 1)) as u8;
            }
            let bytes = grid_encode(&g, items).unwrap();
            prop_assert_eq!(bytes.len() * 8, grid_bits(items));
            prop_assert_eq!(grid_decode(&bytes, items).unwrap(), g);
        }
    }
}
