//! Procedural toy scenes with known object layouts and descriptions.
//!
//! Every scene is a sky over a textured ground with one to three objects.
//! Rendering uses 4×4 supersampling so edges are anti-aliased like a camera
//! image. The generator is a pure function of its seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::embedding::{Embedder, Embedding, EmbeddingError};
use crate::image::{ImageError, RasterImage};
use crate::semantics::{FixtureDescriber, SemanticDescription, SemanticItem, SemanticsError};

pub const SCENE_SIDE: usize = 64;
pub const CORPUS_SIZE: usize = 20;
/// Seeds `0..CORPUS_SIZE` are the shipped corpus; training sets start here.
pub const TRAIN_SEED_BASE: u64 = 1_000;
pub const DESCRIPTIONS_FILE: &str = "descriptions.tsv";

pub fn default_corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("corpus")
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("corpus directory {0} holds no scene images")]
    EmptyCorpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Item names and the flat colour that dominates each item.
pub const PALETTE: [(&str, [f64; 3]); 11] = [
    ("yellow sun", [0.98, 0.84, 0.18]),
    ("white cloud", [0.96, 0.96, 0.98]),
    ("green tree", [0.12, 0.45, 0.16]),
    ("brick house", [0.72, 0.32, 0.22]),
    ("red ball", [0.92, 0.1, 0.12]),
    ("blue ball", [0.12, 0.22, 0.85]),
    ("orange ball", [0.98, 0.55, 0.1]),
    ("blue lake", [0.22, 0.42, 0.78]),
    ("purple box", [0.5, 0.22, 0.62]),
    ("green grass", [0.34, 0.62, 0.26]),
    ("yellow sand", [0.86, 0.76, 0.5]),
];

const SKY_TOP: [f64; 3] = [0.42, 0.62, 0.94];
const SKY_HORIZON: [f64; 3] = [0.76, 0.86, 0.98];
const TRUNK: [f64; 3] = [0.42, 0.28, 0.14];
const ROOF: [f64; 3] = [0.32, 0.18, 0.16];
const WINDOW: [f64; 3] = [0.95, 0.9, 0.55];

fn palette_color(name: &str) -> [f64; 3] {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c).expect("palette name")
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub image: RasterImage,
    pub description: SemanticDescription,
    /// Per-pixel owner: 0 is sky, `j + 1` is item `j` of the description.
    pub labels: Vec<u8>,
}

impl Scene {
    /// Ground-truth mask of item `j`.
    pub fn item_mask(&self, j: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == j + 1).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Cloud { cx: f64, cy: f64, r: f64 },
    Tree { cx: f64, base: f64, h: f64 },
    House { cx: f64, base: f64, w: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Box { cx: f64, base: f64, s: f64 },
}

fn in_triangle(px: f64, py: f64, apex: (f64, f64), half_base: f64, base_y: f64) -> bool {
    if py < apex.1 || py > base_y {
        return false;
    }
    let f = (py - apex.1) / (base_y - apex.1);
    (px - apex.0).abs() <= f * half_base
}

impl Shape {
    /// Colour at a point covered by the shape.
    fn color(&self, main: [f64; 3], x: f64, y: f64) -> Option<[f64; 3]> {
        match *self {
            Shape::Disk { cx, cy, r } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                (d2 <= r * r).then(|| {
                    // soft highlight toward the upper left
                    let hl = ((x - cx + 0.35 * r).powi(2) + (y - cy + 0.35 * r).powi(2)).sqrt() / r;
                    let k = 0.18 * (1.0 - hl).max(0.0);
                    [main[0] + k, main[1] + k, main[2] + k].map(|v| v.min(1.0))
                })
            }
            Shape::Cloud { cx, cy, r } => {
                let lobes = [(cx - r, cy + 0.2 * r, 0.75 * r), (cx, cy - 0.2 * r, r), (cx + r, cy + 0.2 * r, 0.7 * r)];
                lobes
                    .iter()
                    .any(|&(lx, ly, lr)| (x - lx).powi(2) + (y - ly).powi(2) <= lr * lr)
                    .then_some(main)
            }
            Shape::Tree { cx, base, h } => {
                let trunk_top = base - 0.3 * h;
                if (x - cx).abs() <= 0.09 * h && y >= trunk_top && y <= base {
                    return Some(TRUNK);
                }
                in_triangle(x, y, (cx, base - h), 0.38 * h, trunk_top).then_some(main)
            }
            Shape::House { cx, base, w } => {
                let wall_top = base - 0.7 * w;
                if (x - cx).abs() <= 0.5 * w && y >= wall_top && y <= base {
                    let (wx, wy) = (cx - 0.22 * w, wall_top + 0.3 * w);
                    if (x - wx).abs() <= 0.12 * w && (y - wy).abs() <= 0.12 * w {
                        return Some(WINDOW);
                    }
                    return Some(main);
                }
                in_triangle(x, y, (cx, wall_top - 0.45 * w), 0.62 * w, wall_top).then_some(ROOF)
            }
            Shape::Ellipse { cx, cy, rx, ry } => {
                (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0).then(|| {
                    let ripple = 0.05 * ((y - cy) * 1.6).sin();
                    main.map(|v| (v + ripple).clamp(0.0, 1.0))
                })
            }
            Shape::Box { cx, base, s } => {
                ((x - cx).abs() <= 0.5 * s && y >= base - s && y <= base).then(|| {
                    let stripe = (((base - y) / (s / 5.0)) as usize).is_multiple_of(2);
                    if stripe {
                        main
                    } else {
                        main.map(|v| (v + 0.16).min(1.0))
                    }
                })
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { cx, cy, .. } | Shape::Cloud { cx, cy, .. } | Shape::Ellipse { cx, cy, .. } => (cx, cy),
            Shape::Tree { cx, base, h } => (cx, base - 0.5 * h),
            Shape::House { cx, base, w } => (cx, base - 0.5 * w),
            Shape::Box { cx, base, s } => (cx, base - 0.5 * s),
        }
    }

    fn size_word(&self, side: f64) -> &'static str {
        let extent = match *self {
            Shape::Disk { r, .. } | Shape::Cloud { r, .. } => 2.0 * r,
            Shape::Tree { h, .. } => h,
            Shape::House { w, .. } => w,
            Shape::Ellipse { rx, .. } => 2.0 * rx,
            Shape::Box { s, .. } => s,
        };
        if extent > 0.33 * side {
            "large"
        } else if extent < 0.18 * side {
            "small"
        } else {
            "medium"
        }
    }
}

fn position_words(x: f64, y: f64, side: f64) -> String {
    let v = ["upper", "middle", "lower"][((3.0 * y / side) as usize).min(2)];
    let h = ["left", "center", "right"][((3.0 * x / side) as usize).min(2)];
    match (v, h) {
        ("middle", "center") => "in the center".to_string(),
        _ => format!("in the {v} {h}"),
    }
}

struct Object {
    name: &'static str,
    shape: Shape,
}

fn article(name: &str) -> &'static str {
    if name.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn join_list(parts: &[String]) -> String {
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

/// Generates the scene for `seed` at `side × side` pixels.
pub fn generate_scene(seed: u64, side: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5ce7e);
    let s = side as f64;
    let horizon = s * rng.random_range(0.42..0.62);
    let ground = if rng.random_bool(0.75) { "green grass" } else { "yellow sand" };

    let mut objects: Vec<Object> = Vec::new();
    let count = rng.random_range(1..=3);
    let mut kinds: Vec<usize> = (0..7).collect();
    for _ in 0..count {
        let k = kinds.remove(rng.random_range(0..kinds.len()));
        let cx = s * rng.random_range(0.18..0.82);
        let base = rng.random_range(horizon + 0.12 * s..0.95 * s);
        let obj = match k {
            0 => Object {
                name: "yellow sun",
                shape: Shape::Disk {
                    cx,
                    cy: rng.random_range(0.12 * s..(horizon - 0.12 * s).max(0.13 * s)),
                    r: s * rng.random_range(0.07..0.12),
                },
            },
            1 => Object {
                name: "white cloud",
                shape: Shape::Cloud {
                    cx,
                    cy: rng.random_range(0.12 * s..(horizon - 0.12 * s).max(0.13 * s)),
                    r: s * rng.random_range(0.07..0.1),
                },
            },
            2 => Object {
                name: "green tree",
                shape: Shape::Tree {
                    cx,
                    base,
                    h: s * rng.random_range(0.28..0.45),
                },
            },
            3 => Object {
                name: "brick house",
                shape: Shape::House {
                    cx,
                    base,
                    w: s * rng.random_range(0.22..0.34),
                },
            },
            4 => Object {
                name: ["red ball", "blue ball", "orange ball"][rng.random_range(0..3)],
                shape: Shape::Disk {
                    cx,
                    cy: base - 0.08 * s,
                    r: s * rng.random_range(0.06..0.1),
                },
            },
            5 => Object {
                name: "blue lake",
                shape: Shape::Ellipse {
                    cx,
                    cy: rng.random_range(horizon + 0.1 * s..0.88 * s),
                    rx: s * rng.random_range(0.14..0.24),
                    ry: s * rng.random_range(0.05..0.09),
                },
            },
            _ => Object {
                name: "purple box",
                shape: Shape::Box {
                    cx,
                    base,
                    s: s * rng.random_range(0.14..0.24),
                },
            },
        };
        objects.push(obj);
    }
    // paint far to near: sky objects first, then by vertical position
    objects.sort_by(|a, b| a.shape.center().1.total_cmp(&b.shape.center().1));

    let mut items: Vec<SemanticItem> = objects
        .iter()
        .map(|o| {
            let (x, y) = o.shape.center();
            SemanticItem::new(o.name, format!("{} {}", o.shape.size_word(s), position_words(x, y, s)))
        })
        .collect();
    items.push(SemanticItem::new(ground, "covering the ground below the horizon"));
    let ground_label = items.len() as u8;

    let ground_color = palette_color(ground);
    let noise = Normal::new(0.0, 0.035).expect("valid normal");
    let grain: Vec<f64> = (0..side * side).map(|_| noise.sample(&mut rng)).collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let sub = 4;
    let mut data = vec![0.0; 3 * side * side];
    let mut labels = vec![0u8; side * side];
    let n = side * side;
    for py in 0..side {
        for px in 0..side {
            let mut acc = [0.0; 3];
            let mut votes = vec![0usize; items.len() + 1];
            for sy in 0..sub {
                for sx in 0..sub {
                    let x = px as f64 + (sx as f64 + 0.5) / sub as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / sub as f64;
                    let (mut c, mut label) = if y < horizon {
                        let f = y / horizon;
                        (std::array::from_fn(|k| SKY_TOP[k] + f * (SKY_HORIZON[k] - SKY_TOP[k])), 0u8)
                    } else {
                        // banded ground texture
                        let band = 0.04 * ((x * 0.9 + phase).sin() * (y * 0.7).cos());
                        (ground_color.map(|v| v + band), ground_label)
                    };
                    for (j, o) in objects.iter().enumerate() {
                        if let Some(col) = o.shape.color(palette_color(o.name), x, y) {
                            c = col;
                            label = j as u8 + 1;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                    votes[label as usize] += 1;
                }
            }
            let i = py * side + px;
            let g = if labels_is_ground(&votes, ground_label) { grain[i] } else { 0.0 };
            for k in 0..3 {
                data[k * n + i] = (acc[k] / (sub * sub) as f64 + g).clamp(0.0, 1.0);
            }
            labels[i] = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l as u8)
                .unwrap_or(0);
        }
    }
    // quantize to what an 8-bit file stores so the in-memory scene and the
    // shipped PNG are the same image
    let image = RasterImage::new(side, side, data).expect("finite samples");
    let image = RasterImage::from_rgb8(side, side, &image.to_rgb8()).expect("matching buffer");

    let mut phrases: Vec<String> = objects.iter().map(|o| format!("{} {}", article(o.name), o.name)).collect();
    phrases.dedup();
    let overall = format!(
        "a simple outdoor scene with {} on {} under a blue sky",
        join_list(&phrases),
        ground.split_whitespace().last().unwrap_or(ground)
    );
    let description = SemanticDescription::new(items, overall).expect("generated description is valid");
    Scene {
        seed,
        image,
        description,
        labels,
    }
}

fn labels_is_ground(votes: &[usize], ground_label: u8) -> bool {
    votes[ground_label as usize] * 2 > votes.iter().sum::<usize>()
}

/// Wraps an embedder so item texts that start with a palette name embed as
/// that colour's image statistics. This gives the toy provider real
/// text/image agreement on generated scenes.
#[derive(Clone)]
pub struct PaletteEmbedder<E> {
    inner: E,
    colors: Vec<(&'static str, Embedding)>,
}

impl<E: Embedder> PaletteEmbedder<E> {
    pub fn new(inner: E) -> Result<Self, EmbeddingError> {
        let mut colors = Vec::with_capacity(PALETTE.len());
        for (name, rgb) in PALETTE {
            colors.push((name, inner.embed_image(&RasterImage::filled(16, 16, rgb))?));
        }
        // longest names first so prefixes cannot shadow them
        colors.sort_by_key(|(n, _)| std::cmp::Reverse(n.len()));
        Ok(Self { inner, colors })
    }
}

impl<E: Embedder> Embedder for PaletteEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        for (name, e) in &self.colors {
            if norm == *name || norm.starts_with(&format!("{name} ")) {
                return Ok(e.clone());
            }
        }
        self.inner.embed_text(text)
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, EmbeddingError> {
        self.inner.embed_image(image)
    }
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:02}.png")
}

/// Writes scenes `0..count` as PNGs plus the description fixture file.
pub fn write_corpus(dir: &Path, count: usize) -> Result<Vec<Scene>, SceneError> {
    std::fs::create_dir_all(dir)?;
    let mut fixtures = FixtureDescriber::new();
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(i as u64, SCENE_SIDE);
        scene.image.save(&dir.join(scene_file_name(i)))?;
        fixtures.insert_image(&scene.image, scene.description.clone());
        scenes.push(scene);
    }
    std::fs::write(dir.join(DESCRIPTIONS_FILE), fixtures.render())?;
    Ok(scenes)
}

/// A loaded image with a stable identifier (its file stem).
#[derive(Clone, Debug)]
pub struct CorpusImage {
    pub id: String,
    pub image: RasterImage,
}

/// Loads every `.png`/`.ppm` in `dir`, sorted by file name, and the
/// description fixtures if the directory has them.
pub fn load_corpus(dir: &Path) -> Result<(Vec<CorpusImage>, Option<FixtureDescriber>), SceneError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SceneError::EmptyCorpus(dir.display().to_string()));
    }
    let images = paths
        .iter()
        .map(|p| {
            Ok(CorpusImage {
                id: p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string(),
                image: RasterImage::load(p)?,
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    let fixture_path = dir.join(DESCRIPTIONS_FILE);
    let fixtures = if fixture_path.exists() {
        Some(FixtureDescriber::load(&fixture_path)?)
    } else {
        None
    };
    Ok((images, fixtures))
}
