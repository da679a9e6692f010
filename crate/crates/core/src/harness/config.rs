//! Run configuration, read from a JSON object.
//!
//! Every key is optional; unknown keys are rejected. Relative paths are
//! resolved against the directory holding the config file.
//!
//! ```json
//! {
//!   "dataset": "crates/core/data/corpus",
//!   "fixtures": null,
//!   "embedder": "fixture",
//!   "segmenter": "similarity",
//!   "describer": "fixture",
//!   "gateway_url": "http://127.0.0.1:8800",
//!   "quality": 3,
//!   "qualities": [1, 2, 3, 4, 5],
//!   "denoiser_model": "crates/core/data/models/denoiser.sgdn",
//!   "steps_model": "crates/core/data/models/steps.sgcm",
//!   "cfg_model": "crates/core/data/models/cfg.sgcm",
//!   "seed": 0,
//!   "mode": "full",
//!   "output_dir": "out",
//!   "workers": 1,
//!   "stage_a_strength": 0.6,
//!   "masked_strength": 0.3,
//!   "metric_ranges": null,
//!   "train": { "scenes": 120, "val_fraction": 0.2, "learning_rate": 0.2 },
//!   "timing": { "images": 20, "repetitions": 5, "aggregate": "median" }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::diffusion::{MASKED_STRENGTH, STAGE_A_STRENGTH};
use crate::pipeline::Mode;

pub fn default_models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("models")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderChoice {
    Toy,
    /// Toy embedder with palette-paired item texts.
    Fixture,
    Gateway,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterChoice {
    Similarity,
    Gateway,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriberChoice {
    Fixture,
    Gateway,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Median,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Training images: this many generated scenes when `dataset` is null.
    pub scenes: usize,
    pub dataset: Option<PathBuf>,
    pub val_fraction: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Denoiser training.
    pub denoiser_scenes: usize,
    pub denoiser_iterations: usize,
    pub denoiser_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenes: 120,
            dataset: None,
            val_fraction: 0.2,
            learning_rate: 0.2,
            epochs: 200,
            batch_size: 16,
            patience: 20,
            denoiser_scenes: 400,
            denoiser_iterations: 15_000,
            denoiser_learning_rate: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Number of leading images (sorted by name) to time.
    pub images: usize,
    pub repetitions: usize,
    pub aggregate: Aggregate,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            images: 20,
            repetitions: 5,
            aggregate: Aggregate::Median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Description fixtures; defaults to `descriptions.tsv` in the dataset.
    pub fixtures: Option<PathBuf>,
    pub embedder: EmbedderChoice,
    pub segmenter: SegmenterChoice,
    pub describer: DescriberChoice,
    pub gateway_url: String,
    pub quality: u8,
    pub qualities: Vec<u8>,
    pub denoiser_model: PathBuf,
    pub steps_model: PathBuf,
    pub cfg_model: PathBuf,
    pub seed: u64,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub stage_a_strength: f64,
    pub masked_strength: f64,
    /// Metric range table; the built-in table when null.
    pub metric_ranges: Option<PathBuf>,
    pub train: TrainConfig,
    pub timing: TimingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let models = default_models_dir();
        Self {
            dataset: crate::scenes::default_corpus_dir(),
            fixtures: None,
            embedder: EmbedderChoice::Fixture,
            segmenter: SegmenterChoice::Similarity,
            describer: DescriberChoice::Fixture,
            gateway_url: "http://127.0.0.1:8800".into(),
            quality: 3,
            qualities: vec![1, 2, 3, 4, 5],
            denoiser_model: models.join("denoiser.sgdn"),
            steps_model: models.join("steps.sgcm"),
            cfg_model: models.join("cfg.sgcm"),
            seed: 0,
            mode: Mode::Full,
            output_dir: PathBuf::from("out"),
            workers: 1,
            stage_a_strength: STAGE_A_STRENGTH,
            masked_strength: MASKED_STRENGTH,
            metric_ranges: None,
            train: TrainConfig::default(),
            timing: TimingConfig::default(),
        }
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.dataset,
            &mut cfg.denoiser_model,
            &mut cfg.steps_model,
            &mut cfg.cfg_model,
            &mut cfg.output_dir,
        ] {
            resolve(base, p);
        }
        if let Some(f) = cfg.fixtures.as_mut() {
            resolve(base, f);
        }
        if let Some(m) = cfg.metric_ranges.as_mut() {
            resolve(base, m);
        }
        if let Some(d) = cfg.train.dataset.as_mut() {
            resolve(base, d);
        }
        Ok(cfg)
    }

    /// Checks value ranges; paths are checked when a command needs them.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(1..=8).contains(&self.quality) {
            return bad(format!("quality {} outside 1..=8", self.quality));
        }
        if self.qualities.is_empty() || self.qualities.iter().any(|q| !(1..=8).contains(q)) {
            return bad(format!("qualities {:?} must be non-empty values in 1..=8", self.qualities));
        }
        for (name, v) in [("stage_a_strength", self.stage_a_strength), ("masked_strength", self.masked_strength)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.timing.repetitions == 0 || self.timing.images == 0 {
            return bad("timing needs at least one image and one repetition".into());
        }
        if !(0.0..1.0).contains(&self.train.val_fraction) || self.train.val_fraction == 0.0 {
            return bad(format!("val_fraction {} outside (0, 1)", self.train.val_fraction));
        }
        Ok(())
    }

    pub fn require_path(p: &Path) -> Result<(), HarnessError> {
        if p.exists() {
            Ok(())
        } else {
            Err(HarnessError::MissingPath(p.display().to_string()))
        }
    }

    /// Hash of everything that changes oracle labels.
    pub fn label_hash(&self, image_ids: &[String]) -> String {
        let key = serde_json::json!({
            "dataset": self.train.dataset,
            "scenes": self.train.scenes,
            "images": image_ids,
            "embedder": self.embedder,
            "segmenter": self.segmenter,
            "quality": self.quality,
            "denoiser": file_digest(&self.denoiser_model),
            "seed": self.seed,
            "stage_a_strength": self.stage_a_strength,
            "masked_strength": self.masked_strength,
        });
        let mut h = Sha256::new();
        h.update(key.to_string().as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }
}

fn file_digest(p: &Path) -> Option<String> {
    std::fs::read(p).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse(r#"{"quality": 5, "mode": "no_cad", "timing": {"repetitions": 3}}"#).unwrap();
        assert_eq!(c.quality, 5);
        assert_eq!(c.mode, Mode::NoCad);
        assert_eq!(c.timing.repetitions, 3);
        assert_eq!(c.timing.images, 20);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse(r#"{"qualty": 5}"#).is_err());
        assert!(RunConfig::parse(r#"{"mode": "fast"}"#).is_err());
        let c = RunConfig::parse(r#"{"quality": 9}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn label_hash_tracks_inputs() {
        let ids = vec!["a".to_string()];
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.label_hash(&ids), b.label_hash(&ids));
        b.quality = 4;
        assert_ne!(a.label_hash(&ids), b.label_hash(&ids));
        assert_ne!(a.label_hash(&ids), a.label_hash(&["b".to_string()]));
    }
}
