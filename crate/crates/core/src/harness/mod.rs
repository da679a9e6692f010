//! Command orchestration behind the `sgic` binary.
//!
//! Each `cmd_*` function is deterministic given its inputs, config and
//! seed, apart from wall-clock fields. Image-level work runs on a rayon pool
//! sized by `workers`; results come back in input order.

mod config;
mod reports;
mod training;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

pub use config::{
    default_models_dir, Aggregate, DescriberChoice, EmbedderChoice, RunConfig, SegmenterChoice, TimingConfig,
    TrainConfig,
};
pub use reports::{
    aggregate_rows, check_ablation_csv, cmd_ablate, cmd_rd, cmd_timing, read_rows, write_rows, AggregateRow,
    ImageRow, ImageTiming, TimingReport, TimingRow, AGGREGATE_HEADER, CODEC_NAME, REFERENCE_DECODE_REDUCTION,
    REFERENCE_ENCODE_REDUCTION,
};
pub use training::{
    cmd_sweep, cmd_train, cmd_train_denoiser, controller_training_set, denoiser_examples, read_labels, write_labels,
    DenoiserSummary, LabeledImage, ModelSummary, SweepSummary, TrainSummary, CONTROLLER_SEED_BASE,
};

use crate::bitstream::{BitBudget, BitstreamError, CompressedImage};
use crate::controller::{ControllerError, ControllerModel, DiffusionPlan, ModelError};
use crate::diffusion::toy::ToyDenoiser;
use crate::diffusion::{make_schedule, DiffusionError, NoiseSchedule, BETA_MAX, BETA_MIN, DEFAULT_T};
use crate::embedding::{Embedder, EmbeddingError, ToyEmbedder};
use crate::features::FeatureError;
use crate::gateway::{self, GatewayClient, GatewayError};
use crate::image::{ImageError, RasterImage};
use crate::initial_codec::CodecError;
use crate::metrics::MetricError;
use crate::pipeline::{self, Controller, DecodeReport, Decoded, Decoder, DecoderSettings, Encoded, Mode, PipelineError, Providers};
use crate::scenes::{load_corpus, CorpusImage, PaletteEmbedder, SceneError, DESCRIPTIONS_FILE};
use crate::segmentation::{Segmenter, SimilaritySegmenter};
use crate::semantics::{Describer, FixtureDescriber, SemanticsError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("path does not exist: {0}")]
    MissingPath(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no usable oracle labels: {0}")]
    NoLabels(String),
    #[error("gradient check failed for the {role} model: relative error {error:.3e}")]
    GradientCheck { role: &'static str, error: f64 },
    #[error("schema check failed: {0}")]
    Schema(String),
}

impl HarnessError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 usage, 2 bad input data, 3 internal failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::MissingPath(_)
            | HarnessError::Io { .. }
            | HarnessError::Image(_)
            | HarnessError::Bitstream(_)
            | HarnessError::Codec(_)
            | HarnessError::Scene(_)
            | HarnessError::Semantics(_)
            | HarnessError::Model(_) => 2,
            HarnessError::Pipeline(e) if e.stage.is_data_stage() => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::MissingPath(_) => "missing_path",
            HarnessError::Io { .. } => "io",
            HarnessError::Image(_) => "image",
            HarnessError::Bitstream(_) => "bitstream",
            HarnessError::Codec(_) => "codec",
            HarnessError::Pipeline(_) => "pipeline",
            HarnessError::Scene(_) => "dataset",
            HarnessError::Semantics(_) => "semantics",
            HarnessError::Gateway(_) => "gateway",
            HarnessError::Embedding(_) => "embedding",
            HarnessError::Model(_) => "model",
            HarnessError::Controller(_) => "controller",
            HarnessError::Diffusion(_) => "diffusion",
            HarnessError::Metric(_) => "metric",
            HarnessError::Feature(_) => "features",
            HarnessError::Csv(_) => "csv",
            HarnessError::NoLabels(_) => "labels",
            HarnessError::GradientCheck { .. } => "gradient_check",
            HarnessError::Schema(_) => "schema",
        }
    }

    /// One machine-readable error line.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let HarnessError::Pipeline(e) = self {
            v["stage"] = e.stage.name().into();
        }
        v
    }
}

/// A dataset plus whatever description fixtures travel with it.
pub struct Dataset {
    pub images: Vec<CorpusImage>,
    pub fixtures: Option<FixtureDescriber>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }
}

/// Loads `cfg.dataset`, with fixtures from `cfg.fixtures` when set.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    RunConfig::require_path(&cfg.dataset)?;
    let (images, mut fixtures) = load_corpus(&cfg.dataset)?;
    if let Some(path) = &cfg.fixtures {
        RunConfig::require_path(path)?;
        fixtures = Some(FixtureDescriber::load(path)?);
    }
    Ok(Dataset { images, fixtures })
}

/// Fixture descriptions for a single image: `cfg.fixtures`, or the
/// fixture file sitting next to the image or in the dataset directory.
fn fixtures_for(cfg: &RunConfig, image_path: Option<&Path>) -> Result<Option<FixtureDescriber>, HarnessError> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Some(p) = &cfg.fixtures {
        RunConfig::require_path(p)?;
        candidates.push(p.clone());
    }
    if let Some(dir) = image_path.and_then(Path::parent) {
        candidates.push(dir.join(DESCRIPTIONS_FILE));
    }
    candidates.push(cfg.dataset.join(DESCRIPTIONS_FILE));
    match candidates.into_iter().find(|p| p.exists()) {
        Some(p) => Ok(Some(FixtureDescriber::load(&p)?)),
        None => Ok(None),
    }
}

struct Unavailable;

impl Describer for Unavailable {
    fn describe(&self, image: &RasterImage) -> Result<crate::semantics::SemanticDescription, SemanticsError> {
        Err(SemanticsError::FixtureMissing(image.content_hash()))
    }
}

/// Builds the embedder, segmenter and describer selected by `cfg`.
pub fn resolve_providers(cfg: &RunConfig, fixtures: Option<FixtureDescriber>) -> Result<Providers, HarnessError> {
    let uses_gateway = cfg.embedder == EmbedderChoice::Gateway
        || cfg.segmenter == SegmenterChoice::Gateway
        || cfg.describer == DescriberChoice::Gateway;
    let remote = if uses_gateway {
        Some(gateway::connect(&GatewayClient::new(&cfg.gateway_url))?)
    } else {
        None
    };
    let embedder: Arc<dyn Embedder> = match (cfg.embedder, &remote) {
        (EmbedderChoice::Toy, _) => Arc::new(ToyEmbedder),
        (EmbedderChoice::Fixture, _) => Arc::new(PaletteEmbedder::new(ToyEmbedder)?),
        (EmbedderChoice::Gateway, Some(r)) => gateway::embedder_or_toy(r),
        (EmbedderChoice::Gateway, None) => unreachable!("gateway connected above"),
    };
    let segmenter: Arc<dyn Segmenter> = match (cfg.segmenter, &remote) {
        (SegmenterChoice::Gateway, Some(r)) => gateway::segmenter_or_similarity(r, embedder.clone()),
        _ => Arc::new(SimilaritySegmenter::new(embedder.clone())),
    };
    let describer: Arc<dyn Describer> = match (cfg.describer, &remote) {
        (DescriberChoice::Gateway, Some(r)) => gateway::describer(r)?,
        _ => match fixtures {
            Some(f) => Arc::new(f),
            None => Arc::new(Unavailable),
        },
    };
    Ok(Providers {
        embedder,
        segmenter,
        describer,
    })
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(DEFAULT_T, BETA_MIN, BETA_MAX).expect("default schedule constants are valid")
}

/// Loaded providers and models for one run.
pub struct Runtime {
    pub config: RunConfig,
    pub providers: Providers,
    pub schedule: NoiseSchedule,
    denoiser: Option<ToyDenoiser>,
    controller: Option<Controller>,
}

impl Runtime {
    /// Validates `cfg` and loads every model file that exists; missing
    /// models are reported when a command needs them.
    pub fn new(cfg: RunConfig, fixtures: Option<FixtureDescriber>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let providers = resolve_providers(&cfg, fixtures)?;
        let denoiser = if cfg.denoiser_model.exists() {
            Some(ToyDenoiser::load(&cfg.denoiser_model)?)
        } else {
            None
        };
        let controller = if cfg.steps_model.exists() && cfg.cfg_model.exists() {
            Some(Controller::new(
                ControllerModel::load(&cfg.steps_model)?,
                ControllerModel::load(&cfg.cfg_model)?,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: cfg,
            providers,
            schedule: default_schedule(),
            denoiser,
            controller,
        })
    }

    pub fn with_denoiser(mut self, d: ToyDenoiser) -> Self {
        self.denoiser = Some(d);
        self
    }

    pub fn with_controller(mut self, c: Controller) -> Self {
        self.controller = Some(c);
        self
    }

    pub fn controller(&self) -> Option<&Controller> {
        self.controller.as_ref()
    }

    pub fn require_controller(&self) -> Result<&Controller, HarnessError> {
        self.controller.as_ref().ok_or_else(|| {
            HarnessError::MissingPath(format!(
                "{} / {}",
                self.config.steps_model.display(),
                self.config.cfg_model.display()
            ))
        })
    }

    pub fn decoder(&self) -> Result<Decoder<'_>, HarnessError> {
        let denoiser = self
            .denoiser
            .as_ref()
            .ok_or_else(|| HarnessError::MissingPath(self.config.denoiser_model.display().to_string()))?;
        Ok(Decoder {
            providers: &self.providers,
            controller: self.controller.as_ref(),
            denoiser,
            schedule: &self.schedule,
            settings: DecoderSettings {
                stage_a_strength: self.config.stage_a_strength,
                masked_strength: self.config.masked_strength,
                seed: self.config.seed,
            },
        })
    }

    pub fn encode(&self, img: &RasterImage, mode: Mode, quality: u8) -> Result<Encoded, HarnessError> {
        Ok(pipeline::encode(img, mode, quality, &self.providers)?)
    }

    pub fn decode(
        &self,
        c: &CompressedImage,
        mode: Mode,
        overrides: Option<DiffusionPlan>,
    ) -> Result<Decoded, HarnessError> {
        Ok(self.decoder()?.decode(c, mode, overrides)?)
    }

    fn pool(&self) -> Option<rayon::ThreadPool> {
        match rayon::ThreadPoolBuilder::new().num_threads(self.config.workers).build() {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("thread pool unavailable ({e}); using the global pool");
                None
            }
        }
    }

    /// Runs `f` inside a pool of `workers` threads.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self.pool() {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Maps `f` over `items` on `workers` threads, keeping input order.
    pub fn par_map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        use rayon::prelude::*;
        self.install(|| items.par_iter().map(&f).collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EncodeSummary {
    pub input: String,
    pub output: String,
    pub mode: Mode,
    pub quality: u8,
    pub width: u32,
    pub height: u32,
    pub bytes: usize,
    pub bpp: f64,
    pub header_bits: u64,
    pub semantics_bits: u64,
    pub grid_map_bits: u64,
    pub latent_bits: u64,
    pub flags: u8,
    pub encode_seconds: f64,
}

impl EncodeSummary {
    fn new(input: &Path, output: &Path, mode: Mode, quality: u8, e: &Encoded, bytes: usize) -> Self {
        let c = &e.compressed;
        let BitBudget {
            header_bits,
            semantics_bits,
            grid_map_bits,
            latent_bits,
        } = c.budget();
        Self {
            input: input.display().to_string(),
            output: output.display().to_string(),
            mode,
            quality,
            width: c.width,
            height: c.height,
            bytes,
            bpp: c.bpp(),
            header_bits,
            semantics_bits,
            grid_map_bits,
            latent_bits,
            flags: c.flags(),
            encode_seconds: e.timings.total,
        }
    }
}

/// Encodes one PNG/PPM image to a `.sgic` file.
pub fn cmd_encode(cfg: RunConfig, input: &Path, output: &Path) -> Result<EncodeSummary, HarnessError> {
    RunConfig::require_path(input)?;
    let fixtures = fixtures_for(&cfg, Some(input))?;
    let rt = Runtime::new(cfg, fixtures)?;
    let img = RasterImage::load(input)?;
    let (mode, quality) = (rt.config.mode, rt.config.quality);
    let encoded = rt.encode(&img, mode, quality)?;
    let bytes = encoded.compressed.pack()?;
    write_file(output, &bytes)?;
    Ok(EncodeSummary::new(input, output, mode, quality, &encoded, bytes.len()))
}

#[derive(Clone, Debug, Serialize)]
pub struct DecodeSummary {
    pub input: String,
    pub output: String,
    pub mode: Mode,
    pub bpp: f64,
    #[serde(flatten)]
    pub report: DecodeReport,
}

/// Decodes a `.sgic` file; `overrides` replaces the controller plan.
pub fn cmd_decode(
    cfg: RunConfig,
    input: &Path,
    output: &Path,
    overrides: Option<DiffusionPlan>,
) -> Result<DecodeSummary, HarnessError> {
    RunConfig::require_path(input)?;
    let bytes = std::fs::read(input).map_err(HarnessError::io(input))?;
    let compressed = CompressedImage::unpack(&bytes)?;
    // decoding never describes, so fixtures are not needed
    let rt = Runtime::new(cfg, None)?;
    let mode = rt.config.mode;
    let decoded = rt.decode(&compressed, mode, overrides)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    decoded.image.save(output)?;
    Ok(DecodeSummary {
        input: input.display().to_string(),
        output: output.display().to_string(),
        mode,
        bpp: compressed.bpp(),
        report: decoded.report,
    })
}

/// Writes the toy corpus (images plus description fixtures).
pub fn cmd_corpus(dir: &Path, count: usize) -> Result<Vec<String>, HarnessError> {
    let scenes = crate::scenes::write_corpus(dir, count)?;
    Ok((0..scenes.len()).map(crate::scenes::scene_file_name).collect())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(HarnessError::io(path))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
        assert_eq!(HarnessError::MissingPath("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Bitstream(BitstreamError::BadMagic).exit_code(), 2);
        assert_eq!(HarnessError::Schema("x".into()).exit_code(), 3);
        let j = HarnessError::Bitstream(BitstreamError::Truncated).to_json();
        assert_eq!(j["error"], "bitstream");
        assert_eq!(j["exit_code"], 2);
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
    }
}
