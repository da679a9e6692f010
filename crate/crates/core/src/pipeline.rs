//! End-to-end encode and decode.
//!
//! Encode: describe → serialize semantics → (grid map in `no_clipseg`) →
//! half-resolution latent → pack.
//!
//! Decode: unpack → initial decode → features → controller plan (or
//! override / fixed baseline) → 2× conditional refinement under the overall
//! text → one masked refinement per item, in description order.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::bitstream::{check_dimensions, CompressedImage};
use crate::controller::{to_plan, ControllerError, ControllerModel, DiffusionPlan, Role};
use crate::diffusion::{refine_masked, refine_stage_a, Denoiser, NoiseSchedule, MASKED_STRENGTH, STAGE_A_STRENGTH};
use crate::embedding::{Embedder, Embedding};
use crate::features::{raw_features, FeatureVector};
use crate::image::RasterImage;
use crate::initial_codec::{decode_initial, downsample_half, encode_initial, InitialCodecConfig};
use crate::segmentation::{grid_assign, grid_decode, grid_encode, grid_to_mask, Segmenter};
use crate::semantics::{self, Describer, SemanticDescription};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Describe,
    Semantics,
    GridMap,
    InitialEncode,
    Pack,
    Unpack,
    InitialDecode,
    Features,
    Controller,
    StageA,
    Segmentation,
    MaskedRefine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Describe => "describe",
            Stage::Semantics => "semantics",
            Stage::GridMap => "grid_map",
            Stage::InitialEncode => "initial_encode",
            Stage::Pack => "pack",
            Stage::Unpack => "unpack",
            Stage::InitialDecode => "initial_decode",
            Stage::Features => "features",
            Stage::Controller => "controller",
            Stage::StageA => "stage_a",
            Stage::Segmentation => "segmentation",
            Stage::MaskedRefine => "masked_refine",
        }
    }

    /// Stages whose failures come from the input rather than the program.
    pub fn is_data_stage(self) -> bool {
        matches!(
            self,
            Stage::Validate | Stage::Describe | Stage::Semantics | Stage::Unpack | Stage::InitialDecode
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: BoxError,
}

fn at<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

/// Ablation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Decoder-side segmentation and adaptive plans.
    Full,
    /// Encoder-side 8×8 grid map, charged to the bitstream.
    NoClipseg,
    /// Fixed (40, 4) plan.
    NoCad,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoClipseg, Mode::NoCad];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoClipseg => "no_clipseg",
            Mode::NoCad => "no_cad",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}, expected full, no_clipseg or no_cad"))
    }
}

/// The three external capabilities a codec run needs.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub describer: Arc<dyn Describer>,
}

/// The two trained MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub steps: ControllerModel,
    pub cfg: ControllerModel,
}

impl Controller {
    pub fn new(steps: ControllerModel, cfg: ControllerModel) -> Result<Self, ControllerError> {
        if steps.role != Role::Steps || cfg.role != Role::Cfg {
            return Err(ControllerError::SchemaMismatch);
        }
        Ok(Self { steps, cfg })
    }

    pub fn plan(&self, raw: &FeatureVector) -> Result<DiffusionPlan, ControllerError> {
        to_plan(self.steps.predict(raw)?, self.cfg.predict(raw)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EncodeTimings {
    pub describe: f64,
    pub grid_map: f64,
    pub initial_encode: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub compressed: CompressedImage,
    pub description: SemanticDescription,
    pub timings: EncodeTimings,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

pub fn encode(
    img: &RasterImage,
    mode: Mode,
    quality: u8,
    providers: &Providers,
) -> Result<Encoded, PipelineError> {
    let start = Instant::now();
    let (w, h) = (img.width() as u32, img.height() as u32);
    check_dimensions(w, h).map_err(at(Stage::Validate))?;
    let codec = InitialCodecConfig::new(quality).map_err(at(Stage::Validate))?;

    let t = Instant::now();
    let description = providers.describer.describe(img).map_err(at(Stage::Describe))?;
    let semantics = semantics::serialize(&description).map_err(at(Stage::Semantics))?;
    let describe = secs(t);

    let t = Instant::now();
    let grid_map = if mode == Mode::NoClipseg {
        let g = grid_assign(img, &description, providers.embedder.as_ref()).map_err(at(Stage::GridMap))?;
        Some(grid_encode(&g, description.items.len()).map_err(at(Stage::GridMap))?)
    } else {
        None
    };
    let grid_time = secs(t);

    let t = Instant::now();
    let half = downsample_half(img).map_err(at(Stage::InitialEncode))?;
    let latent = encode_initial(&half, &codec);
    let initial_encode = secs(t);

    let compressed = CompressedImage {
        width: w,
        height: h,
        semantics,
        grid_map,
        latent,
    };
    Ok(Encoded {
        compressed,
        description,
        timings: EncodeTimings {
            describe,
            grid_map: grid_time,
            initial_encode,
            total: secs(start),
        },
    })
}

/// Where the decode plan came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Controller,
    Override,
    Baseline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DecodeTimings {
    pub initial_decode: f64,
    pub features: f64,
    pub controller: f64,
    pub stage_a: f64,
    pub segmentation: f64,
    pub masked_refine: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeReport {
    pub steps: u32,
    pub cfg: f64,
    pub plan_source: PlanSource,
    pub items_refined: usize,
    pub grid_masks: bool,
    pub timings: DecodeTimings,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: RasterImage,
    /// The bicubic-upsampled initial reconstruction from the same stream.
    pub initial_upsampled: RasterImage,
    pub report: DecodeReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderSettings {
    pub stage_a_strength: f64,
    pub masked_strength: f64,
    pub seed: u64,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            stage_a_strength: STAGE_A_STRENGTH,
            masked_strength: MASKED_STRENGTH,
            seed: 0,
        }
    }
}

/// Everything the decoder needs besides the bitstream.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub providers: &'a Providers,
    pub controller: Option<&'a Controller>,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub settings: DecoderSettings,
}

#[derive(Debug, Error)]
#[error("{0}")]
struct Message(String);

/// Text embedded for the 2× stage: the overall description, or the
/// alignment text when the overall field is blank.
pub fn overall_text(d: &SemanticDescription) -> String {
    if d.overall.trim().is_empty() {
        d.alignment_text()
    } else {
        d.overall.clone()
    }
}

impl Decoder<'_> {
    pub fn decode(
        &self,
        c: &CompressedImage,
        mode: Mode,
        overrides: Option<DiffusionPlan>,
    ) -> Result<Decoded, PipelineError> {
        let start = Instant::now();
        let mut tm = DecodeTimings::default();
        check_dimensions(c.width, c.height).map_err(at(Stage::Unpack))?;
        let d = semantics::deserialize(&c.semantics).map_err(at(Stage::Unpack))?;
        let grid = match &c.grid_map {
            Some(bytes) => Some(grid_decode(bytes, d.items.len()).map_err(at(Stage::Unpack))?),
            None => None,
        };

        let t = Instant::now();
        let x_init = decode_initial(&c.latent).map_err(at(Stage::InitialDecode))?;
        let (fw, fh) = (c.width as usize, c.height as usize);
        if (2 * x_init.width(), 2 * x_init.height()) != (fw, fh) {
            return Err(at(Stage::InitialDecode)(Message(format!(
                "latent decodes to {}x{}, header declares {fw}x{fh}",
                x_init.width(),
                x_init.height()
            ))));
        }
        tm.initial_decode = secs(t);

        let emb = self.providers.embedder.as_ref();
        let (plan, plan_source) = match (overrides, mode) {
            (Some(p), _) => (p, PlanSource::Override),
            (None, Mode::NoCad) => (DiffusionPlan::baseline(), PlanSource::Baseline),
            (None, _) => {
                let ctl = self
                    .controller
                    .ok_or_else(|| at(Stage::Controller)(Message("no controller models loaded".into())))?;
                let t = Instant::now();
                let raw = raw_features(&x_init, &d, emb).map_err(at(Stage::Features))?;
                tm.features = secs(t);
                let t = Instant::now();
                let p = ctl.plan(&raw).map_err(at(Stage::Controller))?;
                tm.controller = secs(t);
                (p, PlanSource::Controller)
            }
        };

        let t = Instant::now();
        let overall: Embedding = emb.embed_text(&overall_text(&d)).map_err(at(Stage::StageA))?;
        let s = &self.settings;
        let mut x = refine_stage_a(&x_init, &overall, &plan, self.denoiser, self.schedule, s.stage_a_strength, s.seed)
            .map_err(at(Stage::StageA))?;
        tm.stage_a = secs(t);

        let mut refined = 0;
        for (i, item) in d.items.iter().enumerate() {
            // an item without detail text has nothing to condition on
            if item.detail.trim().is_empty() {
                continue;
            }
            let t = Instant::now();
            let mask = match &grid {
                Some(g) => grid_to_mask(g, i + 1, fw, fh),
                None => self.providers.segmenter.segment(&x_init, i, item).map_err(at(Stage::Segmentation))?,
            };
            tm.segmentation += secs(t);
            let t = Instant::now();
            let text = emb.embed_text(&item.detail).map_err(at(Stage::MaskedRefine))?;
            let seed = s.seed.wrapping_add(1 + i as u64);
            x = refine_masked(&x, &text, &mask, &plan, self.denoiser, self.schedule, s.masked_strength, seed)
                .map_err(at(Stage::MaskedRefine))?;
            tm.masked_refine += secs(t);
            refined += 1;
        }
        tm.total = secs(start);
        Ok(Decoded {
            image: x,
            initial_upsampled: x_init.upsample2x_bicubic(),
            report: DecodeReport {
                steps: plan.steps,
                cfg: plan.cfg,
                plan_source,
                items_refined: refined,
                grid_masks: grid.is_some(),
                timings: tm,
            },
        })
    }
}
