//! Denoiser training, the oracle sweep and controller training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_dataset, Dataset, HarnessError, RunConfig, Runtime};
use crate::controller::{
    gradient_check, oracle_labels, train, ControllerModel, DiffusionPlan, Mlp, OracleLabel, Role, SweepGrid,
    TrainHyper, CFG_LAMBDA, STEP_LAMBDA,
};
use crate::diffusion::toy::{train_toy_denoiser, DenoiserExample, DenoiserHyper, DenoiserTrainReport};
use crate::embedding::Embedder;
use crate::features::{raw_features, FeatureNormalizer, FeatureVector, FEATURE_COUNT};
use crate::image::RasterImage;
use crate::initial_codec::{decode_initial, downsample_half, encode_initial, InitialCodecConfig};
use crate::metrics::perceptual_distance;
use crate::pipeline::{overall_text, Mode};
use crate::scenes::{generate_scene, CorpusImage, SCENE_SIDE, TRAIN_SEED_BASE};
use crate::semantics::FixtureDescriber;

/// First scene seed of the generated controller training set.
pub const CONTROLLER_SEED_BASE: u64 = 5000;

/// Initial-codec qualities whose reconstructions serve as denoiser guides.
const GUIDE_QUALITIES: [u8; 5] = [2, 3, 4, 5, 6];

/// Generated scenes `TRAIN_SEED_BASE..` as denoiser examples: bicubic
/// guides at several qualities, texts = overall description plus item
/// details.
pub fn denoiser_examples(count: usize, embedder: &dyn Embedder) -> Result<Vec<DenoiserExample>, HarnessError> {
    (0..count)
        .map(|i| {
            let sc = generate_scene(TRAIN_SEED_BASE + i as u64, SCENE_SIDE);
            let half = downsample_half(&sc.image)?;
            let guides = GUIDE_QUALITIES
                .iter()
                .map(|&q| {
                    let codec = InitialCodecConfig::new(q).expect("guide qualities are in range");
                    let recon = decode_initial(&encode_initial(&half, &codec))?;
                    Ok(recon.upsample2x_bicubic().to_tensor())
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let d = &sc.description;
            let mut texts = vec![embedder.embed_text(&overall_text(d))?];
            for item in d.items.iter().filter(|it| !it.detail.trim().is_empty()) {
                texts.push(embedder.embed_text(&item.detail)?);
            }
            Ok(DenoiserExample {
                image: sc.image.to_tensor(),
                guides,
                texts,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DenoiserSummary {
    pub path: String,
    pub images: usize,
    pub iterations: usize,
    pub parameters: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains the toy denoiser on generated scenes and writes it to
/// `cfg.denoiser_model`.
pub fn cmd_train_denoiser(cfg: RunConfig) -> Result<(DenoiserSummary, DenoiserTrainReport), HarnessError> {
    let rt = Runtime::new(cfg, None)?;
    let c = &rt.config;
    let examples = denoiser_examples(c.train.denoiser_scenes, rt.providers.embedder.as_ref())?;
    let hyper = DenoiserHyper {
        iterations: c.train.denoiser_iterations,
        learning_rate: c.train.denoiser_learning_rate,
        seed: c.seed,
        ..DenoiserHyper::default()
    };
    let (model, report) = train_toy_denoiser(&examples, &rt.schedule, &hyper)?;
    if let Some(dir) = c.denoiser_model.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    model.save(&c.denoiser_model)?;
    let summary = DenoiserSummary {
        path: c.denoiser_model.display().to_string(),
        images: examples.len(),
        iterations: hyper.iterations,
        parameters: model.parameter_count(),
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
    };
    Ok((summary, report))
}

/// `train.dataset` when set, else `train.scenes` generated scenes from
/// `CONTROLLER_SEED_BASE`, with their descriptions as fixtures.
pub fn controller_training_set(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    if let Some(dir) = &cfg.train.dataset {
        let mut sub = cfg.clone();
        sub.dataset = dir.clone();
        return load_dataset(&sub);
    }
    let mut fixtures = FixtureDescriber::new();
    let images = (0..cfg.train.scenes)
        .map(|i| {
            let seed = CONTROLLER_SEED_BASE + i as u64;
            let sc = generate_scene(seed, SCENE_SIDE);
            fixtures.insert_image(&sc.image, sc.description);
            CorpusImage {
                id: format!("train_{seed}"),
                image: sc.image,
            }
        })
        .collect();
    Ok(Dataset {
        images,
        fixtures: Some(fixtures),
    })
}

/// One training image after encoding at the run quality.
pub struct LabeledImage {
    pub id: String,
    pub original: RasterImage,
    pub compressed: crate::bitstream::CompressedImage,
    pub features: FeatureVector,
}

fn prepare(rt: &Runtime, images: &[CorpusImage]) -> Result<Vec<LabeledImage>, HarnessError> {
    let quality = rt.config.quality;
    rt.par_map(images, |ci| {
        let enc = rt.encode(&ci.image, Mode::Full, quality)?;
        let x_init = decode_initial(&enc.compressed.latent)?;
        let features = raw_features(&x_init, &enc.description, rt.providers.embedder.as_ref())?;
        Ok(LabeledImage {
            id: ci.id.clone(),
            original: ci.image.clone(),
            compressed: enc.compressed,
            features,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    image_id: String,
    best_steps: u32,
    best_cfg: f64,
    best_score: f64,
    y_steps: f64,
    y_cfg: f64,
}

pub fn write_labels(path: &Path, labels: &[OracleLabel]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for l in labels {
        w.serialize(LabelRecord {
            image_id: l.image_id.clone(),
            best_steps: l.best_steps,
            best_cfg: l.best_cfg,
            best_score: l.best_score,
            y_steps: l.y_steps,
            y_cfg: l.y_cfg,
        })?;
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<OracleLabel>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LabelRecord>()
        .map(|rec| {
            let r = rec?;
            Ok(OracleLabel {
                image_id: r.image_id,
                best_steps: r.best_steps,
                best_cfg: r.best_cfg,
                best_score: r.best_score,
                y_steps: r.y_steps,
                y_cfg: r.y_cfg,
            })
        })
        .collect()
}

fn label_path(cfg: &RunConfig, ids: &[String]) -> PathBuf {
    cfg.output_dir.join(format!("labels-{}.csv", cfg.label_hash(ids)))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub label_file: String,
    pub cached: bool,
    pub images: usize,
    pub labeled: usize,
    pub failed: Vec<String>,
    pub mean_best_steps: f64,
    pub mean_best_cfg: f64,
}

/// Oracle labels for `images`, read from the cache when the config hash
/// matches, otherwise swept over the default grid and cached.
fn labels_for(rt: &Runtime, prepared: &[LabeledImage]) -> Result<(Vec<OracleLabel>, SweepSummary), HarnessError> {
    let ids: Vec<String> = prepared.iter().map(|p| p.id.clone()).collect();
    let path = label_path(&rt.config, &ids);
    let (labels, failed, cached) = if path.exists() {
        log::info!("using cached labels {}", path.display());
        (read_labels(&path)?, Vec::new(), true)
    } else {
        let decoder = rt.decoder()?;
        let emb = rt.providers.embedder.as_ref();
        let score = |i: usize, plan: DiffusionPlan| -> Result<f64, String> {
            let p = &prepared[i];
            let out = decoder.decode(&p.compressed, Mode::Full, Some(plan)).map_err(|e| e.to_string())?;
            perceptual_distance(&p.original, &out.image, emb).map_err(|e| e.to_string())
        };
        let results = rt.install(|| oracle_labels(&ids, &SweepGrid::default(), score));
        let mut labels = Vec::new();
        let mut failed = Vec::new();
        for r in results {
            match r {
                Ok(l) => labels.push(l),
                Err(f) => {
                    log::warn!("no label for {}: plan ({}, {}) failed: {}", f.image_id, f.plan.steps, f.plan.cfg, f.reason);
                    failed.push(f.image_id);
                }
            }
        }
        write_labels(&path, &labels)?;
        (labels, failed, false)
    };
    let n = labels.len().max(1) as f64;
    let summary = SweepSummary {
        label_file: path.display().to_string(),
        cached,
        images: ids.len(),
        labeled: labels.len(),
        failed,
        mean_best_steps: labels.iter().map(|l| l.best_steps as f64).sum::<f64>() / n,
        mean_best_cfg: labels.iter().map(|l| l.best_cfg).sum::<f64>() / n,
    };
    Ok((labels, summary))
}

/// Runs (or reloads) the oracle sweep on the controller training set.
pub fn cmd_sweep(cfg: RunConfig) -> Result<SweepSummary, HarnessError> {
    let set = controller_training_set(&cfg)?;
    let rt = Runtime::new(cfg, set.fixtures)?;
    let prepared = prepare(&rt, &set.images)?;
    Ok(labels_for(&rt, &prepared)?.1)
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSummary {
    pub role: &'static str,
    pub path: String,
    pub lambda: f64,
    pub best_epoch: usize,
    pub val_mse: f64,
    pub mean_predictor_mse: f64,
    pub gradient_check: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub sweep: SweepSummary,
    pub steps: ModelSummary,
    pub cfg: ModelSummary,
}

const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Oracle sweep (cached), then one MLP per plan component, each checked
/// against finite differences before it is written.
pub fn cmd_train(cfg: RunConfig) -> Result<TrainSummary, HarnessError> {
    let set = controller_training_set(&cfg)?;
    let rt = Runtime::new(cfg, set.fixtures)?;
    let prepared = prepare(&rt, &set.images)?;
    let (labels, sweep) = labels_for(&rt, &prepared)?;
    let by_id: std::collections::HashMap<&str, &LabeledImage> =
        prepared.iter().map(|p| (p.id.as_str(), p)).collect();
    let rows: Vec<(&LabeledImage, &OracleLabel)> = labels
        .iter()
        .filter_map(|l| by_id.get(l.image_id.as_str()).map(|p| (*p, l)))
        .collect();
    if rows.len() < 8 {
        return Err(HarnessError::NoLabels(format!(
            "{} labeled images, at least 8 required",
            rows.len()
        )));
    }
    let raw: Vec<FeatureVector> = rows.iter().map(|(p, _)| p.features).collect();
    let normalizer = FeatureNormalizer::fit(&raw)?;
    let xs: Vec<Vec<f64>> = raw.iter().map(|f| normalizer.normalize(f).as_slice().to_vec()).collect();
    let c = &rt.config;
    let hyper = TrainHyper {
        batch_size: c.train.batch_size,
        learning_rate: c.train.learning_rate,
        epochs: c.train.epochs,
        patience: c.train.patience,
        val_fraction: c.train.val_fraction,
        seed: c.seed,
    };

    let fit = |role: Role, lambda: f64, ys: Vec<f64>, path: &Path, seed: u64| -> Result<ModelSummary, HarnessError> {
        let outcome = train(&Mlp::random(FEATURE_COUNT, seed), &xs, &ys, lambda, &hyper)?;
        let probe: Vec<usize> = outcome.val_indices.iter().copied().take(8).collect();
        let px: Vec<&[f64]> = probe.iter().map(|&i| xs[i].as_slice()).collect();
        let py: Vec<f64> = probe.iter().map(|&i| ys[i]).collect();
        let err = gradient_check(&outcome.model, &px, &py, lambda)?;
        if err >= GRADIENT_TOLERANCE {
            return Err(HarnessError::GradientCheck {
                role: role.name(),
                error: err,
            });
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        }
        ControllerModel::new(role, lambda, normalizer.clone(), outcome.model).save(path)?;
        Ok(ModelSummary {
            role: role.name(),
            path: path.display().to_string(),
            lambda,
            best_epoch: outcome.best_epoch,
            val_mse: outcome.val_mse,
            mean_predictor_mse: outcome.mean_predictor_mse,
            gradient_check: err,
        })
    };
    let steps = fit(
        Role::Steps,
        STEP_LAMBDA,
        rows.iter().map(|(_, l)| l.y_steps).collect(),
        &c.steps_model,
        c.seed,
    )?;
    let cfg_model = fit(
        Role::Cfg,
        CFG_LAMBDA,
        rows.iter().map(|(_, l)| l.y_cfg).collect(),
        &c.cfg_model,
        c.seed.wrapping_add(1),
    )?;
    Ok(TrainSummary {
        sweep,
        steps,
        cfg: cfg_model,
    })
}
