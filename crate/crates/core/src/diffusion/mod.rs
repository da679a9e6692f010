//! Pixel-space conditional diffusion: noise schedule, classifier-free
//! guidance, deterministic DDIM sampling and the two refinement stages.

mod analytic;
mod schedule;
pub mod toy;

pub use analytic::AnalyticGaussianDenoiser;
pub use schedule::{make_schedule, NoiseSchedule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::controller::DiffusionPlan;
use crate::embedding::Embedding;
use crate::image::{ImageTensor, RasterImage};
use crate::segmentation::ObjectMask;

pub const DEFAULT_T: usize = 1000;
pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 0.02;
pub const STAGE_A_STRENGTH: f64 = 0.6;
pub const MASKED_STRENGTH: f64 = 0.3;
pub const X0_CLAMP: (f64, f64) = (-1.0, 2.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid beta range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid timestep transition {t} -> {t_prev}")]
    InvalidTimestep { t: usize, t_prev: usize },
    #[error("invalid step count {steps} for T = {t_max}")]
    InvalidSteps { steps: usize, t_max: usize },
    #[error("strength {0} outside [0, 1]")]
    InvalidStrength(f64),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("dataset has {0} images, at least {1} required")]
    DatasetTooSmall(usize, usize),
}

fn check_shape(a: &ImageTensor, b: &ImageTensor) -> Result<(), DiffusionError> {
    if !a.same_shape(b) {
        return Err(DiffusionError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Conditioning signal: a guide image and a text embedding.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub guide: &'a ImageTensor,
    pub text: &'a Embedding,
}

/// Noise predictor `ε_θ(x_t, t | c)`; `cond = None` is the unconditional call.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
        cond: Option<&Condition>,
    ) -> Result<ImageTensor, DiffusionError>;
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor, DiffusionError> {
    check_shape(x0, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Ok(ImageTensor::from_vec(x0.channels, x0.width, x0.height, data))
}

/// Classifier-free guidance: `ε_u + cfg·(ε_c − ε_u)`.
pub fn cfg_combine(
    eps_uncond: &ImageTensor,
    eps_cond: &ImageTensor,
    cfg: f64,
) -> Result<ImageTensor, DiffusionError> {
    check_shape(eps_uncond, eps_cond)?;
    if cfg == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if cfg == 1.0 {
        return Ok(eps_cond.clone());
    }
    let data = eps_uncond
        .data
        .iter()
        .zip(&eps_cond.data)
        .map(|(u, c)| u + cfg * (c - u))
        .collect();
    Ok(ImageTensor::from_vec(eps_uncond.channels, eps_uncond.width, eps_uncond.height, data))
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor, DiffusionError> {
    check_shape(x_t, eps)?;
    if t_prev > t {
        return Err(DiffusionError::InvalidTimestep { t, t_prev });
    }
    if t == t_prev {
        return Ok(x_t.clone());
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = x_t
        .data
        .iter()
        .zip(&eps.data)
        .map(|(x, e)| {
            let x0 = ((x - sb * e) / sa).clamp(X0_CLAMP.0, X0_CLAMP.1);
            pa * x0 + pb * e
        })
        .collect();
    Ok(ImageTensor::from_vec(x_t.channels, x_t.width, x_t.height, data))
}

/// `steps` evenly spaced, strictly descending timesteps starting at
/// `t_start`; the sampler finishes with a final step to 0.
pub fn make_step_schedule(steps: usize, t_start: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps < 2 || (t_start > 0 && steps > t_start) {
        return Err(DiffusionError::InvalidSteps { steps, t_max: t_start });
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|k| (t_start as f64 * (1.0 - k as f64 / steps as f64)).round() as usize)
        .filter(|&t| t > 0)
        .collect();
    out.dedup();
    Ok(out)
}

/// Runs guided DDIM from `x_start` at `t_start` down to 0.
pub fn sample(
    x_start: ImageTensor,
    t_start: usize,
    steps: usize,
    cfg: f64,
    cond: Option<&Condition>,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor, DiffusionError> {
    let ts = make_step_schedule(steps, t_start)?;
    let mut x = x_start;
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = match cond {
            None => denoiser.predict(&x, t, schedule, None)?,
            Some(_) if cfg == 1.0 => denoiser.predict(&x, t, schedule, cond)?,
            Some(_) if cfg == 0.0 => denoiser.predict(&x, t, schedule, None)?,
            Some(_) => {
                let u = denoiser.predict(&x, t, schedule, None)?;
                let c = denoiser.predict(&x, t, schedule, cond)?;
                cfg_combine(&u, &c, cfg)?
            }
        };
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
    }
    Ok(x)
}

pub fn gaussian_noise(channels: usize, width: usize, height: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * width * height)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    ImageTensor::from_vec(channels, width, height, data)
}

/// Noises `guide` to `round(strength·T)` and denoises it under `text`.
pub fn sdedit(
    guide: &ImageTensor,
    text: &Embedding,
    plan: &DiffusionPlan,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    strength: f64,
    seed: u64,
) -> Result<ImageTensor, DiffusionError> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(DiffusionError::InvalidStrength(strength));
    }
    let t_start = (strength * schedule.t_max() as f64).round() as usize;
    if t_start == 0 {
        return Ok(guide.clone());
    }
    let steps = (plan.steps as usize).min(t_start);
    let noise = gaussian_noise(guide.channels, guide.width, guide.height, seed);
    let x = q_sample(guide, t_start, &noise, schedule)?;
    let cond = Condition { guide, text };
    if steps < 2 {
        // a single timestep: one update straight to 0
        let eps = denoiser.predict(&x, t_start, schedule, Some(&cond))?;
        return ddim_step(&x, &eps, t_start, 0, schedule);
    }
    sample(x, t_start, steps, plan.cfg, Some(&cond), denoiser, schedule)
}

/// 2× stage: bicubic-upsample the half-resolution reconstruction and run
/// conditional refinement under the overall description.
pub fn refine_stage_a(
    x_initial: &RasterImage,
    overall: &Embedding,
    plan: &DiffusionPlan,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    strength: f64,
    seed: u64,
) -> Result<RasterImage, DiffusionError> {
    let guide = x_initial.upsample2x_bicubic().to_tensor();
    let out = sdedit(&guide, overall, plan, denoiser, schedule, strength, seed)?;
    Ok(out.to_raster_clamped())
}

/// `D(x_prev; item)·M + x_prev·(1 − M)`.
pub fn composite(refined: &RasterImage, x_prev: &RasterImage, mask: &ObjectMask) -> Result<RasterImage, DiffusionError> {
    let shape = |r: &RasterImage| (3, r.width(), r.height());
    if refined.width() != x_prev.width() || refined.height() != x_prev.height() {
        return Err(DiffusionError::ShapeMismatch(shape(refined), shape(x_prev)));
    }
    if mask.width != x_prev.width() || mask.height != x_prev.height() {
        return Err(DiffusionError::ShapeMismatch((1, mask.width, mask.height), shape(x_prev)));
    }
    let n = mask.data.len();
    let data = refined
        .data()
        .iter()
        .zip(x_prev.data())
        .enumerate()
        .map(|(i, (y, x))| {
            let m = mask.data[i % n];
            y * m + x * (1.0 - m)
        })
        .collect();
    RasterImage::new(x_prev.width(), x_prev.height(), data).map_err(|e| DiffusionError::Denoiser(e.to_string()))
}

/// Same-resolution refinement of one object, blended in through its mask.
#[allow(clippy::too_many_arguments)]
pub fn refine_masked(
    x_prev: &RasterImage,
    item: &Embedding,
    mask: &ObjectMask,
    plan: &DiffusionPlan,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    strength: f64,
    seed: u64,
) -> Result<RasterImage, DiffusionError> {
    if mask.width != x_prev.width() || mask.height != x_prev.height() {
        return Err(DiffusionError::ShapeMismatch(
            (1, mask.width, mask.height),
            (3, x_prev.width(), x_prev.height()),
        ));
    }
    if mask.data.iter().all(|&m| m == 0.0) {
        return Ok(x_prev.clone());
    }
    let guide = x_prev.to_tensor();
    let refined = sdedit(&guide, item, plan, denoiser, schedule, strength, seed)?.to_raster_clamped();
    composite(&refined, x_prev, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedder, ToyEmbedder};

    fn tensor(seed: u64) -> ImageTensor {
        gaussian_noise(3, 8, 6, seed)
    }

    #[test]
    fn cfg_identities() {
        let (u, c) = (tensor(1), tensor(2));
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        let zero = ImageTensor::zeros(3, 8, 6);
        let four = cfg_combine(&zero, &c, 4.0).unwrap();
        for (a, b) in four.data.iter().zip(&c.data) {
            assert_eq!(*a, 4.0 * b);
        }
        assert!(cfg_combine(&u, &ImageTensor::zeros(3, 2, 2), 2.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = make_schedule(DEFAULT_T, BETA_MIN, BETA_MAX).unwrap();
        let x0 = tensor(3);
        let eps = tensor(4);
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = ImageTensor::zeros(3, 8, 6);
        let t = 250;
        let got = q_sample(&x0, t, &zero, &s).unwrap();
        let k = s.alpha_bar(t).unwrap().sqrt();
        for (g, x) in got.data.iter().zip(&x0.data) {
            assert_eq!(*g, k * x);
        }
    }

    #[test]
    fn ddim_inverts_true_noise() {
        let s = make_schedule(DEFAULT_T, BETA_MIN, BETA_MAX).unwrap();
        let x0 = ImageTensor::from_vec(1, 4, 4, (0..16).map(|i| i as f64 / 16.0).collect());
        let eps = gaussian_noise(1, 4, 4, 5);
        for t in [1, 10, 500, 999] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, 0, &s).unwrap();
            for (a, b) in back.data.iter().zip(&x0.data) {
                assert!((a - b).abs() < 1e-6, "t={t}");
            }
        }
        let xt = q_sample(&x0, 300, &eps, &s).unwrap();
        assert_eq!(ddim_step(&xt, &eps, 300, 300, &s).unwrap(), xt);
        assert!(matches!(ddim_step(&xt, &eps, 3, 7, &s), Err(DiffusionError::InvalidTimestep { .. })));
    }

    #[test]
    fn step_schedules() {
        assert_eq!(make_step_schedule(2, 1000).unwrap(), vec![1000, 500]);
        let v = make_step_schedule(80, 1000).unwrap();
        assert_eq!(v.len(), 80);
        assert!(v.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(make_step_schedule(5, 600).unwrap(), vec![600, 480, 360, 240, 120]);
        assert!(make_step_schedule(1, 1000).is_err());
        assert!(make_step_schedule(81, 80).is_err());
        for steps in 2..=80 {
            for t_start in [80, 300, 600, 1000] {
                let v = make_step_schedule(steps, t_start).unwrap();
                assert!(v.windows(2).all(|w| w[0] > w[1]));
                assert_eq!(v.len(), steps);
            }
        }
    }

    struct ZeroDenoiser;
    impl Denoiser for ZeroDenoiser {
        fn predict(
            &self,
            x_t: &ImageTensor,
            _t: usize,
            _s: &NoiseSchedule,
            _c: Option<&Condition>,
        ) -> Result<ImageTensor, DiffusionError> {
            Ok(ImageTensor::zeros(x_t.channels, x_t.width, x_t.height))
        }
    }

    #[test]
    fn zero_strength_returns_guide() {
        let s = make_schedule(DEFAULT_T, BETA_MIN, BETA_MAX).unwrap();
        let small = RasterImage::from_fn(8, 8, |x, y| [x as f64 / 8.0, y as f64 / 8.0, 0.2]);
        let text = ToyEmbedder.embed_text("scene").unwrap();
        let plan = DiffusionPlan::new(10, 3.0).unwrap();
        let out = refine_stage_a(&small, &text, &plan, &ZeroDenoiser, &s, 0.0, 1).unwrap();
        assert_eq!(out, small.upsample2x_bicubic());
        let out = refine_stage_a(&small, &text, &plan, &ZeroDenoiser, &s, 0.6, 1).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
    }

    #[test]
    fn mask_compositing() {
        let s = make_schedule(DEFAULT_T, BETA_MIN, BETA_MAX).unwrap();
        let prev = RasterImage::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.5]);
        let text = ToyEmbedder.embed_text("ball").unwrap();
        let plan = DiffusionPlan::new(5, 2.0).unwrap();
        let den = AnalyticGaussianDenoiser::new(ImageTensor::from_vec(3, 16, 16, vec![0.3; 768]), 0.1).unwrap();
        let zero = ObjectMask::filled(16, 16, 1, 0.0);
        assert_eq!(refine_masked(&prev, &text, &zero, &plan, &den, &s, 0.3, 7).unwrap(), prev);
        let full = sdedit(&prev.to_tensor(), &text, &plan, &den, &s, 0.3, 7).unwrap().to_raster_clamped();
        let one = ObjectMask::filled(16, 16, 1, 1.0);
        assert_eq!(refine_masked(&prev, &text, &one, &plan, &den, &s, 0.3, 7).unwrap(), full);
        let mut half = ObjectMask::filled(16, 16, 1, 0.0);
        for y in 0..16 {
            for x in 0..8 {
                half.data[y * 16 + x] = 1.0;
            }
        }
        let mixed = refine_masked(&prev, &text, &half, &plan, &den, &s, 0.3, 7).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = if x < 8 { full.pixel(x, y) } else { prev.pixel(x, y) };
                assert_eq!(mixed.pixel(x, y), want);
            }
        }
    }
}
