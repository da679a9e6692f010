use super::{check_shape, Condition, Denoiser, DiffusionError, NoiseSchedule};
use crate::image::ImageTensor;

/// Exact posterior-mean noise predictor for `x₀ ~ N(μ, σ₀²I)`.
///
/// With `x_t = √ᾱ·x₀ + √(1−ᾱ)·ε`, `x_t` is Gaussian with mean `√ᾱ·μ` and
/// variance `ᾱσ₀² + 1 − ᾱ`, and `Cov(ε, x_t) = √(1−ᾱ)`, so
/// `E[ε | x_t] = √(1−ᾱ)·(x_t − √ᾱ·μ) / (ᾱσ₀² + 1 − ᾱ)`.
/// The condition is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    pub mean: ImageTensor,
    pub sigma0: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: ImageTensor, sigma0: f64) -> Result<Self, DiffusionError> {
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(DiffusionError::Denoiser(format!("sigma0 must be positive, got {sigma0}")));
        }
        Ok(Self { mean, sigma0 })
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
        _cond: Option<&Condition>,
    ) -> Result<ImageTensor, DiffusionError> {
        check_shape(x_t, &self.mean)?;
        let ab = schedule.alpha_bar(t)?;
        let k = (1.0 - ab).sqrt() / (ab * self.sigma0 * self.sigma0 + 1.0 - ab);
        let sa = ab.sqrt();
        let data = x_t
            .data
            .iter()
            .zip(&self.mean.data)
            .map(|(x, m)| k * (x - sa * m))
            .collect();
        Ok(ImageTensor::from_vec(x_t.channels, x_t.width, x_t.height, data))
    }
}
