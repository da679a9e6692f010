use super::DiffusionError;

/// Linear-β schedule with `ᾱ` tabulated for `t = 0..=T` (`ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_max == 0 || !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidRange(beta_min, beta_max));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t = 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 || t > self.t_max() {
            return Err(DiffusionError::InvalidTimestep { t, t_prev: t });
        }
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(DiffusionError::InvalidTimestep { t, t_prev: t })
    }
}
