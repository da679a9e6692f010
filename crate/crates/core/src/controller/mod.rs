//! Content-adaptive control: two small MLPs map a feature vector to the
//! number of sampling steps and the guidance scale.

mod model;
mod oracle;
mod train;

pub use model::{ControllerModel, ModelError, Role, MODEL_MAGIC, MODEL_VERSION};
pub use oracle::{oracle_labels, normalize_label, LabelFailure, OracleLabel, SweepGrid};
pub use train::{train, EpochRecord, TrainHyper, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const HIDDEN: [usize; 3] = [16, 16, 16];
pub const MIN_STEPS: u32 = 2;
pub const MAX_STEPS: u32 = 80;
pub const MAX_CFG: f64 = 10.0;
pub const STEP_LAMBDA: f64 = 0.64;
pub const CFG_LAMBDA: f64 = 0.0;
/// Logistic outputs are kept this far from 0 and 1.
pub const OUTPUT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("feature schema hash does not match this build")]
    SchemaMismatch,
    #[error("input dimension {found}, model expects {expected}")]
    InputDimension { expected: usize, found: usize },
    #[error("value {0} outside (0, 1)")]
    InputOutOfRange(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("prediction/target length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dataset has {0} samples, at least 8 required")]
    DatasetTooSmall(usize),
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("invalid plan: steps {steps}, cfg {cfg}")]
    InvalidPlan { steps: u32, cfg: f64 },
}

/// Sampling settings for one decode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionPlan {
    pub steps: u32,
    pub cfg: f64,
}

impl DiffusionPlan {
    pub fn new(steps: u32, cfg: f64) -> Result<Self, ControllerError> {
        if !(MIN_STEPS..=MAX_STEPS).contains(&steps) || !(cfg > 0.0 && cfg < MAX_CFG) {
            return Err(ControllerError::InvalidPlan { steps, cfg });
        }
        Ok(Self { steps, cfg })
    }

    /// The fixed setting used when adaptive control is disabled.
    pub fn baseline() -> Self {
        Self { steps: 40, cfg: 4.0 }
    }
}

/// Maps the two MLP outputs to a plan: `cfg = 10·y_cfg`,
/// `steps = round(2 + 78·y_steps)`.
pub fn to_plan(y_steps: f64, y_cfg: f64) -> Result<DiffusionPlan, ControllerError> {
    for y in [y_steps, y_cfg] {
        if !(y > 0.0 && y < 1.0) {
            return Err(ControllerError::InputOutOfRange(y));
        }
    }
    let span = (MAX_STEPS - MIN_STEPS) as f64;
    let steps = (MIN_STEPS as f64 + span * y_steps).round().clamp(MIN_STEPS as f64, MAX_STEPS as f64) as u32;
    let cfg = MAX_CFG * y_cfg;
    Ok(DiffusionPlan { steps, cfg })
}

/// `mean((y − ŷ)²) + λ·mean(ŷ²)`.
pub fn loss(pred: &[f64], target: &[f64], lambda: f64) -> Result<f64, ControllerError> {
    if pred.len() != target.len() {
        return Err(ControllerError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(ControllerError::EmptyBatch);
    }
    let n = pred.len() as f64;
    let mse = pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / n;
    let reg = pred.iter().map(|p| p * p).sum::<f64>() / n;
    Ok(mse + lambda * reg)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, ControllerError> {
    loss(pred, target, 0.0)
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Fully connected network: ReLU hidden layers, logistic scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter gradients with the same layout as [`Mlp::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn dims(inputs: usize) -> Vec<usize> {
        let mut d = vec![inputs];
        d.extend(HIDDEN);
        d.push(1);
        d
    }

    pub fn zeros(inputs: usize) -> Self {
        let d = Self::dims(inputs);
        Self {
            layers: d.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// He-uniform hidden weights, Xavier-uniform output layer, zero biases.
    pub fn random(inputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(inputs);
        let last = m.layers.len() - 1;
        for (i, l) in m.layers.iter_mut().enumerate() {
            let limit = if i == last {
                (6.0 / (l.inputs + l.outputs) as f64).sqrt()
            } else {
                (6.0 / l.inputs as f64).sqrt()
            };
            for w in l.weights.iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ControllerError> {
        if x.len() != self.input_dim() {
            return Err(ControllerError::InputDimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Output in `[ε, 1 − ε]`.
    pub fn forward(&self, x: &[f64]) -> Result<f64, ControllerError> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Returns the output and every layer's post-activation values
    /// (index 0 is the input).
    fn forward_cached(&self, x: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let mut buf = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(acts.last().unwrap(), &mut buf);
            if i < last {
                buf.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(buf.clone());
        }
        let z = acts.last().unwrap()[0];
        (logistic(z).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS), acts)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Loss and its analytic gradient over a batch.
    pub fn loss_and_gradients(
        &self,
        xs: &[&[f64]],
        ys: &[f64],
        lambda: f64,
    ) -> Result<(f64, Gradients), ControllerError> {
        if xs.len() != ys.len() {
            return Err(ControllerError::LengthMismatch(xs.len(), ys.len()));
        }
        if xs.is_empty() {
            return Err(ControllerError::EmptyBatch);
        }
        let n = xs.len() as f64;
        let mut grads = self.zero_gradients();
        let mut preds = Vec::with_capacity(xs.len());
        let last = self.layers.len() - 1;
        for (x, &y) in xs.iter().zip(ys) {
            self.check_input(x)?;
            let (p, acts) = self.forward_cached(x);
            preds.push(p);
            let z = acts[last + 1][0];
            let s = logistic(z);
            let dl_dp = (2.0 * (p - y) + 2.0 * lambda * p) / n;
            let mut delta = vec![dl_dp * s * (1.0 - s)];
            for li in (0..=last).rev() {
                let l = &self.layers[li];
                let input = &acts[li];
                for o in 0..l.outputs {
                    grads.bias[li][o] += delta[o];
                    let row = &mut grads.weights[li][o * l.inputs..(o + 1) * l.inputs];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += delta[o] * v;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut prev = vec![0.0; l.inputs];
                for o in 0..l.outputs {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    for (pv, w) in prev.iter_mut().zip(row) {
                        *pv += delta[o] * w;
                    }
                }
                // ReLU derivative, taken as 0 at the kink
                for (pv, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok((loss(&preds, ys, lambda)?, grads))
    }

    pub fn batch_loss(&self, xs: &[&[f64]], ys: &[f64], lambda: f64) -> Result<f64, ControllerError> {
        let preds = xs.iter().map(|x| self.forward(x)).collect::<Result<Vec<_>, _>>()?;
        loss(&preds, ys, lambda)
    }

    fn param_mut(&mut self, layer: usize, index: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        if index < l.weights.len() {
            &mut l.weights[index]
        } else {
            &mut l.bias[index - l.weights.len()]
        }
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences (`h = 1e-5`) over every parameter.
pub fn gradient_check(m: &Mlp, xs: &[&[f64]], ys: &[f64], lambda: f64) -> Result<f64, ControllerError> {
    const H: f64 = 1e-5;
    let (_, g) = m.loss_and_gradients(xs, ys, lambda)?;
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for li in 0..m.layers.len() {
        let nw = m.layers[li].weights.len();
        for idx in 0..nw + m.layers[li].bias.len() {
            let analytic = if idx < nw { g.weights[li][idx] } else { g.bias[li][idx - nw] };
            let orig = *probe.param_mut(li, idx);
            *probe.param_mut(li, idx) = orig + H;
            let up = probe.batch_loss(xs, ys, lambda)?;
            *probe.param_mut(li, idx) = orig - H;
            let down = probe.batch_loss(xs, ys, lambda)?;
            *probe.param_mut(li, idx) = orig;
            let numeric = (up - down) / (2.0 * H);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assume, proptest};

    #[test]
    fn zero_model_outputs_half() {
        let m = Mlp::zeros(8);
        assert_eq!(m.forward(&[0.3; 8]).unwrap(), 0.5);
        let mut b = Mlp::zeros(8);
        b.layers[3].bias[0] = 10.0;
        assert!((b.forward(&[1.0; 8]).unwrap() - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert_eq!(m.layer_dims(), vec![8, 16, 16, 16, 1]);
        assert!(matches!(m.forward(&[0.0; 3]), Err(ControllerError::InputDimension { .. })));
    }

    #[test]
    fn plan_mapping() {
        assert_eq!(to_plan(0.5, 0.5).unwrap(), DiffusionPlan { steps: 41, cfg: 5.0 });
        let lo = to_plan(1e-12, 1e-12).unwrap();
        assert_eq!(lo.steps, 2);
        assert!(lo.cfg > 0.0 && lo.cfg < 1e-10);
        let hi = to_plan(1.0 - 1e-12, 1.0 - 1e-12).unwrap();
        assert_eq!(hi.steps, 80);
        assert!(hi.cfg < 10.0 && hi.cfg > 9.999);
        assert!(matches!(to_plan(0.0, 0.5), Err(ControllerError::InputOutOfRange(_))));
        assert!(matches!(to_plan(0.5, 1.0), Err(ControllerError::InputOutOfRange(_))));
    }

    #[test]
    fn loss_hand_values() {
        assert_eq!(loss(&[0.3, 0.7], &[0.3, 0.7], 0.0).unwrap(), 0.0);
        assert!((loss(&[0.5], &[0.0], 0.64).unwrap() - 0.41).abs() < 1e-12);
        assert_eq!(loss(&[], &[], 0.0), Err(ControllerError::EmptyBatch));
        assert_eq!(loss(&[0.1], &[0.1, 0.2], 0.0), Err(ControllerError::LengthMismatch(1, 2)));
    }

    #[test]
    fn zero_weight_gradients_closed_form() {
        // With all weights zero, only the output bias receives gradient:
        // dL/db = (2(0.5 − y) + 2λ·0.5)·0.25 averaged over the batch.
        let m = Mlp::zeros(4);
        let xs: Vec<&[f64]> = vec![&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.0, -1.0, 2.0]];
        let ys = [0.2, 0.9];
        let lambda = 0.64;
        let (_, g) = m.loss_and_gradients(&xs, &ys, lambda).unwrap();
        let expect: f64 = ys.iter().map(|y| (2.0 * (0.5 - y) + 2.0 * lambda * 0.5) * 0.25).sum::<f64>() / 2.0;
        assert!((g.bias[3][0] - expect).abs() < 1e-15);
        assert!(g.weights.iter().flatten().all(|&v| v == 0.0));
        assert!(g.bias[..3].iter().flatten().all(|&v| v == 0.0));
        assert!(gradient_check(&m, &xs, &ys, lambda).unwrap() < 1e-6);
    }

    #[test]
    fn gradient_check_random_model() {
        let m = Mlp::random(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let xs: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let ys: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        for lambda in [0.0, 0.64] {
            let err = gradient_check(&m, &xs, &ys, lambda).unwrap();
            assert!(err < 1e-4, "lambda {lambda}: {err}");
        }
    }

    proptest! {
        #[test]
        fn plan_ranges(a in 1e-15f64..1.0, b in 1e-15f64..1.0) {
            prop_assume!(a < 1.0 && b < 1.0);
            let p = to_plan(a, b).unwrap();
            prop_assert!((2..=80).contains(&p.steps));
            prop_assert!(p.cfg > 0.0 && p.cfg < 10.0);
        }

        #[test]
        fn lambda_zero_is_mse(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let direct = p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
            prop_assert!((loss(&p, &y, 0.0).unwrap() - direct).abs() <= 1e-12);
        }
    }
}
