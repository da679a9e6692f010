use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss, mse, ControllerError, Mlp, OUTPUT_EPS};

/// Minibatch gradient descent settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 0.2,
            epochs: 200,
            patience: 20,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss.
    pub model: Mlp,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Dataset indices held out for validation.
    pub val_indices: Vec<usize>,
    /// Plain MSE of the best model on the validation split.
    pub val_mse: f64,
    /// MSE on the validation split of predicting the training-target mean.
    pub mean_predictor_mse: f64,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Trains `init` on `(x, y)` pairs with the `λ`-regularized loss.
///
/// The output bias starts at the logit of the mean training target, so the
/// first epoch begins from the constant mean predictor.
pub fn train(
    init: &Mlp,
    xs: &[Vec<f64>],
    ys: &[f64],
    lambda: f64,
    hyper: &TrainHyper,
) -> Result<TrainOutcome, ControllerError> {
    if xs.len() != ys.len() {
        return Err(ControllerError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 8 {
        return Err(ControllerError::DatasetTooSmall(xs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((xs.len() as f64 * hyper.val_fraction).round() as usize).clamp(1, xs.len() - 1);
    let val_indices: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();

    let val_x: Vec<&[f64]> = val_indices.iter().map(|&i| xs[i].as_slice()).collect();
    let val_y: Vec<f64> = val_indices.iter().map(|&i| ys[i]).collect();
    let train_mean = train_idx.iter().map(|&i| ys[i]).sum::<f64>() / train_idx.len() as f64;

    let mut model = init.clone();
    let last = model.layers.len() - 1;
    model.layers[last].bias[0] = logit(train_mean.clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS));

    let mut best = model.clone();
    let mut best_val = model.batch_loss(&val_x, &val_y, lambda)?;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(hyper.epochs);
    let batch = hyper.batch_size.max(1);

    for epoch in 1..=hyper.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(batch) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let (l, g) = model.loss_and_gradients(&bx, &by, lambda)?;
            if !l.is_finite() {
                return Err(ControllerError::NonFiniteLoss(epoch));
            }
            total += l * chunk.len() as f64;
            for (li, layer) in model.layers.iter_mut().enumerate() {
                for (w, d) in layer.weights.iter_mut().zip(&g.weights[li]) {
                    *w -= hyper.learning_rate * d;
                }
                for (b, d) in layer.bias.iter_mut().zip(&g.bias[li]) {
                    *b -= hyper.learning_rate * d;
                }
            }
        }
        let val_loss = model.batch_loss(&val_x, &val_y, lambda)?;
        if !val_loss.is_finite() || !model.is_finite() {
            return Err(ControllerError::NonFiniteLoss(epoch));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / train_idx.len() as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= hyper.patience {
            break;
        }
    }

    let preds = val_x.iter().map(|x| best.forward(x)).collect::<Result<Vec<_>, _>>()?;
    let val_mse = mse(&preds, &val_y)?;
    let mean_predictor_mse = loss(&vec![train_mean; val_y.len()], &val_y, 0.0)?;
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        val_indices,
        val_mse,
        mean_predictor_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::logistic;
    use rand::Rng;

    fn learnable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let w = [0.8, -0.5, 0.3, 0.0, 0.6, -0.2, 0.1, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let ys = xs
            .iter()
            .map(|x| logistic(x.iter().zip(&w).map(|(a, b)| a * b).sum()))
            .collect();
        (xs, ys)
    }

    #[test]
    fn too_small_dataset() {
        let (xs, ys) = learnable(7, 1);
        assert_eq!(
            train(&Mlp::random(8, 0), &xs, &ys, 0.0, &TrainHyper::default()).unwrap_err(),
            ControllerError::DatasetTooSmall(7)
        );
    }

    #[test]
    fn reproducible_given_seed() {
        let (xs, ys) = learnable(40, 2);
        let h = TrainHyper {
            epochs: 15,
            ..TrainHyper::default()
        };
        let a = train(&Mlp::random(8, 3), &xs, &ys, 0.0, &h).unwrap();
        let b = train(&Mlp::random(8, 3), &xs, &ys, 0.0, &h).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn learns_logistic_target() {
        let (xs, ys) = learnable(1000, 4);
        let o = train(&Mlp::random(8, 1), &xs, &ys, 0.0, &TrainHyper::default()).unwrap();
        assert!(o.val_mse < 1e-3, "{}", o.val_mse);
        assert!(o.val_mse < o.mean_predictor_mse);
    }

    #[test]
    fn regularizer_shrinks_predictions() {
        let (xs, ys) = learnable(200, 5);
        let h = TrainHyper::default();
        let mean_pred = |lambda: f64| {
            let o = train(&Mlp::random(8, 2), &xs, &ys, lambda, &h).unwrap();
            xs.iter().map(|x| o.model.forward(x).unwrap()).sum::<f64>() / xs.len() as f64
        };
        assert!(mean_pred(0.64) <= mean_pred(0.0));
    }
}
