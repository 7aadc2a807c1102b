//! L2-regularized logistic regression trained by full-batch gradient descent.

use serde::{Deserialize, Serialize};

use super::{check_count, check_rate, check_training_set, sigmoid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        LogRegParams { learning_rate: 0.1, epochs: 500, l2: 1e-3 }
    }
}

impl LogRegParams {
    pub fn validate(&self) -> Result<()> {
        check_rate("logreg.learning_rate", self.learning_rate)?;
        check_count("logreg.epochs", self.epochs)?;
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(super::ModelError::BadHyperparams("logreg.l2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogRegModel {
    pub fn zeros(arity: usize) -> Self {
        LogRegModel { weights: vec![0.0; arity], bias: 0.0 }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Objective value and gradient at `model`:
/// mean log-loss + (l2 / 2)·‖w‖², bias unregularized.
pub fn loss_and_gradient(x: &[Vec<f64>], y: &[u8], model: &LogRegModel, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut grad_w = vec![0.0; model.weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z = model.logit(row);
        let t = f64::from(label);
        loss += softplus(z) - t * z;
        let residual = sigmoid(z) - t;
        for (g, v) in grad_w.iter_mut().zip(row) {
            *g += residual * v;
        }
        grad_b += residual;
    }
    let penalty: f64 = model.weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
    for (g, w) in grad_w.iter_mut().zip(&model.weights) {
        *g = *g / n + l2 * w;
    }
    (loss / n + penalty, grad_w, grad_b / n)
}

pub fn objective(x: &[Vec<f64>], y: &[u8], model: &LogRegModel, l2: f64) -> f64 {
    loss_and_gradient(x, y, model, l2).0
}

pub fn fit(x: &[Vec<f64>], y: &[u8], params: &LogRegParams) -> Result<LogRegModel> {
    fit_with_history(x, y, params).map(|(m, _)| m)
}

/// Trains from zero weights and returns the objective recorded before the
/// first step and after every epoch.
///
/// A step that would raise the objective is retried at half the rate (up
/// to 30 times) and skipped if it still does not help, so the history is
/// non-increasing.
pub fn fit_with_history(x: &[Vec<f64>], y: &[u8], params: &LogRegParams) -> Result<(LogRegModel, Vec<f64>)> {
    params.validate()?;
    let arity = check_training_set(x, y)?;
    let mut model = LogRegModel::zeros(arity);
    let (mut loss, mut grad_w, mut grad_b) = loss_and_gradient(x, y, &model, params.l2);
    let mut history = Vec::with_capacity(params.epochs + 1);
    history.push(loss);
    for _ in 0..params.epochs {
        let mut rate = params.learning_rate;
        for _ in 0..30 {
            let candidate = LogRegModel {
                weights: model.weights.iter().zip(&grad_w).map(|(w, g)| w - rate * g).collect(),
                bias: model.bias - rate * grad_b,
            };
            let (c_loss, c_gw, c_gb) = loss_and_gradient(x, y, &candidate, params.l2);
            if c_loss <= loss {
                model = candidate;
                loss = c_loss;
                grad_w = c_gw;
                grad_b = c_gb;
                break;
            }
            rate /= 2.0;
        }
        history.push(loss);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_line_is_learned() {
        let x = vec![vec![-1.0], vec![1.0]];
        let y = [0, 1];
        let m = fit(&x, &y, &LogRegParams::default()).unwrap();
        assert!(m.probability(&x[0]) < 0.5);
        assert!(m.probability(&x[1]) > 0.5);
    }

    #[test]
    fn zero_weights_give_one_half() {
        let m = LogRegModel::zeros(3);
        for row in [[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]] {
            assert_eq!(m.probability(&row), 0.5);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let model = LogRegModel {
            weights: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: 0.3,
        };
        let (_, gw, gb) = loss_and_gradient(&x, &y, &model, 1e-2);
        let h = 1e-5;
        for j in 0..=8 {
            let bump = |delta: f64| {
                let mut m = model.clone();
                if j < 8 {
                    m.weights[j] += delta;
                } else {
                    m.bias += delta;
                }
                objective(&x, &y, &m, 1e-2)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = if j < 8 { gw[j] } else { gb };
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "component {j}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let y: Vec<u8> = x.iter().map(|r| u8::from(r[0] + 0.5 * r[1] > rng.random_range(-1.0..1.0))).collect();
        let params = LogRegParams { learning_rate: 2.0, epochs: 200, l2: 1e-3 };
        let (_, history) = fit_with_history(&x, &y, &params).unwrap();
        for pair in history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}
