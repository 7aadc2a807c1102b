//! Linear SVM on the L2-regularized hinge loss, with a logistic map from
//! margins to probabilities fit on a held-out calibration set.

use serde::{Deserialize, Serialize};

use super::{check_count, check_rate, check_training_set, sigmoid, ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { learning_rate: 0.01, epochs: 500, l2: 1e-2 }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        check_rate("svm.learning_rate", self.learning_rate)?;
        check_count("svm.epochs", self.epochs)?;
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ModelError::BadHyperparams("svm.l2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub calib_a: f64,
    pub calib_b: f64,
}

impl SvmModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// σ(a·margin + b).
    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.calib_a * self.margin(x) + self.calib_b)
    }
}

fn signed(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// mean(max(0, 1 − t·f(x))) + (l2 / 2)·‖w‖² with t ∈ {−1, +1}.
pub fn hinge_objective(x: &[Vec<f64>], y: &[u8], weights: &[f64], bias: f64, l2: f64) -> f64 {
    let n = x.len() as f64;
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &label)| {
            let f = weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>() + bias;
            (1.0 - signed(label) * f).max(0.0)
        })
        .sum();
    hinge / n + l2 / 2.0 * weights.iter().map(|w| w * w).sum::<f64>()
}

fn subgradient(x: &[Vec<f64>], y: &[u8], weights: &[f64], bias: f64, l2: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let t = signed(label);
        let f = weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>() + bias;
        if t * f < 1.0 {
            for (g, v) in gw.iter_mut().zip(row) {
                *g -= t * v;
            }
            gb -= t;
        }
    }
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (gw, gb / n)
}

/// Subgradient descent from zero. Steps that raise the objective are
/// halved (up to 30 times) and skipped if they never help, so the
/// returned per-epoch history is non-increasing.
pub fn fit_hinge(x: &[Vec<f64>], y: &[u8], params: &SvmParams) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    params.validate()?;
    let arity = check_training_set(x, y)?;
    let mut weights = vec![0.0; arity];
    let mut bias = 0.0;
    let mut loss = hinge_objective(x, y, &weights, bias, params.l2);
    let mut history = vec![loss];
    for _ in 0..params.epochs {
        let (gw, gb) = subgradient(x, y, &weights, bias, params.l2);
        let mut rate = params.learning_rate;
        for _ in 0..30 {
            let cw: Vec<f64> = weights.iter().zip(&gw).map(|(w, g)| w - rate * g).collect();
            let cb = bias - rate * gb;
            let c_loss = hinge_objective(x, y, &cw, cb, params.l2);
            if c_loss <= loss {
                weights = cw;
                bias = cb;
                loss = c_loss;
                break;
            }
            rate /= 2.0;
        }
        history.push(loss);
    }
    Ok((weights, bias, history))
}

/// Mean log-loss of σ(a·m + b) against 0/1 targets.
pub fn calibration_log_loss(margins: &[f64], y: &[u8], a: f64, b: f64) -> f64 {
    let n = margins.len() as f64;
    margins
        .iter()
        .zip(y)
        .map(|(m, &label)| {
            let z = a * m + b;
            // log(1 + e^z) − t·z
            let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            sp - f64::from(label) * z
        })
        .sum::<f64>()
        / n
}

/// Newton's method with backtracking on the two-parameter logistic map.
pub fn fit_calibration(margins: &[f64], y: &[u8]) -> (f64, f64) {
    let n = margins.len() as f64;
    let positives = y.iter().filter(|&&l| l == 1).count() as f64;
    if margins.is_empty() || positives == 0.0 || positives == n {
        return (1.0, 0.0);
    }
    let mut a = 0.0;
    let mut b = (positives / (n - positives)).ln();
    let mut loss = calibration_log_loss(margins, y, a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (m, &label) in margins.iter().zip(y) {
            let p = sigmoid(a * m + b);
            let r = p - f64::from(label);
            let w = p * (1.0 - p);
            ga += r * m;
            gb += r;
            haa += w * m * m;
            hab += w * m;
            hbb += w;
        }
        let (ga, gb) = (ga / n, gb / n);
        if ga.abs().max(gb.abs()) < 1e-12 {
            break;
        }
        let ridge = 1e-10;
        let (haa, hab, hbb) = (haa / n + ridge, hab / n, hbb / n + ridge);
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 1e-300 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            (ga, gb)
        };
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let (na, nb) = (a - step * da, b - step * db);
            let nl = calibration_log_loss(margins, y, na, nb);
            if nl < loss {
                a = na;
                b = nb;
                loss = nl;
                improved = true;
                break;
            }
            step /= 2.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

pub fn fit(
    x: &[Vec<f64>],
    y: &[u8],
    calib_x: &[Vec<f64>],
    calib_y: &[u8],
    params: &SvmParams,
) -> Result<SvmModel> {
    let (weights, bias, _) = fit_hinge(x, y, params)?;
    let mut model = SvmModel { weights, bias, calib_a: 1.0, calib_b: 0.0 };
    let both_classes = calib_y.contains(&0) && calib_y.contains(&1);
    let (cx, cy) = if both_classes && calib_x.len() == calib_y.len() { (calib_x, calib_y) } else { (x, y) };
    let margins: Vec<f64> = cx.iter().map(|r| model.margin(r)).collect();
    let (a, b) = fit_calibration(&margins, cy);
    model.calib_a = a;
    model.calib_b = b;
    Ok(model)
}
