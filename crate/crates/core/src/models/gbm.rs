//! Stagewise gradient boosting on the logistic loss with depth-limited
//! regression trees and Newton-step leaf values.

use serde::{Deserialize, Serialize};

use super::tree::midpoint;
use super::{check_count, check_training_set, sigmoid, ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    /// Zero rounds is allowed and yields the prior-only model.
    pub n_rounds: usize,
    /// Zero is allowed; it freezes the model at the prior.
    pub learning_rate: f64,
    pub max_depth: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams { n_rounds: 100, learning_rate: 0.1, max_depth: 3 }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::BadHyperparams("gbm.learning_rate must be >= 0".into()));
        }
        check_count("gbm.max_depth", self.max_depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum RegNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<RegNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                RegNode::Split { feature, threshold, left, right } => {
                    at = if x[*feature] < *threshold { *left } else { *right };
                }
                RegNode::Leaf { value } => return *value,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub init_logit: f64,
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub n_features: usize,
}

impl GbmModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.init_logit + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

struct Fitter<'a> {
    x: &'a [Vec<f64>],
    residual: &'a [f64],
    hessian: &'a [f64],
    max_depth: usize,
}

impl Fitter<'_> {
    /// Best variance-reduction split, as (feature, threshold). Requires a
    /// strict gain over the unsplit node.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len() as f64;
        let total: f64 = idx.iter().map(|&i| self.residual[i]).sum();
        let parent = total * total / n;
        let mut best: Option<(usize, f64, f64)> = None;
        let arity = self.x[idx[0]].len();
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(idx.len());
        for feature in 0..arity {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[i][feature], self.residual[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            for k in 0..pairs.len() - 1 {
                left_sum += pairs[k].1;
                let (lo, hi) = (pairs[k].0, pairs[k + 1].0);
                if lo == hi {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl + right_sum * right_sum / nr;
                if score > parent + 1e-12 && best.is_none_or(|b| score > b.2) {
                    best = Some((feature, midpoint(lo, hi), score));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let num: f64 = idx.iter().map(|&i| self.residual[i]).sum();
        let den: f64 = idx.iter().map(|&i| self.hessian[i]).sum();
        if den.abs() < 1e-150 {
            0.0
        } else {
            num / den
        }
    }

    fn grow(&self, idx: Vec<usize>, depth: usize, nodes: &mut Vec<RegNode>) -> usize {
        let at = nodes.len();
        nodes.push(RegNode::Leaf { value: self.leaf_value(&idx) });
        if depth >= self.max_depth || idx.len() < 2 {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(&idx) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] < threshold);
        let left = self.grow(l, depth + 1, nodes);
        let right = self.grow(r, depth + 1, nodes);
        nodes[at] = RegNode::Split { feature, threshold, left, right };
        at
    }
}

pub fn fit(x: &[Vec<f64>], y: &[u8], params: &GbmParams) -> Result<GbmModel> {
    params.validate()?;
    let arity = check_training_set(x, y)?;
    let n = x.len() as f64;
    let p1 = y.iter().filter(|&&l| l == 1).count() as f64 / n;
    let init_logit = (p1 / (1.0 - p1)).ln();
    let mut model = GbmModel { init_logit, trees: Vec::new(), learning_rate: params.learning_rate, n_features: arity };
    let mut scores = vec![init_logit; x.len()];
    for _ in 0..params.n_rounds {
        let probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let residual: Vec<f64> = probs.iter().zip(y).map(|(p, &t)| f64::from(t) - p).collect();
        let hessian: Vec<f64> = probs.iter().map(|p| p * (1.0 - p)).collect();
        let fitter = Fitter { x, residual: &residual, hessian: &hessian, max_depth: params.max_depth };
        let mut nodes = Vec::new();
        fitter.grow((0..x.len()).collect(), 0, &mut nodes);
        let tree = RegressionTree { nodes };
        for (s, row) in scores.iter_mut().zip(x) {
            *s += params.learning_rate * tree.predict(row);
        }
        model.trees.push(tree);
    }
    Ok(model)
}

/// Mean logistic loss of the model on (x, y).
pub fn log_loss(model: &GbmModel, x: &[Vec<f64>], y: &[u8]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(row, &t)| {
            let p = sigmoid(model.logit(row)).clamp(1e-15, 1.0 - 1e-15);
            -(f64::from(t) * p.ln() + (1.0 - f64::from(t)) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / x.len() as f64
}
