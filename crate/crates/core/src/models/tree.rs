//! CART classification tree grown greedily on Gini impurity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_count, check_training_set, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: 5, min_samples_split: 4 }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        check_count("tree.max_depth", self.max_depth)?;
        check_count("tree.min_samples_split", self.min_samples_split)
    }
}

/// Rows with `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { counts: [u64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    /// Pre-order; the root is node 0.
    pub nodes: Vec<TreeNode>,
    pub n_features: usize,
}

impl TreeModel {
    pub fn leaf(n_features: usize, counts: [u64; 2]) -> Self {
        TreeModel { nodes: vec![TreeNode::Leaf { counts }], n_features }
    }

    pub fn leaf_counts(&self, x: &[f64]) -> [u64; 2] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[*feature] < *threshold { *left } else { *right };
                }
                TreeNode::Leaf { counts } => return *counts,
            }
        }
    }

    pub fn leaf_probs(&self, x: &[f64]) -> [f64; 2] {
        let [c0, c1] = self.leaf_counts(x);
        let total = (c0 + c1) as f64;
        if total == 0.0 {
            return [0.5, 0.5];
        }
        let p1 = c1 as f64 / total;
        [1.0 - p1, p1]
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Every split references a valid feature and two in-range children.
    pub fn is_well_formed(&self) -> bool {
        self.nodes.iter().all(|n| match n {
            TreeNode::Split { feature, threshold, left, right } => {
                *feature < self.n_features
                    && threshold.is_finite()
                    && *left < self.nodes.len()
                    && *right < self.nodes.len()
            }
            TreeNode::Leaf { .. } => true,
        })
    }
}

pub fn gini(counts: [u64; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

/// Size-weighted Gini of a two-way partition.
pub fn weighted_gini(left: [u64; 2], right: [u64; 2]) -> f64 {
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    (nl * gini(left) + nr * gini(right)) / (nl + nr)
}

/// Midpoint between two distinct sorted values, nudged so the lower value
/// always lands strictly left of the threshold.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) / 2.0;
    if t <= lo {
        hi
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiniSplit {
    pub feature: usize,
    pub threshold: f64,
    pub impurity: f64,
}

fn class_counts(y: &[u8], idx: &[usize]) -> [u64; 2] {
    let mut c = [0u64; 2];
    for &i in idx {
        c[y[i] as usize] += 1;
    }
    c
}

/// Lowest weighted-Gini split over `features` (visited in the given order,
/// thresholds ascending); the first candidate wins ties.
pub fn best_split(x: &[Vec<f64>], y: &[u8], idx: &[usize], features: &[usize]) -> Option<GiniSplit> {
    let total = class_counts(y, idx);
    let mut best: Option<GiniSplit> = None;
    let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
    for &feature in features {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (x[i][feature], y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0u64; 2];
        for k in 0..pairs.len().saturating_sub(1) {
            left[pairs[k].1 as usize] += 1;
            let (lo, hi) = (pairs[k].0, pairs[k + 1].0);
            if lo == hi {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let impurity = weighted_gini(left, right);
            if best.is_none_or(|b| impurity < b.impurity) {
                best = Some(GiniSplit { feature, threshold: midpoint(lo, hi), impurity });
            }
        }
    }
    best
}

/// Per-node feature sampling used by random forests.
pub(crate) struct FeatureSampler<'a, R: Rng> {
    pub rng: &'a mut R,
    pub per_split: usize,
}

pub(crate) fn grow<R: Rng>(
    x: &[Vec<f64>],
    y: &[u8],
    idx: &[usize],
    n_features: usize,
    params: &TreeParams,
    mut sampler: Option<FeatureSampler<'_, R>>,
) -> TreeModel {
    let mut model = TreeModel { nodes: Vec::new(), n_features };
    grow_node(x, y, idx.to_vec(), 0, params, &mut sampler, &mut model.nodes);
    model
}

fn grow_node<R: Rng>(
    x: &[Vec<f64>],
    y: &[u8],
    idx: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    sampler: &mut Option<FeatureSampler<'_, R>>,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let at = nodes.len();
    let counts = class_counts(y, &idx);
    nodes.push(TreeNode::Leaf { counts });
    let pure = counts[0] == 0 || counts[1] == 0;
    if pure || depth >= params.max_depth || idx.len() < params.min_samples_split {
        return at;
    }
    let n_features = x[idx[0]].len();
    let features: Vec<usize> = match sampler {
        Some(s) if s.per_split < n_features => {
            let mut f = rand::seq::index::sample(s.rng, n_features, s.per_split).into_vec();
            f.sort_unstable();
            f
        }
        _ => (0..n_features).collect(),
    };
    let Some(split) = best_split(x, y, &idx, &features) else {
        return at;
    };
    if split.impurity >= gini(counts) {
        return at;
    }
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        idx.iter().partition(|&&i| x[i][split.feature] < split.threshold);
    let left = grow_node(x, y, left_idx, depth + 1, params, sampler, nodes);
    let right = grow_node(x, y, right_idx, depth + 1, params, sampler, nodes);
    nodes[at] = TreeNode::Split { feature: split.feature, threshold: split.threshold, left, right };
    at
}

pub fn fit(x: &[Vec<f64>], y: &[u8], params: &TreeParams) -> Result<TreeModel> {
    params.validate()?;
    let arity = check_training_set(x, y)?;
    let idx: Vec<usize> = (0..x.len()).collect();
    Ok(grow::<rand_chacha::ChaCha8Rng>(x, y, &idx, arity, params, None))
}
