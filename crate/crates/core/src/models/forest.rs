//! Bagged CART trees with per-node feature subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{self, FeatureSampler, TreeModel, TreeParams};
use super::{check_count, check_training_set, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub features_per_split: usize,
    pub min_samples_split: usize,
    /// Draw each tree's rows with replacement. Off only in tests.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 8,
            features_per_split: 3,
            min_samples_split: 2,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        check_count("forest.n_trees", self.n_trees)?;
        check_count("forest.max_depth", self.max_depth)?;
        check_count("forest.features_per_split", self.features_per_split)?;
        check_count("forest.min_samples_split", self.min_samples_split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub n_features: usize,
    pub seed: u64,
}

impl ForestModel {
    pub fn mean_probs(&self, x: &[f64]) -> [f64; 2] {
        let k = self.trees.len() as f64;
        let p1 = self.trees.iter().map(|t| t.leaf_probs(x)[1]).sum::<f64>() / k;
        [1.0 - p1, p1]
    }
}

/// Tree `index` draws from its own ChaCha stream, so parallel and serial
/// training produce identical forests.
fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn fit_one(x: &[Vec<f64>], y: &[u8], arity: usize, params: &ForestParams, seed: u64, index: usize) -> TreeModel {
    let mut rng = tree_rng(seed, index);
    let n = x.len();
    let idx: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let tree_params = TreeParams { max_depth: params.max_depth, min_samples_split: params.min_samples_split };
    let sampler = FeatureSampler { rng: &mut rng, per_split: params.features_per_split };
    tree::grow(x, y, &idx, arity, &tree_params, Some(sampler))
}

pub fn fit(x: &[Vec<f64>], y: &[u8], params: &ForestParams, seed: u64) -> Result<ForestModel> {
    params.validate()?;
    let arity = check_training_set(x, y)?;
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|i| fit_one(x, y, arity, params, seed, i))
        .collect();
    Ok(ForestModel { trees, n_features: arity, seed })
}
