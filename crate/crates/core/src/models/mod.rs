//! From-scratch binary classifiers and evaluation metrics.
//!
//! Every classifier consumes a dense row-major matrix of standardized
//! features and 0/1 labels, and produces a [`TrainedModel`] that can be
//! serialized losslessly to JSON.

pub mod forest;
pub mod gbm;
pub mod logreg;
pub mod metrics;
pub mod svm;
pub mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forest::{ForestModel, ForestParams};
pub use gbm::{GbmModel, GbmParams};
pub use logreg::{LogRegModel, LogRegParams};
pub use metrics::{evaluate, Confusion, EvalReport};
pub use svm::{SvmModel, SvmParams};
pub use tree::{TreeModel, TreeParams};

/// Version stamped into every serialized model document.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training data contains a single class")]
    SingleClassTraining,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("arity mismatch: model expects {expected} features, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("invalid hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("model document: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Class label plus the (non-diabetic, diabetic) probability pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub probs: [f64; 2],
}

impl Prediction {
    /// Argmax over `probs`; exact ties go to class 0.
    pub fn from_probs(probs: [f64; 2]) -> Self {
        Prediction { label: u8::from(probs[1] > probs[0]), probs }
    }

    pub fn from_positive(p1: f64) -> Self {
        Prediction::from_probs([1.0 - p1, p1])
    }

    pub fn positive(&self) -> f64 {
        self.probs[1]
    }

    /// Checks normalization, range and the argmax rule.
    pub fn is_valid(&self) -> bool {
        let [p0, p1] = self.probs;
        (0.0..=1.0).contains(&p0)
            && (0.0..=1.0).contains(&p1)
            && (p0 + p1 - 1.0).abs() <= 1e-9
            && self.label == u8::from(p1 > p0)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TrainedModel {
    LogReg(LogRegModel),
    DecisionTree(TreeModel),
    RandomForest(ForestModel),
    GradBoost(GbmModel),
    LinearSvm(SvmModel),
}

impl TrainedModel {
    pub fn arity(&self) -> usize {
        match self {
            TrainedModel::LogReg(m) => m.weights.len(),
            TrainedModel::DecisionTree(m) => m.n_features,
            TrainedModel::RandomForest(m) => m.n_features,
            TrainedModel::GradBoost(m) => m.n_features,
            TrainedModel::LinearSvm(m) => m.weights.len(),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            TrainedModel::LogReg(_) => Algorithm::LogReg,
            TrainedModel::DecisionTree(_) => Algorithm::DecisionTree,
            TrainedModel::RandomForest(_) => Algorithm::RandomForest,
            TrainedModel::GradBoost(_) => Algorithm::GradBoost,
            TrainedModel::LinearSvm(_) => Algorithm::Svm,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        predict(self, x)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument { version: MODEL_FORMAT_VERSION, model: self.clone() };
        serde_json::to_string_pretty(&doc).map_err(|e| ModelError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {}", doc.version)));
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of a single model: `{"version": 1, "kind": ..., ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    #[serde(flatten)]
    pub model: TrainedModel,
}

pub fn predict(model: &TrainedModel, x: &[f64]) -> Result<Prediction> {
    let expected = model.arity();
    if x.len() != expected {
        return Err(ModelError::ArityMismatch { expected, got: x.len() });
    }
    Ok(match model {
        TrainedModel::LogReg(m) => Prediction::from_positive(m.probability(x)),
        TrainedModel::DecisionTree(m) => Prediction::from_probs(m.leaf_probs(x)),
        TrainedModel::RandomForest(m) => Prediction::from_probs(m.mean_probs(x)),
        TrainedModel::GradBoost(m) => Prediction::from_positive(sigmoid(m.logit(x))),
        TrainedModel::LinearSvm(m) => Prediction::from_positive(m.probability(x)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    LogReg,
    DecisionTree,
    RandomForest,
    GradBoost,
    Svm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::LogReg,
        Algorithm::DecisionTree,
        Algorithm::RandomForest,
        Algorithm::GradBoost,
        Algorithm::Svm,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Algorithm::LogReg => "lr",
            Algorithm::DecisionTree => "dt",
            Algorithm::RandomForest => "rf",
            Algorithm::GradBoost => "gbm",
            Algorithm::Svm => "svm",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Algorithm {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lr" | "logreg" => Ok(Algorithm::LogReg),
            "dt" | "tree" => Ok(Algorithm::DecisionTree),
            "rf" | "forest" => Ok(Algorithm::RandomForest),
            "gbm" | "gb" | "gbt" => Ok(Algorithm::GradBoost),
            "svm" => Ok(Algorithm::Svm),
            other => Err(ModelError::UnknownAlgorithm(other.to_string())),
        }
    }
}

/// Hyperparameters for every algorithm plus the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub logreg: LogRegParams,
    pub tree: TreeParams,
    pub forest: ForestParams,
    pub gbm: GbmParams,
    pub svm: SvmParams,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            logreg: LogRegParams::default(),
            tree: TreeParams::default(),
            forest: ForestParams::default(),
            gbm: GbmParams::default(),
            svm: SvmParams::default(),
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.logreg.validate()?;
        self.tree.validate()?;
        self.forest.validate()?;
        self.gbm.validate()?;
        self.svm.validate()
    }
}

pub(crate) fn check_rate(name: &str, rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(ModelError::BadHyperparams(format!("{name} must be > 0, got {rate}")))
    }
}

pub(crate) fn check_count(name: &str, count: usize) -> Result<()> {
    if count >= 1 {
        Ok(())
    } else {
        Err(ModelError::BadHyperparams(format!("{name} must be >= 1")))
    }
}

/// Shared preconditions for every trainer.
pub(crate) fn check_training_set(x: &[Vec<f64>], y: &[u8]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(ModelError::DimensionMismatch(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(ModelError::DimensionMismatch(format!("need at least 2 rows, got {}", x.len())));
    }
    let arity = x[0].len();
    if arity == 0 || x.iter().any(|r| r.len() != arity) {
        return Err(ModelError::DimensionMismatch("rows have inconsistent arity".into()));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(ModelError::DimensionMismatch("labels must be 0 or 1".into()));
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == y.len() {
        return Err(ModelError::SingleClassTraining);
    }
    Ok(arity)
}

/// A labelled, already-scaled matrix plus an optional calibration split
/// used by the SVM's probability map.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [u8],
    pub calibration: Option<(&'a [Vec<f64>], &'a [u8])>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [u8]) -> Self {
        TrainingSet { x, y, calibration: None }
    }

    pub fn with_calibration(mut self, x: &'a [Vec<f64>], y: &'a [u8]) -> Self {
        self.calibration = Some((x, y));
        self
    }
}

/// Trains `algorithm` with the matching hyperparameter block and `seed`.
pub fn train(algorithm: Algorithm, data: TrainingSet<'_>, hp: &Hyperparams, seed: u64) -> Result<TrainedModel> {
    Ok(match algorithm {
        Algorithm::LogReg => TrainedModel::LogReg(logreg::fit(data.x, data.y, &hp.logreg)?),
        Algorithm::DecisionTree => TrainedModel::DecisionTree(tree::fit(data.x, data.y, &hp.tree)?),
        Algorithm::RandomForest => {
            TrainedModel::RandomForest(forest::fit(data.x, data.y, &hp.forest, seed)?)
        }
        Algorithm::GradBoost => TrainedModel::GradBoost(gbm::fit(data.x, data.y, &hp.gbm)?),
        Algorithm::Svm => {
            let (cx, cy) = data.calibration.unwrap_or((data.x, data.y));
            TrainedModel::LinearSvm(svm::fit(data.x, data.y, cx, cy, &hp.svm)?)
        }
    })
}

pub fn predict_all(model: &TrainedModel, rows: &[Vec<f64>]) -> Result<Vec<Prediction>> {
    rows.iter().map(|r| predict(model, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_logreg_ties_to_class_zero() {
        let m = TrainedModel::LogReg(LogRegModel { weights: vec![0.0; 3], bias: 0.0 });
        let p = m.predict(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(p.probs, [0.5, 0.5]);
        assert_eq!(p.label, 0);
    }

    #[test]
    fn single_leaf_frequencies() {
        let m = TrainedModel::DecisionTree(TreeModel::leaf(2, [3, 1]));
        let p = m.predict(&[0.0, 0.0]).unwrap();
        assert_eq!(p.probs, [0.75, 0.25]);
        assert_eq!(p.label, 0);
    }

    #[test]
    fn forest_mean_with_tie() {
        let forest = ForestModel {
            trees: vec![TreeModel::leaf(1, [4, 0]), TreeModel::leaf(1, [0, 2])],
            n_features: 1,
            seed: 0,
        };
        let p = TrainedModel::RandomForest(forest).predict(&[0.3]).unwrap();
        assert_eq!(p.probs, [0.5, 0.5]);
        assert_eq!(p.label, 0);
    }

    #[test]
    fn arity_is_checked() {
        let m = TrainedModel::LogReg(LogRegModel { weights: vec![1.0; 8], bias: 0.0 });
        assert!(matches!(m.predict(&[1.0; 7]), Err(ModelError::ArityMismatch { expected: 8, got: 7 })));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        for alg in Algorithm::ALL {
            let err = train(alg, TrainingSet::new(&x, &[1, 1]), &Hyperparams::default(), 0);
            assert!(matches!(err, Err(ModelError::SingleClassTraining)), "{alg}");
        }
        let err = train(Algorithm::LogReg, TrainingSet::new(&x, &[1]), &Hyperparams::default(), 0);
        assert!(matches!(err, Err(ModelError::DimensionMismatch(_))));
    }

    #[test]
    fn algorithm_tokens_round_trip() {
        for alg in Algorithm::ALL {
            assert_eq!(alg.token().parse::<Algorithm>().unwrap(), alg);
        }
        assert!("catboost".parse::<Algorithm>().is_err());
    }

    #[test]
    fn model_document_carries_kind_and_version() {
        let m = TrainedModel::LogReg(LogRegModel { weights: vec![0.1, -0.2], bias: 0.3 });
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(v["kind"], "LogReg");
        assert_eq!(v["version"], 1);
    }

    fn arb_tree(n_features: usize) -> impl Strategy<Value = TreeModel> {
        (0..n_features, -5.0f64..5.0, 0u64..50, 0u64..50, 0u64..50, 0u64..50).prop_map(
            move |(feature, threshold, a, b, c, d)| TreeModel {
                nodes: vec![
                    tree::TreeNode::Split { feature, threshold, left: 1, right: 2 },
                    tree::TreeNode::Leaf { counts: [a, b + 1] },
                    tree::TreeNode::Leaf { counts: [c + 1, d] },
                ],
                n_features,
            },
        )
    }

    fn arb_model(bounded: bool) -> impl Strategy<Value = TrainedModel> {
        let real = move || {
            if bounded {
                (-1e3f64..1e3).boxed()
            } else {
                any::<f64>().prop_filter("finite", |v| v.is_finite()).boxed()
            }
        };
        prop_oneof![
            (prop::collection::vec(real(), 8), real())
                .prop_map(|(weights, bias)| TrainedModel::LogReg(LogRegModel { weights, bias })),
            arb_tree(8).prop_map(TrainedModel::DecisionTree),
            (prop::collection::vec(arb_tree(8), 1..4), any::<u64>()).prop_map(|(trees, seed)| {
                TrainedModel::RandomForest(ForestModel { trees, n_features: 8, seed })
            }),
            (real(), real(), prop::collection::vec(real(), 3)).prop_map(|(init, lr, leaves)| {
                TrainedModel::GradBoost(GbmModel {
                    init_logit: init,
                    learning_rate: lr,
                    n_features: 8,
                    trees: vec![gbm::RegressionTree {
                        nodes: vec![
                            gbm::RegNode::Split { feature: 2, threshold: leaves[0], left: 1, right: 2 },
                            gbm::RegNode::Leaf { value: leaves[1] },
                            gbm::RegNode::Leaf { value: leaves[2] },
                        ],
                    }],
                })
            }),
            (prop::collection::vec(real(), 8), real(), real(), real()).prop_map(|(weights, bias, a, b)| {
                TrainedModel::LinearSvm(SvmModel { weights, bias, calib_a: a, calib_b: b })
            }),
        ]
    }

    proptest! {
        #[test]
        fn model_json_round_trips_exactly(model in arb_model(false)) {
            let back = TrainedModel::from_json(&model.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, model);
        }

        #[test]
        fn predictions_are_normalized(model in arb_model(true), x in prop::collection::vec(-10.0f64..10.0, 8)) {
            let p = model.predict(&x).unwrap();
            prop_assert!(p.is_valid(), "{:?}", p);
        }
    }
}
