//! Hard and soft voting over member classifiers, and sharded training that
//! deals the training rows out to members as disjoint random partitions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitDataset;
use crate::models::{self, Algorithm, Hyperparams, ModelDocument, ModelError, Prediction, TrainedModel, TrainingSet};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("voting needs at least two members, got {0}")]
    EmptyMemberList(usize),
    #[error("member probabilities must sum to 1, got {0:?}")]
    UnnormalizedInput([f64; 2]),
    #[error("{labels} labels but {probs} probability vectors")]
    MismatchedVotes { labels: usize, probs: usize },
    #[error("members disagree on feature arity")]
    MixedArity,
    #[error("arity mismatch: ensemble expects {expected} features, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("need at least {needed} training rows for {members} members, have {have}")]
    TooFewRecords { needed: usize, have: usize, members: usize },
    #[error("unknown combo {0:?}")]
    UnknownCombo(String),
    #[error("ensemble document: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VotingMode {
    #[default]
    Hard,
    Soft,
}

impl fmt::Display for VotingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VotingMode::Hard => "hard",
            VotingMode::Soft => "soft",
        })
    }
}

impl FromStr for VotingMode {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(VotingMode::Hard),
            "soft" => Ok(VotingMode::Soft),
            other => Err(EnsembleError::Format(format!("unknown voting mode {other:?}"))),
        }
    }
}

fn summed(probs: &[[f64; 2]]) -> [f64; 2] {
    probs.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]])
}

/// Argmax of summed member probabilities (ties to class 0); the reported
/// probabilities are the sums divided by the member count.
pub fn soft_vote(probs: &[[f64; 2]]) -> Result<Prediction> {
    if probs.len() < 2 {
        return Err(EnsembleError::EmptyMemberList(probs.len()));
    }
    if let Some(bad) = probs.iter().find(|p| (p[0] + p[1] - 1.0).abs() > 1e-9) {
        return Err(EnsembleError::UnnormalizedInput(*bad));
    }
    let sums = summed(probs);
    let k = probs.len() as f64;
    Ok(Prediction { label: u8::from(sums[1] > sums[0]), probs: [sums[0] / k, sums[1] / k] })
}

/// Majority over member labels, reported with vote shares as
/// probabilities. An exact tie is settled by the soft rule, and then the
/// soft probabilities are reported so the label stays the argmax.
pub fn hard_vote(labels: &[u8], probs: &[[f64; 2]]) -> Result<Prediction> {
    if labels.len() < 2 {
        return Err(EnsembleError::EmptyMemberList(labels.len()));
    }
    if labels.len() != probs.len() {
        return Err(EnsembleError::MismatchedVotes { labels: labels.len(), probs: probs.len() });
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    if ones == zeros {
        return soft_vote(probs);
    }
    let k = labels.len() as f64;
    Ok(Prediction { label: u8::from(ones > zeros), probs: [zeros as f64 / k, ones as f64 / k] })
}

/// Parsed combo: an ordered list of member algorithms, e.g. `svm-dt-lr`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Combo {
    pub name: String,
    pub members: Vec<Algorithm>,
}

impl Combo {
    pub const PRESETS: [&'static str; 2] = ["svm-dt-lr", "rf-svm-lr"];

    pub fn parse(name: &str) -> Result<Self> {
        let members = name
            .split(['-', ',', '+'])
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.parse::<Algorithm>().map_err(|_| EnsembleError::UnknownCombo(name.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            return Err(EnsembleError::UnknownCombo(name.to_string()));
        }
        let name = members.iter().map(|a| a.token()).collect::<Vec<_>>().join("-");
        Ok(Combo { name, members })
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<TrainedModel>,
    pub mode: VotingMode,
    pub combo_name: String,
}

impl Ensemble {
    pub fn new(members: Vec<TrainedModel>, mode: VotingMode, combo_name: impl Into<String>) -> Result<Self> {
        if members.len() < 2 {
            return Err(EnsembleError::EmptyMemberList(members.len()));
        }
        let arity = members[0].arity();
        if members.iter().any(|m| m.arity() != arity) {
            return Err(EnsembleError::MixedArity);
        }
        Ok(Ensemble { members, mode, combo_name: combo_name.into() })
    }

    pub fn arity(&self) -> usize {
        self.members[0].arity()
    }

    pub fn with_mode(mut self, mode: VotingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        ensemble_predict(self, x)
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    pub fn to_document(&self) -> EnsembleDocument {
        EnsembleDocument {
            version: models::MODEL_FORMAT_VERSION,
            mode: self.mode,
            combo_name: self.combo_name.clone(),
            members: self
                .members
                .iter()
                .map(|m| ModelDocument { version: models::MODEL_FORMAT_VERSION, model: m.clone() })
                .collect(),
        }
    }

    pub fn from_document(doc: EnsembleDocument) -> Result<Self> {
        if doc.version != models::MODEL_FORMAT_VERSION {
            return Err(EnsembleError::Format(format!("unsupported version {}", doc.version)));
        }
        Ensemble::new(doc.members.into_iter().map(|d| d.model).collect(), doc.mode, doc.combo_name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_document()).map_err(|e| EnsembleError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc = serde_json::from_str(text).map_err(|e| EnsembleError::Format(e.to_string()))?;
        Ensemble::from_document(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ensemble::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Serialized ensemble: mode, combo tag and embedded member documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDocument {
    pub version: u32,
    pub mode: VotingMode,
    pub combo_name: String,
    pub members: Vec<ModelDocument>,
}

impl Serialize for Ensemble {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ensemble {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = EnsembleDocument::deserialize(d)?;
        Ensemble::from_document(doc).map_err(serde::de::Error::custom)
    }
}

pub fn ensemble_predict(e: &Ensemble, x: &[f64]) -> Result<Prediction> {
    let expected = e.arity();
    if x.len() != expected {
        return Err(EnsembleError::ArityMismatch { expected, got: x.len() });
    }
    let votes = e.members.iter().map(|m| m.predict(x)).collect::<models::Result<Vec<_>>>()?;
    let probs: Vec<[f64; 2]> = votes.iter().map(|p| p.probs).collect();
    match e.mode {
        VotingMode::Soft => soft_vote(&probs),
        VotingMode::Hard => {
            let labels: Vec<u8> = votes.iter().map(|p| p.label).collect();
            hard_vote(&labels, &probs)
        }
    }
}

/// SplitMix64 finalizer; decorrelates member seeds derived from one seed.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    let mut z = seed.wrapping_add((member as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHARD_STREAM: u64 = 1;

/// Shuffles `train_idx` and deals it into `k` contiguous shards whose
/// sizes differ by at most one (the first `n mod k` shards get the extra row).
pub fn shard_indices(train_idx: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx = train_idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHARD_STREAM);
    idx.shuffle(&mut rng);
    let (base, extra) = (idx.len() / k, idx.len() % k);
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        shards.push(idx[start..start + len].to_vec());
        start += len;
    }
    shards
}

/// Scaled feature rows and labels that a [`SplitDataset`] indexes into.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
}

impl PreparedData {
    pub fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<u8>) {
        (idx.iter().map(|&i| self.x[i].clone()).collect(), idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Trains one member; shared by local and worker-side training so both
/// paths produce identical models.
pub fn train_member(
    algorithm: Algorithm,
    train: (&[Vec<f64>], &[u8]),
    calibration: (&[Vec<f64>], &[u8]),
    hp: &Hyperparams,
    seed: u64,
) -> Result<TrainedModel> {
    let set = TrainingSet::new(train.0, train.1).with_calibration(calibration.0, calibration.1);
    Ok(models::train(algorithm, set, hp, seed)?)
}

/// Member `i` of `combo` trains on shard `i` of the training rows; SVM
/// members calibrate on the validation rows. A single-member combo trains
/// on everything and is then rejected by [`Ensemble::new`].
pub fn train_sharded(
    combo: &Combo,
    data: &PreparedData,
    split: &SplitDataset,
    hp: &Hyperparams,
    mode: VotingMode,
    seed: u64,
) -> Result<Ensemble> {
    let k = combo.members.len();
    let have = split.train_idx.len();
    if have < 2 * k {
        return Err(EnsembleError::TooFewRecords { needed: 2 * k, have, members: k });
    }
    let shards = shard_indices(&split.train_idx, k, seed);
    let (vx, vy) = data.rows(&split.val_idx);
    let members = combo
        .members
        .iter()
        .zip(&shards)
        .enumerate()
        .map(|(i, (&alg, shard))| {
            let (sx, sy) = data.rows(shard);
            train_member(alg, (&sx, &sy), (&vx, &vy), hp, member_seed(seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, mode, combo.name.clone())
}

/// Every member trains on the full training split.
pub fn train_whole(
    combo: &Combo,
    data: &PreparedData,
    split: &SplitDataset,
    hp: &Hyperparams,
    mode: VotingMode,
    seed: u64,
) -> Result<Ensemble> {
    let (tx, ty) = data.rows(&split.train_idx);
    let (vx, vy) = data.rows(&split.val_idx);
    let members = combo
        .members
        .iter()
        .enumerate()
        .map(|(i, &alg)| train_member(alg, (&tx, &ty), (&vx, &vy), hp, member_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, mode, combo.name.clone())
}
