//! The end-to-end training pipeline and the model bundle it produces:
//! filter, split, standardize, select features, train, evaluate.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, Dataset, DatasetError, FeatureMask, FeatureRows, Scaler, SplitDataset, DEFAULT_RATIOS, N_FEATURES,
};
use crate::ensemble::{self, Combo, Ensemble, EnsembleError, PreparedData, VotingMode};
use crate::models::{self, Algorithm, EvalReport, Hyperparams, ModelError, Prediction};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model bundle: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub drop_columns: Vec<String>,
    /// Number of features kept by elimination; 8 keeps everything.
    pub rfe_k: usize,
    pub combo: Combo,
    pub mode: VotingMode,
    pub whole_data: bool,
    pub hp: Hyperparams,
}

impl PipelineConfig {
    pub fn new(combo: Combo, seed: u64) -> Self {
        PipelineConfig {
            ratios: DEFAULT_RATIOS,
            seed,
            drop_columns: dataset::DEFAULT_MISSING_COLUMNS.iter().map(|f| f.csv_name().to_string()).collect(),
            rfe_k: N_FEATURES,
            combo,
            mode: VotingMode::Hard,
            whole_data: false,
            hp: Hyperparams::default().with_seed(seed),
        }
    }
}

/// Filtered dataset with its split, fitted scaler, feature mask and the
/// scaled, masked matrix every split index refers to.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitDataset,
    pub scaler: Scaler,
    pub mask: FeatureMask,
    pub data: PreparedData,
}

impl Prepared {
    pub fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<u8>) {
        self.data.rows(idx)
    }
}

pub fn prepare(raw: &Dataset, cfg: &PipelineConfig) -> Result<Prepared> {
    let columns: Vec<&str> = cfg.drop_columns.iter().map(String::as_str).collect();
    let ds = dataset::drop_missing(raw, &columns)?;
    let split = dataset::split(&ds, cfg.ratios, cfg.seed)?;
    let matrix = ds.feature_matrix();
    let labels = ds.labels();
    let mask = if cfg.rfe_k == N_FEATURES {
        FeatureMask::all(N_FEATURES)
    } else {
        dataset::rfe(&ds, &split.train_idx, cfg.rfe_k)?
    };
    let scaler = Scaler::fit(&matrix, &split.train_idx)?;
    let x = mask.apply(&scaler.transform(&matrix)?);
    Ok(Prepared { dataset: ds, split, scaler, mask, data: PreparedData { x, y: labels } })
}

pub fn train_ensemble(p: &Prepared, cfg: &PipelineConfig) -> Result<Ensemble> {
    let f = if cfg.whole_data { ensemble::train_whole } else { ensemble::train_sharded };
    Ok(f(&cfg.combo, &p.data, &p.split, &cfg.hp, cfg.mode, cfg.seed)?)
}

/// Trains one algorithm on the whole training split and evaluates it on
/// the test split.
pub fn evaluate_single(p: &Prepared, algorithm: Algorithm, hp: &Hyperparams, seed: u64) -> Result<EvalReport> {
    let (tx, ty) = p.rows(&p.split.train_idx);
    let (vx, vy) = p.rows(&p.split.val_idx);
    let model = ensemble::train_member(algorithm, (&tx, &ty), (&vx, &vy), hp, seed)?;
    let (sx, sy) = p.rows(&p.split.test_idx);
    Ok(models::evaluate(&models::predict_all(&model, &sx)?, &sy)?)
}

pub fn evaluate_ensemble(e: &Ensemble, p: &Prepared, idx: &[usize]) -> Result<EvalReport> {
    let (x, y) = p.rows(idx);
    Ok(models::evaluate(&e.predict_all(&x)?, &y)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleReports {
    pub train: EvalReport,
    pub validation: EvalReport,
    pub test: EvalReport,
    /// Every row of the training input file, unfiltered, as `predict`
    /// would see it.
    pub source: EvalReport,
}

/// A trained ensemble with the preprocessing it expects on raw rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub seed: u64,
    pub combo: String,
    pub whole_data: bool,
    pub drop_columns: Vec<String>,
    pub source_digest: String,
    pub scaler: Scaler,
    pub mask: FeatureMask,
    pub ensemble: Ensemble,
    pub reports: BundleReports,
}

impl ModelBundle {
    /// Scales and masks raw 8-feature rows before voting.
    pub fn predict_raw<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<Prediction>> {
        rows.iter()
            .map(|r| {
                let r = r.as_ref();
                if r.len() != N_FEATURES {
                    return Err(DatasetError::ArityMismatch { expected: N_FEATURES, got: r.len() }.into());
                }
                let x = self.mask.apply_row(&self.scaler.transform_row(r)?);
                Ok(self.ensemble.predict(&x)?)
            })
            .collect()
    }

    pub fn predict_csv(&self, text: &str) -> Result<(FeatureRows, Vec<Prediction>)> {
        let rows = dataset::parse_feature_rows(text)?;
        let preds = self.predict_raw(&rows.rows)?;
        Ok((rows, preds))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| PipelineError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: ModelBundle = serde_json::from_str(text).map_err(|e| PipelineError::Format(e.to_string()))?;
        if b.version != BUNDLE_FORMAT_VERSION {
            return Err(PipelineError::Format(format!("unsupported version {}", b.version)));
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(DatasetError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
        ModelBundle::from_json(&text)
    }
}

/// Builds a bundle around an already trained ensemble.
pub fn bundle(raw: &Dataset, p: &Prepared, cfg: &PipelineConfig, ensemble: Ensemble) -> Result<ModelBundle> {
    let reports = BundleReports {
        train: evaluate_ensemble(&ensemble, p, &p.split.train_idx)?,
        validation: evaluate_ensemble(&ensemble, p, &p.split.val_idx)?,
        test: evaluate_ensemble(&ensemble, p, &p.split.test_idx)?,
        source: EvalReport::empty(),
    };
    let mut b = ModelBundle {
        version: BUNDLE_FORMAT_VERSION,
        seed: cfg.seed,
        combo: cfg.combo.name.clone(),
        whole_data: cfg.whole_data,
        drop_columns: cfg.drop_columns.clone(),
        source_digest: raw.source_digest.clone(),
        scaler: p.scaler.clone(),
        mask: p.mask.clone(),
        ensemble,
        reports,
    };
    let preds = b.predict_raw(&raw.feature_matrix())?;
    b.reports.source = models::evaluate(&preds, &raw.labels())?;
    Ok(b)
}

pub fn run(raw: &Dataset, cfg: &PipelineConfig) -> Result<ModelBundle> {
    cfg.hp.validate()?;
    let p = prepare(raw, cfg)?;
    let e = train_ensemble(&p, cfg)?;
    bundle(raw, &p, cfg, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PatientRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records = (0..n)
            .map(|_| {
                let mut x = [0.0; N_FEATURES];
                for v in x.iter_mut() {
                    *v = rng.random_range(1.0..10.0);
                }
                let outcome = u8::from(x[1] + 0.5 * x[5] > 8.0);
                PatientRecord::from_features(x, outcome)
            })
            .collect();
        Dataset::from_records(records)
    }

    fn small_hp() -> Hyperparams {
        let mut hp = Hyperparams::default();
        hp.forest.n_trees = 5;
        hp.gbm.n_rounds = 5;
        hp
    }

    #[test]
    fn bundle_is_deterministic_and_round_trips() {
        let ds = synthetic(120);
        let mut cfg = PipelineConfig::new(Combo::parse("svm-dt-lr").unwrap(), 5);
        cfg.hp = small_hp();
        let a = run(&ds, &cfg).unwrap();
        let b = run(&ds, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(ModelBundle::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn source_report_matches_predicting_the_input() {
        let ds = synthetic(80);
        let mut cfg = PipelineConfig::new(Combo::parse("rf-svm-lr").unwrap(), 9);
        cfg.hp = small_hp();
        cfg.mode = VotingMode::Soft;
        let b = run(&ds, &cfg).unwrap();
        let preds = b.predict_raw(&ds.feature_matrix()).unwrap();
        let r = models::evaluate(&preds, &ds.labels()).unwrap();
        assert_eq!(r.accuracy, b.reports.source.accuracy);
        assert!(b.predict_raw(&[vec![1.0; 7]]).is_err());
    }

    #[test]
    fn rfe_shrinks_member_arity() {
        let ds = synthetic(100);
        let mut cfg = PipelineConfig::new(Combo::parse("lr-lr").unwrap(), 2);
        cfg.rfe_k = 3;
        let b = run(&ds, &cfg).unwrap();
        assert_eq!(b.ensemble.arity(), 3);
        assert_eq!(b.mask.selected.len(), 3);
        assert_eq!(b.predict_raw(&ds.feature_matrix()[..4]).unwrap().len(), 4);
    }
}
