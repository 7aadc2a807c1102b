//! Pima-style tabular data: CSV loading, missing-value filtering, seeded
//! 70:10:20 splitting, z-score scaling and recursive feature elimination.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::logreg;
use crate::models::LogRegParams;

/// Number of risk-factor features per observation.
pub const N_FEATURES: usize = 8;

/// Canonical CSV header.
pub const CSV_HEADER: [&str; 9] = [
    "Pregnancies",
    "Glucose",
    "BloodPressure",
    "SkinThickness",
    "Insulin",
    "BMI",
    "DiabetesPedigreeFunction",
    "Age",
    "Outcome",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("dataset has no data rows")]
    EmptyDataset,
    #[error("unknown column: {0}")]
    UnknownColumn(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("need at least {needed} records, have {have}")]
    TooFewRecords { needed: usize, have: usize },
    #[error("index set is empty")]
    EmptyIndexSet,
    #[error("arity mismatch: expected {expected} features, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("target feature count must be in 1..=8, got {0}")]
    BadK(usize),
    #[error("base learner failed: {0}")]
    Learner(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// The eight risk factors, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    Pregnancies,
    Glucose,
    DiastolicBp,
    Skinfold,
    Insulin,
    Bmi,
    Pedigree,
    Age,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Pregnancies,
        Feature::Glucose,
        Feature::DiastolicBp,
        Feature::Skinfold,
        Feature::Insulin,
        Feature::Bmi,
        Feature::Pedigree,
        Feature::Age,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn csv_name(self) -> &'static str {
        CSV_HEADER[self.index()]
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Feature::Pregnancies => "pregnancies",
            Feature::Glucose => "glucose",
            Feature::DiastolicBp => "diastolic_bp",
            Feature::Skinfold => "skinfold",
            Feature::Insulin => "insulin",
            Feature::Bmi => "bmi",
            Feature::Pedigree => "pedigree",
            Feature::Age => "age",
        }
    }

    /// Accepts either the CSV header name or the snake_case field name,
    /// case-insensitively.
    pub fn from_name(name: &str) -> Option<Feature> {
        let name = name.trim();
        Feature::ALL.into_iter().find(|f| {
            f.csv_name().eq_ignore_ascii_case(name) || f.short_name().eq_ignore_ascii_case(name)
        })
    }
}

/// Columns checked for the "0 means missing" convention by default.
pub const DEFAULT_MISSING_COLUMNS: [Feature; 3] =
    [Feature::Skinfold, Feature::DiastolicBp, Feature::Bmi];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub pregnancies: f64,
    pub glucose: f64,
    pub diastolic_bp: f64,
    pub skinfold: f64,
    pub insulin: f64,
    pub bmi: f64,
    pub pedigree: f64,
    pub age: f64,
    pub outcome: u8,
}

impl PatientRecord {
    pub fn from_features(x: [f64; N_FEATURES], outcome: u8) -> Self {
        PatientRecord {
            pregnancies: x[0],
            glucose: x[1],
            diastolic_bp: x[2],
            skinfold: x[3],
            insulin: x[4],
            bmi: x[5],
            pedigree: x[6],
            age: x[7],
            outcome,
        }
    }

    pub fn features(&self) -> [f64; N_FEATURES] {
        [
            self.pregnancies,
            self.glucose,
            self.diastolic_bp,
            self.skinfold,
            self.insulin,
            self.bmi,
            self.pedigree,
            self.age,
        ]
    }

    pub fn get(&self, feature: Feature) -> f64 {
        self.features()[feature.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub feature_names: Vec<String>,
    /// Hex SHA-256 of the source bytes.
    pub source_digest: String,
}

impl Dataset {
    pub fn from_records(records: Vec<PatientRecord>) -> Self {
        let mut ds = Dataset {
            records,
            feature_names: CSV_HEADER[..N_FEATURES].iter().map(|s| s.to_string()).collect(),
            source_digest: String::new(),
        };
        ds.source_digest = sha256_hex(ds.to_csv_string().as_bytes());
        ds
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.outcome).collect()
    }

    pub fn feature_matrix(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.features().to_vec()).collect()
    }

    /// (diabetic, non-diabetic) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.outcome == 1).count();
        (pos, self.records.len() - pos)
    }

    fn resolve_column(&self, name: &str) -> Option<Feature> {
        if let Some(i) = self.feature_names.iter().position(|n| n == name) {
            return Feature::ALL.get(i).copied();
        }
        Feature::from_name(name)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.feature_names.join(","));
        out.push_str(",Outcome\n");
        for r in &self.records {
            for v in r.features() {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", r.outcome);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_field(field: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| DatasetError::MalformedRow {
        line,
        reason: format!("non-numeric {column} value {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(DatasetError::MalformedRow {
            line,
            reason: format!("non-finite {column} value"),
        });
    }
    Ok(v)
}

fn csv_error(err: csv::Error) -> DatasetError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    DatasetError::MalformedRow { line, reason: err.to_string() }
}

/// Parses CSV text in the 9-column schema. An empty body is an error.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv_reader(text);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.len() != N_FEATURES + 1 {
        return Err(DatasetError::MalformedRow {
            line: 1,
            reason: format!("header has {} columns, expected 9", header.len()),
        });
    }
    let feature_names: Vec<String> = header.iter().take(N_FEATURES).map(str::to_string).collect();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != N_FEATURES + 1 {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected 9 fields, found {}", row.len()),
            });
        }
        let mut x = [0.0; N_FEATURES];
        for (i, slot) in x.iter_mut().enumerate() {
            *slot = parse_field(&row[i], line, &feature_names[i])?;
        }
        let outcome = match &row[N_FEATURES] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DatasetError::MalformedRow {
                    line,
                    reason: format!("outcome must be 0 or 1, got {other:?}"),
                })
            }
        };
        records.push(PatientRecord::from_features(x, outcome));
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(Dataset { records, feature_names, source_digest: sha256_hex(text.as_bytes()) })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::MissingFile(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_csv(&text)
}

/// Rows submitted for inference. Accepts the 8-feature schema or the full
/// 9-column schema (labels are kept when present). Zero rows is valid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureRows {
    pub rows: Vec<[f64; N_FEATURES]>,
    pub labels: Option<Vec<u8>>,
}

impl FeatureRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = CSV_HEADER[..N_FEATURES].join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

impl From<&Dataset> for FeatureRows {
    fn from(ds: &Dataset) -> Self {
        FeatureRows {
            rows: ds.records.iter().map(|r| r.features()).collect(),
            labels: Some(ds.labels()),
        }
    }
}

pub fn parse_feature_rows(text: &str) -> Result<FeatureRows> {
    let mut reader = csv_reader(text);
    let header = reader.headers().map_err(csv_error)?.clone();
    let arity = header.len();
    if arity != N_FEATURES && arity != N_FEATURES + 1 {
        return Err(DatasetError::MalformedRow {
            line: 1,
            reason: format!("header has {arity} columns, expected 8 or 9"),
        });
    }
    let with_labels = arity == N_FEATURES + 1;
    let mut out = FeatureRows { rows: Vec::new(), labels: with_labels.then(Vec::new) };
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != arity {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected {arity} fields, found {}", row.len()),
            });
        }
        let mut x = [0.0; N_FEATURES];
        for (i, slot) in x.iter_mut().enumerate() {
            *slot = parse_field(&row[i], line, &header[i])?;
        }
        out.rows.push(x);
        if let Some(labels) = out.labels.as_mut() {
            let y = parse_field(&row[N_FEATURES], line, &header[N_FEATURES])?;
            if y != 0.0 && y != 1.0 {
                return Err(DatasetError::MalformedRow {
                    line,
                    reason: format!("label must be 0 or 1, got {y}"),
                });
            }
            labels.push(y as u8);
        }
    }
    Ok(out)
}

/// Scaled rows of any arity with their labels, as CSV. Values are written
/// in shortest round-trip form, so parsing restores them bit for bit.
pub fn matrix_to_csv(x: &[Vec<f64>], y: &[u8]) -> String {
    let arity = x.first().map(Vec::len).unwrap_or(0);
    let mut out: Vec<String> = (0..arity).map(|i| format!("x{i}")).collect();
    out.push("label".into());
    let mut text = out.join(",");
    text.push('\n');
    for (row, label) in x.iter().zip(y) {
        for v in row {
            let _ = write!(text, "{v},");
        }
        let _ = writeln!(text, "{label}");
    }
    text
}

pub fn parse_matrix_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    let mut reader = csv_reader(text);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.is_empty() {
        return Err(DatasetError::MalformedRow { line: 1, reason: "empty header".into() });
    }
    let arity = header.len() - 1;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != arity + 1 {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", arity + 1, row.len()),
            });
        }
        x.push((0..arity).map(|i| parse_field(&row[i], line, &header[i])).collect::<Result<Vec<_>>>()?);
        let label = parse_field(&row[arity], line, "label")?;
        if label != 0.0 && label != 1.0 {
            return Err(DatasetError::MalformedRow { line, reason: format!("label must be 0 or 1, got {label}") });
        }
        y.push(label as u8);
    }
    Ok((x, y))
}

/// Keeps only records where none of `columns` is exactly zero.
pub fn drop_missing(ds: &Dataset, columns: &[&str]) -> Result<Dataset> {
    let features = columns
        .iter()
        .map(|c| ds.resolve_column(c).ok_or_else(|| DatasetError::UnknownColumn(c.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(drop_missing_features(ds, &features))
}

pub fn drop_missing_features(ds: &Dataset, features: &[Feature]) -> Dataset {
    let records = ds
        .records
        .iter()
        .filter(|r| features.iter().all(|f| r.get(*f) != 0.0))
        .copied()
        .collect();
    Dataset { records, feature_names: ds.feature_names.clone(), source_digest: ds.source_digest.clone() }
}

pub fn drop_missing_default(ds: &Dataset) -> Dataset {
    drop_missing_features(ds, &DEFAULT_MISSING_COLUMNS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Sizes of the train/validation/test partitions for `n` records.
/// Train and validation are floored, test takes the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    let valid = [a, b, c].iter().all(|r| r.is_finite() && *r >= 0.0)
        && ((a + b + c) - 1.0).abs() <= 1e-9;
    if !valid {
        return Err(DatasetError::BadRatios(ratios));
    }
    // the epsilon absorbs representation error such as 0.7 * 10 = 6.999...
    let train = (a * n as f64 + 1e-9).floor() as usize;
    let val = ((b * n as f64 + 1e-9).floor() as usize).min(n - train);
    Ok((train, val, n - train - val))
}

pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitDataset> {
    let (n_train, n_val, _) = split_sizes(n, ratios)?;
    if n < 10 {
        return Err(DatasetError::TooFewRecords { needed: 10, have: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let test_idx = idx.split_off(n_train + n_val);
    let val_idx = idx.split_off(n_train);
    Ok(SplitDataset { train_idx: idx, val_idx, test_idx, seed })
}

pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitDataset> {
    split_indices(ds.len(), ratios, seed)
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const DEGENERATE_STD: f64 = 1e-12;

impl Scaler {
    pub fn identity(arity: usize) -> Self {
        Scaler { mean: vec![0.0; arity], std: vec![1.0; arity] }
    }

    pub fn arity(&self) -> usize {
        self.mean.len()
    }

    /// Population moments over `idx` rows of `rows`.
    pub fn fit(rows: &[Vec<f64>], idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(DatasetError::EmptyIndexSet);
        }
        let arity = rows[idx[0]].len();
        let n = idx.len() as f64;
        let mut mean = vec![0.0; arity];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(&rows[i]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; arity];
        for &i in idx {
            for ((s, v), m) in var.iter_mut().zip(&rows[i]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < DEGENERATE_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.arity() {
            return Err(DatasetError::ArityMismatch { expected: self.arity(), got: row.len() });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

pub fn fit_scaler(ds: &Dataset, idx: &[usize]) -> Result<Scaler> {
    Scaler::fit(&ds.feature_matrix(), idx)
}

pub fn apply_scaler(scaler: &Scaler, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    scaler.transform(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    /// Surviving feature indices, ascending.
    pub selected: Vec<usize>,
    /// Dropped feature indices, in the order they were eliminated.
    pub elimination_order: Vec<usize>,
}

impl FeatureMask {
    pub fn all(arity: usize) -> Self {
        FeatureMask { selected: (0..arity).collect(), elimination_order: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.elimination_order.is_empty()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        self.selected.iter().map(|&i| row[i]).collect()
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}

/// Recursive feature elimination over a generic matrix.
///
/// At each step an L2 logistic regression is fit on the standardized
/// surviving columns of `train_idx`, and the column with the smallest
/// absolute coefficient is dropped (lowest index on ties).
pub fn rfe_matrix(
    rows: &[Vec<f64>],
    labels: &[u8],
    train_idx: &[usize],
    target_k: usize,
    params: &LogRegParams,
) -> Result<FeatureMask> {
    let arity = rows.first().map(Vec::len).unwrap_or(0);
    if target_k == 0 || target_k > arity {
        return Err(DatasetError::BadK(target_k));
    }
    if train_idx.is_empty() {
        return Err(DatasetError::EmptyIndexSet);
    }
    let scaler = Scaler::fit(rows, train_idx)?;
    let scaled: Vec<Vec<f64>> =
        train_idx.iter().map(|&i| scaler.transform_row(&rows[i])).collect::<Result<_>>()?;
    let y: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();

    let mut mask = FeatureMask::all(arity);
    while mask.selected.len() > target_k {
        let x = mask.apply(&scaled);
        let model = logreg::fit(&x, &y, params).map_err(|e| DatasetError::Learner(e.to_string()))?;
        let (weakest, _) = model
            .weights
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (pos, w)| {
                if w.abs() < best.1 {
                    (pos, w.abs())
                } else {
                    best
                }
            });
        let dropped = mask.selected.remove(weakest);
        mask.elimination_order.push(dropped);
    }
    Ok(mask)
}

pub fn rfe(ds: &Dataset, train_idx: &[usize], target_k: usize) -> Result<FeatureMask> {
    if target_k == 0 || target_k > N_FEATURES {
        return Err(DatasetError::BadK(target_k));
    }
    rfe_matrix(&ds.feature_matrix(), &ds.labels(), train_idx, target_k, &LogRegParams::default())
}

/// Distinct columns used for missing-value filtering, preserving request order.
pub fn parse_column_list(list: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && seen.insert(s.to_string()))
        .map(str::to_string)
        .collect()
}
