//! Tabular dataset representation, CSV ingestion, deterministic splitting,
//! and synthetic generators with known ground-truth noise.
//!
//! The synthetic generators are the measurement oracle for calibration
//! checks: real data never reveals per-observation noise, so scenarios here
//! store the exact `(true_mean, true_sigma)` used to sample each outcome.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Prediction task kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Regression,
}

/// Per-observation generating parameters, known only for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_mean: Vec<f64>,
    pub true_sigma: Vec<f64>,
}

/// An immutable tabular dataset: numeric features, a categorical protected
/// attribute (binarized against a designated privileged value), and an
/// outcome column.
///
/// Features are stored column-major; all per-observation vectors share the
/// same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    feature_names: Vec<String>,
    protected: Vec<String>,
    protected_name: String,
    privileged: String,
    outcome: Vec<f64>,
    outcome_name: String,
    task: Task,
    ground_truth: Option<GroundTruth>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: Vec<Vec<f64>>,
        feature_names: Vec<String>,
        protected: Vec<String>,
        protected_name: String,
        privileged: String,
        outcome: Vec<f64>,
        outcome_name: String,
        task: Task,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::domain("dataset must contain at least one row"));
        }
        if features.is_empty() {
            return Err(Error::domain("dataset must contain at least one feature"));
        }
        if features.len() != feature_names.len() {
            return Err(Error::schema("feature_names length must match feature count"));
        }
        for (name, col) in feature_names.iter().zip(&features) {
            if col.len() != n {
                return Err(Error::schema(format!(
                    "feature column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        if protected.len() != n {
            return Err(Error::schema(format!(
                "protected column has {} rows, expected {n}",
                protected.len()
            )));
        }
        if task == Task::Binary {
            for (i, &y) in outcome.iter().enumerate() {
                if y != 0.0 && y != 1.0 {
                    return Err(Error::domain(format!(
                        "binary outcome must be 0 or 1, found {y} at data row {}",
                        i + 1
                    )));
                }
            }
        }
        if let Some(gt) = &ground_truth {
            if gt.true_mean.len() != n || gt.true_sigma.len() != n {
                return Err(Error::schema("ground_truth length must match row count"));
            }
            if gt.true_sigma.iter().any(|&s| !(s >= 0.0)) {
                return Err(Error::domain("ground_truth sigma must be nonnegative"));
            }
        }
        Ok(Dataset {
            features,
            feature_names,
            protected,
            protected_name,
            privileged,
            outcome,
            outcome_name,
            task,
            ground_truth,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Column-major feature storage.
    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn feature_column(&self, j: usize) -> &[f64] {
        &self.features[j]
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn protected(&self) -> &[String] {
        &self.protected
    }

    pub fn privileged_value(&self) -> &str {
        &self.privileged
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    /// True where the observation belongs to the privileged group.
    pub fn privileged_mask(&self) -> Vec<bool> {
        self.protected.iter().map(|a| *a == self.privileged).collect()
    }

    /// Model input columns: the features plus the binarized protected
    /// attribute appended as the final column, so learned functions see
    /// `(x, a)` as in the task definition.
    pub fn model_columns(&self) -> Vec<Vec<f64>> {
        let mut cols = self.features.clone();
        cols.push(
            self.privileged_mask()
                .into_iter()
                .map(|p| if p { 1.0 } else { 0.0 })
                .collect(),
        );
        cols
    }

    /// Number of distinct protected values present.
    pub fn protected_arity(&self) -> usize {
        self.protected.iter().collect::<BTreeSet<_>>().len()
    }

    /// Row-subset copy; ground truth rows travel with their observations.
    /// Indices may repeat (bootstrap resamples).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |col: &Vec<f64>| indices.iter().map(|&i| col[i]).collect::<Vec<f64>>();
        Dataset {
            features: self.features.iter().map(pick).collect(),
            feature_names: self.feature_names.clone(),
            protected: indices.iter().map(|&i| self.protected[i].clone()).collect(),
            protected_name: self.protected_name.clone(),
            privileged: self.privileged.clone(),
            outcome: pick(&self.outcome),
            outcome_name: self.outcome_name.clone(),
            task: self.task,
            ground_truth: self.ground_truth.as_ref().map(|gt| GroundTruth {
                true_mean: pick(&gt.true_mean),
                true_sigma: pick(&gt.true_sigma),
            }),
        }
    }

    /// Writes the dataset as RFC-4180 CSV: features in order, then the
    /// protected column, then the outcome column. Numbers use the shortest
    /// round-trip decimal form, so a reload is value-identical.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header: Vec<&str> = self.feature_names.iter().map(|s| s.as_str()).collect();
        header.push(&self.protected_name);
        header.push(&self.outcome_name);
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self.features.iter().map(|c| fmt_num(c[i])).collect();
            rec.push(self.protected[i].clone());
            rec.push(fmt_num(self.outcome[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    // `{}` on f64 prints the shortest string that parses back exactly.
    format!("{v}")
}

/// Schema for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub outcome_column: String,
    pub protected_column: String,
    pub task: Task,
    /// Which protected value counts as privileged. Required when the column
    /// has more than two distinct values; for two-valued columns the default
    /// is the lexicographically greatest value.
    #[serde(default)]
    pub privileged_value: Option<String>,
}

/// Loads a header-first RFC-4180 CSV. All columns other than the designated
/// outcome and protected columns become features, in file order; categorical
/// features must be numerically pre-encoded and missing cells are rejected.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();

    let outcome_idx = headers
        .iter()
        .position(|h| *h == schema.outcome_column)
        .ok_or_else(|| Error::schema(format!("outcome column `{}` not found", schema.outcome_column)))?;
    let protected_idx = headers
        .iter()
        .position(|h| *h == schema.protected_column)
        .ok_or_else(|| {
            Error::schema(format!("protected column `{}` not found", schema.protected_column))
        })?;
    if outcome_idx == protected_idx {
        return Err(Error::schema("outcome and protected columns must differ"));
    }

    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&j| j != outcome_idx && j != protected_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::schema("no feature columns remain after schema columns"));
    }

    let mut features: Vec<Vec<f64>> = vec![Vec::new(); feature_idx.len()];
    let mut protected: Vec<String> = Vec::new();
    let mut outcome: Vec<f64> = Vec::new();

    for (row_i, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_i + 1; // 1-based data row for diagnostics
        if record.len() != headers.len() {
            return Err(Error::schema(format!(
                "data row {row} has {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        for (slot, &j) in feature_idx.iter().enumerate() {
            let cell = record.get(j).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("`{cell}` is not numeric (categoricals must be pre-encoded)"),
            })?;
            features[slot].push(v);
        }
        protected.push(record.get(protected_idx).unwrap_or("").trim().to_string());
        let ycell = record.get(outcome_idx).unwrap_or("");
        let y: f64 = ycell.trim().parse().map_err(|_| Error::Parse {
            row,
            column: headers[outcome_idx].clone(),
            message: format!("`{ycell}` is not numeric"),
        })?;
        if schema.task == Task::Binary && y != 0.0 && y != 1.0 {
            return Err(Error::domain(format!(
                "binary outcome must be 0 or 1, found {y} at data row {row}"
            )));
        }
        outcome.push(y);
    }

    let distinct: BTreeSet<&String> = protected.iter().collect();
    let privileged = match &schema.privileged_value {
        Some(v) => {
            if !distinct.contains(v) {
                return Err(Error::schema(format!(
                    "privileged value `{v}` does not occur in column `{}`",
                    schema.protected_column
                )));
            }
            v.clone()
        }
        None => {
            if distinct.len() > 2 {
                return Err(Error::schema(format!(
                    "protected column `{}` has {} distinct values; specify privileged_value",
                    schema.protected_column,
                    distinct.len()
                )));
            }
            // Two-valued (or degenerate) column: lexicographically greatest.
            (*distinct.iter().next_back().expect("nonempty column")).clone()
        }
    };

    let feature_names: Vec<String> = feature_idx.iter().map(|&j| headers[j].clone()).collect();
    Dataset::new(
        features,
        feature_names,
        protected,
        schema.protected_column.clone(),
        privileged,
        outcome,
        schema.outcome_column.clone(),
        schema.task,
        None,
    )
}

/// Deterministic train/test split specification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

/// Partitions the dataset into disjoint train and test parts. The shuffle is
/// a pure function of the seed; row order within each part follows the
/// original dataset.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::config(
            "test_fraction",
            format!("must lie in (0,1), got {}", spec.test_fraction),
        ));
    }
    let n = dataset.n_rows();
    let test_count = (n as f64 * spec.test_fraction).round() as usize;
    if test_count == 0 || test_count >= n {
        return Err(Error::domain(format!(
            "degenerate split: {test_count} test rows out of {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let mut test_idx: Vec<usize> = indices[..test_count].to_vec();
    let mut train_idx: Vec<usize> = indices[test_count..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Named synthetic scenarios for binary outcomes.
///
/// * `default` — logistic probability in a linear score with a
///   group-dependent shift.
/// * `balanced` — same logistic probability with no group dependence, so
///   uncertainty carries no structural group signal.
/// * `constant-<p>` — every observation has the same success probability.
/// * `deterministic` — p in {0,1} by the sign of the linear score; zero noise.
#[derive(Debug, Clone, PartialEq)]
enum BinaryScenario {
    Default,
    Balanced,
    Constant(f64),
    Deterministic,
}

impl BinaryScenario {
    fn parse(name: &str) -> Result<Self> {
        if name == "default" {
            Ok(BinaryScenario::Default)
        } else if name == "balanced" {
            Ok(BinaryScenario::Balanced)
        } else if name == "deterministic" {
            Ok(BinaryScenario::Deterministic)
        } else if let Some(p) = name.strip_prefix("constant-") {
            let p: f64 = p
                .parse()
                .map_err(|_| Error::config("scenario", format!("bad constant probability in `{name}`")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("scenario", format!("probability {p} outside [0,1]")));
            }
            Ok(BinaryScenario::Constant(p))
        } else {
            Err(Error::config("scenario", format!("unknown binary scenario `{name}`")))
        }
    }
}

const SYNTH_DIM: usize = 4;

fn linear_score(x: &[f64]) -> f64 {
    0.8 * x[0] - 0.6 * x[1] + 0.4 * x[2]
}

/// Generates a binary dataset with known per-observation success probability,
/// hence known outcome noise `sigma = sqrt(p (1-p))`.
pub fn synth_binary(n: usize, seed: u64, scenario: &str) -> Result<Dataset> {
    let scenario = BinaryScenario::parse(scenario)?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features: Vec<Vec<f64>> = (0..SYNTH_DIM).map(|_| Vec::with_capacity(n)).collect();
    let mut protected = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut true_mean = Vec::with_capacity(n);
    let mut true_sigma = Vec::with_capacity(n);

    for _ in 0..n {
        let mut x = [0.0; SYNTH_DIM];
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = rng.sample(StandardNormal);
            features[j].push(*xj);
        }
        let a = rng.gen_bool(0.5);
        let p = match scenario {
            BinaryScenario::Default => {
                sigmoid(linear_score(&x) + if a { 0.5 } else { 0.0 } - 0.25)
            }
            BinaryScenario::Balanced => sigmoid(linear_score(&x)),
            BinaryScenario::Constant(p) => p,
            BinaryScenario::Deterministic => {
                if linear_score(&x) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let y = if rng.gen_bool(p) { 1.0 } else { 0.0 };
        protected.push(if a { "1".to_string() } else { "0".to_string() });
        outcome.push(y);
        true_mean.push(p);
        true_sigma.push((p * (1.0 - p)).sqrt());
    }

    Dataset::new(
        features,
        (1..=SYNTH_DIM).map(|j| format!("x{j}")).collect(),
        protected,
        "group".to_string(),
        "1".to_string(),
        outcome,
        "outcome".to_string(),
        Task::Binary,
        Some(GroundTruth { true_mean, true_sigma }),
    )
}

/// Named synthetic scenarios for regression outcomes.
///
/// * `default` — linear mean, observation-dependent noise
///   `sigma(x) = 0.1 + |x2|`.
/// * `noiseless` — same mean, zero noise.
/// * `homoscedastic-<c>` — same mean, constant noise level `c`.
/// * `group-noise` — weakly feature-dependent mean with a group mean shift
///   and a 3x noise multiplier on the unprivileged group.
#[derive(Debug, Clone, PartialEq)]
enum RegressionScenario {
    Default,
    Noiseless,
    Homoscedastic(f64),
    GroupNoise,
}

impl RegressionScenario {
    fn parse(name: &str) -> Result<Self> {
        if name == "default" {
            Ok(RegressionScenario::Default)
        } else if name == "noiseless" {
            Ok(RegressionScenario::Noiseless)
        } else if name == "group-noise" {
            Ok(RegressionScenario::GroupNoise)
        } else if let Some(c) = name.strip_prefix("homoscedastic-") {
            let c: f64 = c
                .parse()
                .map_err(|_| Error::config("scenario", format!("bad noise level in `{name}`")))?;
            if c < 0.0 {
                return Err(Error::config("scenario", "noise level must be nonnegative".to_string()));
            }
            Ok(RegressionScenario::Homoscedastic(c))
        } else {
            Err(Error::config("scenario", format!("unknown regression scenario `{name}`")))
        }
    }
}

/// Generates a regression dataset via `y = mu(x,a) + sigma(x,a) * eps` with
/// standard normal noise; the exact `(mu, sigma)` per row is stored as
/// ground truth.
pub fn synth_regression(n: usize, seed: u64, scenario: &str) -> Result<Dataset> {
    let scenario = RegressionScenario::parse(scenario)?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features: Vec<Vec<f64>> = (0..SYNTH_DIM).map(|_| Vec::with_capacity(n)).collect();
    let mut protected = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut true_mean = Vec::with_capacity(n);
    let mut true_sigma = Vec::with_capacity(n);

    for _ in 0..n {
        let mut x = [0.0; SYNTH_DIM];
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = rng.sample(StandardNormal);
            features[j].push(*xj);
        }
        let a = rng.gen_bool(0.5);
        let (mu, sigma) = match scenario {
            RegressionScenario::Default => (1.5 * x[0] - x[1] + 0.5 * x[2], 0.1 + x[1].abs()),
            RegressionScenario::Noiseless => (1.5 * x[0] - x[1] + 0.5 * x[2], 0.0),
            RegressionScenario::Homoscedastic(c) => (1.5 * x[0] - x[1] + 0.5 * x[2], c),
            RegressionScenario::GroupNoise => {
                let shift = if a { 0.8 } else { 0.0 };
                let mult = if a { 1.0 } else { 3.0 };
                (0.3 * x[0] + shift, (0.1 + x[1].abs()) * mult)
            }
        };
        let eps: f64 = rng.sample(StandardNormal);
        protected.push(if a { "1".to_string() } else { "0".to_string() });
        outcome.push(mu + sigma * eps);
        true_mean.push(mu);
        true_sigma.push(sigma);
    }

    Dataset::new(
        features,
        (1..=SYNTH_DIM).map(|j| format!("x{j}")).collect(),
        protected,
        "group".to_string(),
        "1".to_string(),
        outcome,
        "outcome".to_string(),
        Task::Regression,
        Some(GroundTruth { true_mean, true_sigma }),
    )
}

/// Generates a synthetic dataset for the given task.
pub fn synth(task: Task, n: usize, seed: u64, scenario: &str) -> Result<Dataset> {
    match task {
        Task::Binary => synth_binary(n, seed, scenario),
        Task::Regression => synth_regression(n, seed, scenario),
    }
}
