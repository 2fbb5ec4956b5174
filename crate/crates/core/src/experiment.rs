//! Batch experiment runner: a single JSON config describes the dataset,
//! estimators, and experiment family; the output is a self-describing JSON
//! report plus per-table CSV files.
//!
//! Reports are deterministic given the config (wall clock aside): seeds are
//! explicit, every default that influenced the run is echoed back, and
//! existing output directories are never overwritten.

use crate::data::{self, CsvSchema, Dataset, SplitSpec, Task};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, Prediction};
use crate::eval::{
    calibration_bins, consistency, nll_binary, nll_normal, CalibrationBins, ConsistencyReport,
};
use crate::fairness::{
    abstention_curve, abstention_mask, binary_metrics, default_abstention_rates,
    feature_shift_report, ks_uasp, select_abstention_rate, AbstentionCurve, BinaryMetrics,
    FeatureShiftReport, GroupedPredictions, MixtureCdf,
};
use crate::gbt::{self, PipelineConfig, SweepParam};
use crate::losses::SquaredError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Consistency,
    Calibration,
    Abstain,
    FairnessBinary,
    UaspRegression,
    FeatureShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: String,
        outcome_column: String,
        protected_column: String,
        task: Task,
        #[serde(default)]
        privileged_value: Option<String>,
    },
    Synthetic {
        task: Task,
        scenario: String,
        n: usize,
    },
}

impl DatasetSource {
    pub fn task(&self) -> Task {
        match self {
            DatasetSource::Csv { task, .. } => *task,
            DatasetSource::Synthetic { task, .. } => *task,
        }
    }
}

/// Per-field overrides of the pipeline defaults. The model seed is not an
/// override: it always follows the experiment's seed list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOverrides {
    pub n_trees: Option<usize>,
    pub max_depth: Option<usize>,
    pub learning_rate: Option<f64>,
    pub gamma: Option<f64>,
    pub ridge: Option<f64>,
    pub bag_fraction: Option<f64>,
    pub min_leaf: Option<usize>,
}

impl PipelineOverrides {
    pub fn apply(&self, mut base: PipelineConfig) -> PipelineConfig {
        if let Some(v) = self.n_trees {
            base.n_trees = v;
        }
        if let Some(v) = self.max_depth {
            base.max_depth = v;
        }
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.gamma {
            base.gamma = v;
        }
        if let Some(v) = self.ridge {
            base.ridge = v;
        }
        if let Some(v) = self.bag_fraction {
            base.bag_fraction = v;
        }
        if let Some(v) = self.min_leaf {
            base.min_leaf = v;
        }
        base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub hyperparam: String,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_ensemble_size() -> usize {
    10
}

fn default_beta() -> f64 {
    0.5
}

fn default_calibration_groups() -> usize {
    5
}

/// One experiment: dataset, estimators, family, knobs. Unknown keys are
/// rejected; omitted knobs take the defaults echoed in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub dataset: DatasetSource,
    pub estimators: Vec<String>,
    pub output_dir: String,
    #[serde(default)]
    pub pipeline: PipelineOverrides,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_calibration_groups")]
    pub calibration_groups: usize,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentConfig::from_json(&std::fs::read_to_string(path)?)
    }

    fn resolved_estimators(&self) -> Result<Vec<Estimator>> {
        self.estimators
            .iter()
            .map(|name| Estimator::parse(name, self.ensemble_size, self.beta))
            .collect()
    }

    fn resolved_sweep(&self) -> Result<(SweepParam, Vec<f64>)> {
        let (param, grid) = match &self.sweep {
            Some(spec) => (SweepParam::parse(&spec.hyperparam)?, spec.grid.clone()),
            None => (SweepParam::MaxDepth, None),
        };
        let grid = grid.unwrap_or_else(|| match param {
            SweepParam::MaxDepth => (1..=8).map(|d| d as f64).collect(),
            SweepParam::Gamma => (0..=5).map(|i| i as f64 / 10.0).collect(),
        });
        Ok((param, grid))
    }

    fn base_pipeline(&self) -> PipelineConfig {
        self.pipeline.apply(PipelineConfig::default())
    }

    /// Full validation short of touching data files or training anything.
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::config("estimators", "at least one estimator is required"));
        }
        let estimators = self.resolved_estimators()?;
        let task = self.dataset.task();
        let required = match self.experiment {
            ExperimentKind::Abstain | ExperimentKind::FairnessBinary | ExperimentKind::FeatureShift => {
                Some(Task::Binary)
            }
            ExperimentKind::UaspRegression => Some(Task::Regression),
            ExperimentKind::Consistency | ExperimentKind::Calibration => None,
        };
        if let Some(required) = required {
            if task != required {
                return Err(Error::config(
                    "experiment",
                    format!("{:?} requires a {required:?} dataset, got {task:?}", self.experiment),
                ));
            }
        }
        for est in &estimators {
            if !est.supports(task) {
                return Err(Error::config(
                    "estimators",
                    format!("estimator `{}` does not support {task:?} tasks", est.name()),
                ));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must lie in (0,1)"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.ensemble_size < 2 {
            return Err(Error::config("ensemble_size", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta", "must lie in [0,1]"));
        }
        if self.calibration_groups == 0 {
            return Err(Error::config("calibration_groups", "must be at least 1"));
        }
        let base = self.base_pipeline();
        base.validate()?;
        if self.experiment == ExperimentKind::Consistency {
            let (param, grid) = self.resolved_sweep()?;
            if grid.is_empty() {
                return Err(Error::config("sweep.grid", "must be nonempty"));
            }
            for &v in &grid {
                param.apply(&base, v)?;
            }
        }
        if let DatasetSource::Synthetic { n, scenario, task } = &self.dataset {
            if *n < 2 {
                return Err(Error::config("dataset.synthetic.n", "must be at least 2"));
            }
            // scenario names are validated by generating a single row
            data::synth(*task, 1, 0, scenario)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub estimator: String,
    pub bins: CalibrationBins,
    pub nll: f64,
    pub nll_with_constant: f64,
    pub clamped_sigma_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstainEntry {
    pub estimator: String,
    pub curve: AbstentionCurve,
    pub selected_inclusion: f64,
    pub vote_ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessTableRow {
    pub approach: String,
    pub metrics: BinaryMetrics,
    pub included_pct: f64,
    pub selected_inclusion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UaspRow {
    pub approach: String,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentResult {
    Consistency { reports: Vec<ConsistencyReport> },
    Calibration { entries: Vec<CalibrationEntry> },
    Abstain { entries: Vec<AbstainEntry> },
    FairnessBinary { rows: Vec<FairnessTableRow> },
    UaspRegression { rows: Vec<UaspRow> },
    FeatureShift { report: FeatureShiftReport },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub result: ExperimentResult,
}

/// Mean and population standard deviation of one quantity across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub group: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    /// The pipeline actually used (seed field shows the first seed; each
    /// run replaces it with its own seed).
    pub resolved_pipeline: PipelineConfig,
    /// The sweep actually used by consistency experiments, defaults
    /// materialized.
    pub resolved_sweep: Option<SweepSpec>,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Vec<AggregateEntry>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentReport::from_json(&std::fs::read_to_string(path)?)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the configured experiment over every seed and assembles the report.
/// Pure apart from reading a CSV dataset; writes nothing.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();

    let run = || -> Result<Vec<SeedResult>> {
        let csv_data = match &config.dataset {
            DatasetSource::Csv {
                path,
                outcome_column,
                protected_column,
                task,
                privileged_value,
            } => Some(data::load_csv(
                path,
                &CsvSchema {
                    outcome_column: outcome_column.clone(),
                    protected_column: protected_column.clone(),
                    task: *task,
                    privileged_value: privileged_value.clone(),
                },
            )?),
            DatasetSource::Synthetic { .. } => None,
        };
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let dataset = match &config.dataset {
                    DatasetSource::Synthetic { task, scenario, n } => {
                        data::synth(*task, *n, seed, scenario)?
                    }
                    DatasetSource::Csv { .. } => csv_data.clone().expect("loaded above"),
                };
                let (train, test) = data::split(
                    &dataset,
                    &SplitSpec {
                        test_fraction: config.test_fraction,
                        seed,
                    },
                )?;
                let mut pipeline = config.base_pipeline();
                pipeline.seed = seed;
                let result = run_seed(config, &train, &test, &pipeline)?;
                Ok(SeedResult { seed, result })
            })
            .collect()
    };

    let per_seed = match config.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?
            .install(run),
        None => run(),
    }?;

    let aggregate = aggregate_results(&per_seed);
    let mut pipeline_echo = config.base_pipeline();
    pipeline_echo.seed = *config.seeds.first().unwrap_or(&0);
    let resolved_sweep = match config.experiment {
        ExperimentKind::Consistency => {
            let (param, grid) = config.resolved_sweep()?;
            Some(SweepSpec {
                hyperparam: param.name().to_string(),
                grid: Some(grid),
            })
        }
        _ => None,
    };

    Ok(ExperimentReport {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        resolved_pipeline: pipeline_echo,
        resolved_sweep,
        per_seed,
        aggregate,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

fn run_seed(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    pipeline: &PipelineConfig,
) -> Result<ExperimentResult> {
    let estimators = config.resolved_estimators()?;
    match config.experiment {
        ExperimentKind::Consistency => {
            let (param, grid) = config.resolved_sweep()?;
            let reports = estimators
                .iter()
                .map(|est| consistency(train, test, est, pipeline, param, &grid))
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentResult::Consistency { reports })
        }
        ExperimentKind::Calibration => {
            let entries = estimators
                .iter()
                .map(|est| {
                    let preds = est.run(train, test, pipeline)?;
                    let bins = calibration_bins(&preds, test.outcome(), config.calibration_groups)?;
                    let (nll, nll_with_constant, clamped) = match test.task() {
                        Task::Binary => {
                            let r = nll_binary(&preds, test.outcome(), est.prob_source())?;
                            // the Bernoulli likelihood carries no
                            // normalization constant
                            (r.mean_nll, r.mean_nll, r.clamped_sigma_count)
                        }
                        Task::Regression => (
                            nll_normal(&preds, test.outcome(), false)?,
                            nll_normal(&preds, test.outcome(), true)?,
                            0,
                        ),
                    };
                    Ok(CalibrationEntry {
                        estimator: est.name().to_string(),
                        bins,
                        nll,
                        nll_with_constant,
                        clamped_sigma_count: clamped,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentResult::Calibration { entries })
        }
        ExperimentKind::Abstain => {
            let rates = default_abstention_rates();
            let entries = estimators
                .iter()
                .map(|est| {
                    let preds = est.run(train, test, pipeline)?;
                    let ties = vote_ties(est, &preds);
                    let gp = GroupedPredictions::from_test_set(preds, test)?;
                    let curve = abstention_curve(&gp, &rates)?;
                    let selected_inclusion = select_abstention_rate(&curve)?;
                    Ok(AbstainEntry {
                        estimator: est.name().to_string(),
                        curve,
                        selected_inclusion,
                        vote_ties: ties,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentResult::Abstain { entries })
        }
        ExperimentKind::FairnessBinary => {
            let mut rows = Vec::new();
            // baseline: the plain classifier, no abstention
            let baseline = Estimator::BinomialNll.run(train, test, pipeline)?;
            let gp = GroupedPredictions::from_test_set(baseline, test)?;
            rows.push(FairnessTableRow {
                approach: "baseline".to_string(),
                metrics: binary_metrics(&gp)?,
                included_pct: 100.0,
                selected_inclusion: None,
            });
            let rates = default_abstention_rates();
            for est in &estimators {
                let preds = est.run(train, test, pipeline)?;
                let gp = GroupedPredictions::from_test_set(preds, test)?;
                let curve = abstention_curve(&gp, &rates)?;
                let selected = select_abstention_rate(&curve)?;
                let point = curve
                    .points
                    .iter()
                    .find(|p| (p.inclusion_rate - selected).abs() < 1e-9)
                    .expect("selected rate comes from the curve");
                rows.push(FairnessTableRow {
                    approach: est.name().to_string(),
                    metrics: point.metrics.clone().expect("selected point has metrics"),
                    included_pct: point.included_pct,
                    selected_inclusion: Some(selected),
                });
            }
            Ok(ExperimentResult::FairnessBinary { rows })
        }
        ExperimentKind::UaspRegression => {
            let privileged = test.privileged_mask();
            let split_groups = |preds: &[(f64, f64)]| -> Result<(MixtureCdf, MixtureCdf)> {
                let pick = |want: bool| {
                    preds
                        .iter()
                        .zip(&privileged)
                        .filter(|(_, &p)| p == want)
                        .map(|(&c, _)| c)
                        .collect::<Vec<_>>()
                };
                Ok((MixtureCdf::new(pick(false))?, MixtureCdf::new(pick(true))?))
            };

            let mut rows = Vec::new();
            let true_components: Vec<(f64, f64)> =
                test.outcome().iter().map(|&y| (y, 0.0)).collect();
            let (unpriv, priv_) = split_groups(&true_components)?;
            rows.push(UaspRow {
                approach: "true".to_string(),
                ks: ks_uasp(&unpriv, &priv_),
            });

            let model = gbt::fit(&train.model_columns(), train.outcome(), &SquaredError, pipeline)?;
            let mus = model.predict_linked(&test.model_columns(), &SquaredError)?;
            let baseline_components: Vec<(f64, f64)> =
                mus.into_iter().map(|(mu, _)| (mu, 0.0)).collect();
            let (unpriv, priv_) = split_groups(&baseline_components)?;
            rows.push(UaspRow {
                approach: "baseline".to_string(),
                ks: ks_uasp(&unpriv, &priv_),
            });

            for est in &estimators {
                let preds = est.run(train, test, pipeline)?;
                let components: Vec<(f64, f64)> =
                    preds.iter().map(|p| (p.mu, p.sigma)).collect();
                let (unpriv, priv_) = split_groups(&components)?;
                rows.push(UaspRow {
                    approach: est.name().to_string(),
                    ks: ks_uasp(&unpriv, &priv_),
                });
            }
            Ok(ExperimentResult::UaspRegression { rows })
        }
        ExperimentKind::FeatureShift => {
            let rates = default_abstention_rates();
            let mut masks = Vec::new();
            for est in &estimators {
                let preds = est.run(train, test, pipeline)?;
                let gp = GroupedPredictions::from_test_set(preds.clone(), test)?;
                let curve = abstention_curve(&gp, &rates)?;
                let selected = select_abstention_rate(&curve)?;
                let sigmas: Vec<f64> = preds.iter().map(|p| p.sigma).collect();
                let mask = abstention_mask(&sigmas, 1.0 - selected)?;
                masks.push((est.name().to_string(), mask));
            }
            let report = feature_shift_report(test, &masks)?;
            Ok(ExperimentResult::FeatureShift { report })
        }
    }
}

/// Exact majority ties (flagged per the vote tie-break rule); only the
/// ensemble-vote estimators can produce them.
fn vote_ties(est: &Estimator, preds: &[Prediction]) -> usize {
    match est {
        Estimator::Ensemble { .. }
        | Estimator::SelectiveEnsemble { .. }
        | Estimator::SelfInconsistency { .. } => preds
            .iter()
            .filter(|p| p.mu == 0.5 && p.label == Some(1))
            .count(),
        _ => 0,
    }
}

fn aggregate_results(per_seed: &[SeedResult]) -> Vec<AggregateEntry> {
    use std::collections::BTreeMap;
    // (group, metric) -> values across seeds; BTreeMap keeps output order
    // stable.
    let mut series: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut push = |group: &str, metric: &str, value: f64| {
        series
            .entry((group.to_string(), metric.to_string()))
            .or_default()
            .push(value);
    };

    for sr in per_seed {
        match &sr.result {
            ExperimentResult::Consistency { reports } => {
                for r in reports {
                    push(&r.estimator, "max_std", r.max_std);
                    let (err_mean, _) = mean_std(&r.per_setting_error);
                    push(&r.estimator, "mean_setting_error", err_mean);
                }
            }
            ExperimentResult::Calibration { entries } => {
                for e in entries {
                    push(&e.estimator, "nll", e.nll);
                    push(&e.estimator, "nll_with_constant", e.nll_with_constant);
                }
            }
            ExperimentResult::Abstain { entries } => {
                for e in entries {
                    push(&e.estimator, "selected_inclusion", e.selected_inclusion);
                    if let Some(p) = e
                        .curve
                        .points
                        .iter()
                        .find(|p| (p.inclusion_rate - e.selected_inclusion).abs() < 1e-9)
                    {
                        if let Some(m) = &p.metrics {
                            push(&e.estimator, "error_rate", m.error_rate);
                            push(&e.estimator, "statistical_parity", m.statistical_parity);
                            if let Some(v) = m.equalized_odds.get() {
                                push(&e.estimator, "equalized_odds", v);
                            }
                        }
                    }
                }
            }
            ExperimentResult::FairnessBinary { rows } => {
                for row in rows {
                    let g = &row.approach;
                    push(g, "error_rate", row.metrics.error_rate);
                    push(g, "statistical_parity", row.metrics.statistical_parity);
                    for (name, metric) in [
                        ("equalized_odds", &row.metrics.equalized_odds),
                        ("equal_opportunity", &row.metrics.equal_opportunity),
                        ("disparate_impact", &row.metrics.disparate_impact),
                        ("predictive_parity", &row.metrics.predictive_parity),
                        ("fpr_gap", &row.metrics.fpr_gap),
                    ] {
                        if let Some(v) = metric.get() {
                            push(g, name, v);
                        }
                    }
                    push(g, "included_pct", row.included_pct);
                }
            }
            ExperimentResult::UaspRegression { rows } => {
                for row in rows {
                    push(&row.approach, "ks", row.ks);
                }
            }
            ExperimentResult::FeatureShift { report } => {
                for (est, distances) in &report.per_estimator {
                    for (j, d) in distances.iter().enumerate() {
                        push(est, &format!("wasserstein:{}", report.feature_names[j]), *d);
                    }
                }
            }
        }
    }

    series
        .into_iter()
        .map(|((group, metric), values)| {
            let (mean, std) = mean_std(&values);
            AggregateEntry {
                group,
                metric,
                mean,
                std,
                count: values.len(),
            }
        })
        .collect()
}

/// Resolves the directory reports are written into: the configured directory
/// if missing or empty, otherwise a fresh timestamped subdirectory.
fn prepare_output_dir(requested: &Path) -> Result<PathBuf> {
    if !requested.exists() {
        std::fs::create_dir_all(requested)?;
        return Ok(requested.to_path_buf());
    }
    if !requested.is_dir() {
        return Err(Error::config(
            "output_dir",
            format!("{} exists and is not a directory", requested.display()),
        ));
    }
    if std::fs::read_dir(requested)?.next().is_none() {
        return Ok(requested.to_path_buf());
    }
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let mut attempt = 0u32;
    loop {
        let name = format!("run-{nanos}-{attempt}");
        let dir = requested.join(&name);
        if !dir.exists() {
            std::fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
        attempt += 1;
    }
}

/// Runs the experiment and writes `report.json` plus per-table CSVs.
/// Returns the directory actually written.
pub fn run_to_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let report = run_experiment(config)?;
    let dir = prepare_output_dir(Path::new(&config.output_dir))?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    write_tables(&report, &dir)?;
    Ok(dir)
}

fn metric_cell(value: Option<f64>) -> String {
    value.map(|v| format!("{v}")).unwrap_or_default()
}

fn write_tables(report: &ExperimentReport, dir: &Path) -> Result<()> {
    match report.config.experiment {
        ExperimentKind::Consistency => {
            let mut w = csv::Writer::from_path(dir.join("consistency.csv"))?;
            w.write_record(["estimator", "seed", "hyperparam", "grid_value", "error", "tau"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::Consistency { reports } = &sr.result {
                    for r in reports {
                        for (v, e) in r.grid.iter().zip(&r.per_setting_error) {
                            w.write_record([
                                r.estimator.clone(),
                                sr.seed.to_string(),
                                r.hyperparam.clone(),
                                v.to_string(),
                                e.to_string(),
                                r.tau.to_string(),
                            ])?;
                        }
                    }
                }
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("consistency_max_std.csv"))?;
            w.write_record(["estimator", "seed", "max_std"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::Consistency { reports } = &sr.result {
                    for r in reports {
                        w.write_record([
                            r.estimator.clone(),
                            sr.seed.to_string(),
                            r.max_std.to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
        }
        ExperimentKind::Calibration => {
            let mut w = csv::Writer::from_path(dir.join("calibration_bins.csv"))?;
            w.write_record(["estimator", "seed", "bin", "mean_sigma", "empirical_std", "count"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::Calibration { entries } = &sr.result {
                    for e in entries {
                        for (b, bin) in e.bins.bins.iter().enumerate() {
                            w.write_record([
                                e.estimator.clone(),
                                sr.seed.to_string(),
                                b.to_string(),
                                bin.mean_sigma.to_string(),
                                bin.empirical_std.to_string(),
                                bin.count.to_string(),
                            ])?;
                        }
                    }
                }
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("calibration_nll.csv"))?;
            w.write_record(["estimator", "seed", "nll", "nll_with_constant", "clamped_sigma_count"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::Calibration { entries } = &sr.result {
                    for e in entries {
                        w.write_record([
                            e.estimator.clone(),
                            sr.seed.to_string(),
                            e.nll.to_string(),
                            e.nll_with_constant.to_string(),
                            e.clamped_sigma_count.to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
        }
        ExperimentKind::Abstain => {
            write_abstention_csv(report, dir)?;
        }
        ExperimentKind::FairnessBinary => {
            write_fairness_tables(report, dir)?;
        }
        ExperimentKind::UaspRegression => {
            let mut w = csv::Writer::from_path(dir.join("uasp.csv"))?;
            w.write_record(["approach", "seed", "ks"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::UaspRegression { rows } = &sr.result {
                    for row in rows {
                        w.write_record([
                            row.approach.clone(),
                            sr.seed.to_string(),
                            row.ks.to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("uasp_table.csv"))?;
            w.write_record(["approach", "ks_mean", "ks_std"])?;
            for a in &report.aggregate {
                if a.metric == "ks" {
                    w.write_record([a.group.clone(), a.mean.to_string(), a.std.to_string()])?;
                }
            }
            w.flush()?;
        }
        ExperimentKind::FeatureShift => {
            let mut w = csv::Writer::from_path(dir.join("feature_shift.csv"))?;
            w.write_record(["estimator", "seed", "feature", "wasserstein"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::FeatureShift { report: fs } = &sr.result {
                    for (est, distances) in &fs.per_estimator {
                        for (j, d) in distances.iter().enumerate() {
                            w.write_record([
                                est.clone(),
                                sr.seed.to_string(),
                                fs.feature_names[j].clone(),
                                d.to_string(),
                            ])?;
                        }
                    }
                }
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("feature_shift_argmax.csv"))?;
            w.write_record(["seed", "argmax_feature"])?;
            for sr in &report.per_seed {
                if let ExperimentResult::FeatureShift { report: fs } = &sr.result {
                    w.write_record([sr.seed.to_string(), fs.argmax_feature.clone()])?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn write_abstention_csv(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("abstention_curve.csv"))?;
    w.write_record([
        "estimator",
        "seed",
        "inclusion",
        "included_pct",
        "error_rate",
        "statistical_parity",
        "equalized_odds",
        "equal_opportunity",
        "disparate_impact",
        "predictive_parity",
        "fpr_gap",
    ])?;
    for sr in &report.per_seed {
        if let ExperimentResult::Abstain { entries } = &sr.result {
            for e in entries {
                for p in &e.curve.points {
                    let m = p.metrics.as_ref();
                    w.write_record([
                        e.estimator.clone(),
                        sr.seed.to_string(),
                        p.inclusion_rate.to_string(),
                        p.included_pct.to_string(),
                        metric_cell(m.map(|m| m.error_rate)),
                        metric_cell(m.map(|m| m.statistical_parity)),
                        metric_cell(m.and_then(|m| m.equalized_odds.get())),
                        metric_cell(m.and_then(|m| m.equal_opportunity.get())),
                        metric_cell(m.and_then(|m| m.disparate_impact.get())),
                        metric_cell(m.and_then(|m| m.predictive_parity.get())),
                        metric_cell(m.and_then(|m| m.fpr_gap.get())),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("abstention_selected.csv"))?;
    w.write_record(["estimator", "seed", "selected_inclusion", "vote_ties"])?;
    for sr in &report.per_seed {
        if let ExperimentResult::Abstain { entries } = &sr.result {
            for e in entries {
                w.write_record([
                    e.estimator.clone(),
                    sr.seed.to_string(),
                    e.selected_inclusion.to_string(),
                    e.vote_ties.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

const FAIRNESS_COLUMNS: [&str; 9] = [
    "Approach",
    "Error Rate",
    "Statistical Parity",
    "Equalized Odds",
    "Equal Opportunity",
    "Disparate Impact",
    "Predictive Parity",
    "False Positive Rate",
    "Included %",
];

fn write_fairness_tables(report: &ExperimentReport, dir: &Path) -> Result<()> {
    // raw per-seed numbers
    let mut w = csv::Writer::from_path(dir.join("fairness_per_seed.csv"))?;
    w.write_record([
        "approach",
        "seed",
        "error_rate",
        "statistical_parity",
        "equalized_odds",
        "equal_opportunity",
        "disparate_impact",
        "predictive_parity",
        "fpr_gap",
        "included_pct",
        "selected_inclusion",
    ])?;
    let mut approaches: Vec<String> = Vec::new();
    for sr in &report.per_seed {
        if let ExperimentResult::FairnessBinary { rows } = &sr.result {
            for row in rows {
                if !approaches.contains(&row.approach) {
                    approaches.push(row.approach.clone());
                }
                w.write_record([
                    row.approach.clone(),
                    sr.seed.to_string(),
                    row.metrics.error_rate.to_string(),
                    row.metrics.statistical_parity.to_string(),
                    metric_cell(row.metrics.equalized_odds.get()),
                    metric_cell(row.metrics.equal_opportunity.get()),
                    metric_cell(row.metrics.disparate_impact.get()),
                    metric_cell(row.metrics.predictive_parity.get()),
                    metric_cell(row.metrics.fpr_gap.get()),
                    row.included_pct.to_string(),
                    row.selected_inclusion.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;

    // Table-style aggregate: one row per approach, `mean ± std` cells
    let lookup = |group: &str, metric: &str| -> String {
        report
            .aggregate
            .iter()
            .find(|a| a.group == group && a.metric == metric)
            .map(|a| format!("{:.4} ± {:.4}", a.mean, a.std))
            .unwrap_or_default()
    };
    let mut w = csv::Writer::from_path(dir.join("fairness_table.csv"))?;
    w.write_record(FAIRNESS_COLUMNS)?;
    for approach in &approaches {
        w.write_record([
            approach.clone(),
            lookup(approach, "error_rate"),
            lookup(approach, "statistical_parity"),
            lookup(approach, "equalized_odds"),
            lookup(approach, "equal_opportunity"),
            lookup(approach, "disparate_impact"),
            lookup(approach, "predictive_parity"),
            lookup(approach, "fpr_gap"),
            lookup(approach, "included_pct"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Figure names accepted by [`plotdata`].
pub const FIGURES: [&str; 3] = ["calibration-bins", "abstention", "consistency-box"];

/// Extracts tidy figure data from a report as CSV text.
pub fn plotdata(report: &ExperimentReport, figure: &str) -> Result<String> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        match figure {
            "calibration-bins" => {
                let entries: Vec<&CalibrationEntry> = report
                    .per_seed
                    .iter()
                    .filter_map(|sr| match &sr.result {
                        ExperimentResult::Calibration { entries } => Some(entries),
                        _ => None,
                    })
                    .flatten()
                    .collect();
                if entries.is_empty() {
                    return Err(Error::domain(
                        "figure `calibration-bins` needs a calibration report",
                    ));
                }
                w.write_record(["estimator", "bin", "mean_sigma", "empirical_std", "count"])?;
                // one row per (estimator, bin), averaged across seeds
                let mut names: Vec<String> = Vec::new();
                for e in &entries {
                    if !names.contains(&e.estimator) {
                        names.push(e.estimator.clone());
                    }
                }
                for name in names {
                    let per: Vec<&&CalibrationEntry> =
                        entries.iter().filter(|e| e.estimator == name).collect();
                    let bins = per[0].bins.bins.len();
                    for b in 0..bins {
                        let seeds = per.len() as f64;
                        let mean_sigma =
                            per.iter().map(|e| e.bins.bins[b].mean_sigma).sum::<f64>() / seeds;
                        let emp =
                            per.iter().map(|e| e.bins.bins[b].empirical_std).sum::<f64>() / seeds;
                        let count =
                            per.iter().map(|e| e.bins.bins[b].count).sum::<usize>() as f64 / seeds;
                        w.write_record([
                            name.clone(),
                            b.to_string(),
                            mean_sigma.to_string(),
                            emp.to_string(),
                            count.to_string(),
                        ])?;
                    }
                }
            }
            "abstention" => {
                let entries: Vec<(&u64, &AbstainEntry)> = report
                    .per_seed
                    .iter()
                    .filter_map(|sr| match &sr.result {
                        ExperimentResult::Abstain { entries } => {
                            Some(entries.iter().map(move |e| (&sr.seed, e)))
                        }
                        _ => None,
                    })
                    .flatten()
                    .collect();
                if entries.is_empty() {
                    return Err(Error::domain("figure `abstention` needs an abstain report"));
                }
                w.write_record(["estimator", "inclusion", "error_rate", "statistical_parity", "equalized_odds"])?;
                let mut names: Vec<String> = Vec::new();
                for (_, e) in &entries {
                    if !names.contains(&e.estimator) {
                        names.push(e.estimator.clone());
                    }
                }
                for name in names {
                    let per: Vec<&AbstainEntry> = entries
                        .iter()
                        .filter(|(_, e)| e.estimator == name)
                        .map(|(_, e)| *e)
                        .collect();
                    let points = per[0].curve.points.len();
                    for i in 0..points {
                        let inclusion = per[0].curve.points[i].inclusion_rate;
                        let avg = |f: &dyn Fn(&BinaryMetrics) -> Option<f64>| -> Option<f64> {
                            let vals: Vec<f64> = per
                                .iter()
                                .filter_map(|e| e.curve.points[i].metrics.as_ref().and_then(f))
                                .collect();
                            if vals.is_empty() {
                                None
                            } else {
                                Some(vals.iter().sum::<f64>() / vals.len() as f64)
                            }
                        };
                        w.write_record([
                            name.clone(),
                            inclusion.to_string(),
                            metric_cell(avg(&|m| Some(m.error_rate))),
                            metric_cell(avg(&|m| Some(m.statistical_parity))),
                            metric_cell(avg(&|m| m.equalized_odds.get())),
                        ])?;
                    }
                }
            }
            "consistency-box" => {
                let mut any = false;
                w.write_record(["estimator", "seed", "individual", "sigma_std"])?;
                for sr in &report.per_seed {
                    if let ExperimentResult::Consistency { reports } = &sr.result {
                        any = true;
                        for r in reports {
                            for (i, s) in r.per_individual_std.iter().enumerate() {
                                w.write_record([
                                    r.estimator.clone(),
                                    sr.seed.to_string(),
                                    i.to_string(),
                                    s.to_string(),
                                ])?;
                            }
                        }
                    }
                }
                if !any {
                    return Err(Error::domain(
                        "figure `consistency-box` needs a consistency report",
                    ));
                }
            }
            other => {
                return Err(Error::config(
                    "figure",
                    format!("unknown figure `{other}` (expected one of {FIGURES:?})"),
                ));
            }
        }
        w.flush()?;
    }
    String::from_utf8(out).map_err(|e| Error::domain(e.to_string()))
}
