//! The (mu, sigma)-producing estimation pipelines, unified behind one
//! interface so evaluation and fairness layers stay estimator-agnostic.
//!
//! Binary estimators: a bagged ensemble (vote spread), the selective
//! ensemble (exact binomial-test p-value on vote counts), the
//! self-(in)consistency score, and the direct binomial NLL model. Regression
//! estimators: the bagged ensemble and the normal / beta / faithful NLL
//! models. A random-uncertainty baseline keeps real labels but draws sigma
//! uniformly.

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::gbt::{self, Loss, PipelineConfig};
use crate::losses::{BetaNll, FaithfulNll, Logistic, NormalNll, SquaredError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A per-observation point estimate plus nonnegative uncertainty. For binary
/// tasks `mu` is a probability (or vote fraction) and `label` the hard
/// decision; regression predictions carry no label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mu: f64,
    pub sigma: f64,
    pub label: Option<u8>,
}

/// Vote counts of a k-member binary ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleCounts {
    pub k: usize,
    pub k0: usize,
    pub k1: usize,
}

impl EnsembleCounts {
    pub fn new(k0: usize, k1: usize) -> Result<Self> {
        let k = k0 + k1;
        if k == 0 {
            return Err(Error::domain("ensemble counts require at least one vote"));
        }
        Ok(EnsembleCounts { k, k0, k1 })
    }

    /// Fraction of members voting 1.
    pub fn vote_fraction(&self) -> f64 {
        self.k1 as f64 / self.k as f64
    }

    /// Population standard deviation of the k binary votes:
    /// `sqrt(k0 k1) / k`.
    pub fn vote_sigma(&self) -> f64 {
        ((self.k0 * self.k1) as f64).sqrt() / self.k as f64
    }

    /// Majority vote; exact ties resolve to 1.
    pub fn majority_label(&self) -> u8 {
        u8::from(self.k1 >= self.k0)
    }

    pub fn is_tie(&self) -> bool {
        self.k0 == self.k1
    }
}

/// Two-sided exact binomial test of the vote counts against Bin(k, 1/2):
/// `min(1, 2 P[Bin(k,1/2) <= min(k0,k1)])`. Larger means more uncertain;
/// a tie is maximally uncertain.
pub fn selective_ensemble_uncertainty(counts: &EnsembleCounts) -> f64 {
    let k = counts.k;
    let m = counts.k0.min(counts.k1);
    if k <= 120 {
        // Exact integer tail: sum_{i<=m} C(k,i), then one dyadic division.
        let mut sum: u128 = 0;
        let mut binom: u128 = 1;
        for i in 0..=m {
            sum += binom;
            binom = binom * (k - i) as u128 / (i + 1) as u128;
        }
        let total = (1u128 << k) as f64;
        (2.0 * (sum as f64) / total).min(1.0)
    } else {
        let ln2 = std::f64::consts::LN_2;
        let tail: f64 = (0..=m)
            .map(|i| {
                let ln_c = libm::lgamma((k + 1) as f64)
                    - libm::lgamma((i + 1) as f64)
                    - libm::lgamma((k - i + 1) as f64);
                (ln_c - k as f64 * ln2).exp()
            })
            .sum();
        (2.0 * tail).min(1.0)
    }
}

/// Probability that two distinct ensemble members disagree:
/// `2 k0 k1 / (k (k-1))`.
pub fn self_inconsistency(counts: &EnsembleCounts) -> Result<f64> {
    if counts.k < 2 {
        return Err(Error::domain("self-inconsistency requires at least 2 members"));
    }
    Ok(2.0 * (counts.k0 * counts.k1) as f64 / (counts.k * (counts.k - 1)) as f64)
}

/// Inverts a binomial standard deviation back to a probability. Of the two
/// roots `(1 -+ sqrt(1 - 4 sigma^2)) / 2`, returns the one on the side of
/// the predicted label. Inputs above 1/2 clamp to 1/2.
pub fn sigma_to_prob(sigma: f64, label: u8) -> f64 {
    let s = sigma.clamp(0.0, 0.5);
    let root = (1.0 - 4.0 * s * s).max(0.0).sqrt();
    if label == 1 {
        (1.0 + root) / 2.0
    } else {
        (1.0 - root) / 2.0
    }
}

/// How a prediction should be turned into a probability for binary NLL
/// scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbSource {
    /// `mu` already is the model probability.
    Mu,
    /// Invert the uncertainty score through [`sigma_to_prob`] using the
    /// predicted label.
    SigmaLabel,
}

/// An estimation pipeline by name and knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    Ensemble { k: usize },
    SelectiveEnsemble { k: usize },
    SelfInconsistency { k: usize },
    BinomialNll,
    NormalNll,
    BetaNll { beta: f64 },
    FaithfulNll,
    Random,
}

impl Estimator {
    /// Resolves a canonical CLI name; `k` and `beta` apply to the ensemble
    /// and beta-NLL estimators respectively.
    pub fn parse(name: &str, k: usize, beta: f64) -> Result<Estimator> {
        match name {
            "ensemble" => Ok(Estimator::Ensemble { k }),
            "selective_ensemble" => Ok(Estimator::SelectiveEnsemble { k }),
            "self_inconsistency" => Ok(Estimator::SelfInconsistency { k }),
            "binomial_nll" => Ok(Estimator::BinomialNll),
            "normal_nll" => Ok(Estimator::NormalNll),
            "beta_nll" => Ok(Estimator::BetaNll { beta }),
            "faithful_nll" => Ok(Estimator::FaithfulNll),
            "random" => Ok(Estimator::Random),
            other => Err(Error::config("estimators", format!("unknown estimator `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Ensemble { .. } => "ensemble",
            Estimator::SelectiveEnsemble { .. } => "selective_ensemble",
            Estimator::SelfInconsistency { .. } => "self_inconsistency",
            Estimator::BinomialNll => "binomial_nll",
            Estimator::NormalNll => "normal_nll",
            Estimator::BetaNll { .. } => "beta_nll",
            Estimator::FaithfulNll => "faithful_nll",
            Estimator::Random => "random",
        }
    }

    pub fn supports(&self, task: Task) -> bool {
        match self {
            Estimator::Ensemble { .. } => true,
            Estimator::SelectiveEnsemble { .. }
            | Estimator::SelfInconsistency { .. }
            | Estimator::BinomialNll
            | Estimator::Random => task == Task::Binary,
            Estimator::NormalNll | Estimator::BetaNll { .. } | Estimator::FaithfulNll => {
                task == Task::Regression
            }
        }
    }

    /// Probability route for binary NLL scoring. The ensemble-derived scores
    /// go through the sigma inversion; the direct models carry `mu` as a
    /// probability.
    pub fn prob_source(&self) -> ProbSource {
        match self {
            Estimator::Ensemble { .. }
            | Estimator::SelectiveEnsemble { .. }
            | Estimator::SelfInconsistency { .. } => ProbSource::SigmaLabel,
            _ => ProbSource::Mu,
        }
    }

    /// Runs the pipeline: trains on `train`, predicts `(mu, sigma)` for
    /// every row of `test`. Deterministic given `(train, test, config)`.
    pub fn run(
        &self,
        train: &Dataset,
        test: &Dataset,
        config: &PipelineConfig,
    ) -> Result<Vec<Prediction>> {
        if !self.supports(train.task()) {
            return Err(Error::domain(format!(
                "estimator `{}` does not support {:?} tasks",
                self.name(),
                train.task()
            )));
        }
        if train.task() != test.task() {
            return Err(Error::domain("train and test tasks differ"));
        }
        match self {
            Estimator::Ensemble { k } => match train.task() {
                Task::Binary => {
                    let counts = binary_vote_counts(train, test, *k, config)?;
                    Ok(counts
                        .iter()
                        .map(|c| Prediction {
                            mu: c.vote_fraction(),
                            sigma: c.vote_sigma(),
                            label: Some(c.majority_label()),
                        })
                        .collect())
                }
                Task::Regression => regression_ensemble(train, test, *k, config),
            },
            Estimator::SelectiveEnsemble { k } => {
                let counts = binary_vote_counts(train, test, *k, config)?;
                Ok(counts
                    .iter()
                    .map(|c| Prediction {
                        mu: c.vote_fraction(),
                        sigma: selective_ensemble_uncertainty(c),
                        label: Some(c.majority_label()),
                    })
                    .collect())
            }
            Estimator::SelfInconsistency { k } => {
                let counts = binary_vote_counts(train, test, *k, config)?;
                counts
                    .iter()
                    .map(|c| {
                        Ok(Prediction {
                            mu: c.vote_fraction(),
                            sigma: self_inconsistency(c)?,
                            label: Some(c.majority_label()),
                        })
                    })
                    .collect()
            }
            Estimator::BinomialNll => binomial_nll_estimate(train, test, config),
            Estimator::NormalNll => regression_nll(train, test, config, &NormalNll),
            Estimator::BetaNll { beta } => {
                regression_nll(train, test, config, &BetaNll::new(*beta)?)
            }
            Estimator::FaithfulNll => regression_nll(train, test, config, &FaithfulNll),
            Estimator::Random => {
                let mut preds = binomial_nll_estimate(train, test, config)?;
                // Independent stream so sigma draws never alias model seeding.
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(0x5e1f);
                for p in &mut preds {
                    p.sigma = rng.gen_range(0.0..1.0);
                }
                Ok(preds)
            }
        }
    }
}

/// Single logistic-loss model; `sigma = sqrt(p (1-p))`.
fn binomial_nll_estimate(
    train: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
) -> Result<Vec<Prediction>> {
    let model = gbt::fit(&train.model_columns(), train.outcome(), &Logistic, config)?;
    let linked = model.predict_linked(&test.model_columns(), &Logistic)?;
    Ok(linked
        .into_iter()
        .map(|(p, sigma)| Prediction {
            mu: p,
            sigma,
            label: Some(u8::from(p >= 0.5)),
        })
        .collect())
}

/// Two-output boosted model with the given NLL-family loss.
fn regression_nll(
    train: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
    loss: &dyn Loss,
) -> Result<Vec<Prediction>> {
    let model = gbt::fit(&train.model_columns(), train.outcome(), loss, config)?;
    let linked = model.predict_linked(&test.model_columns(), loss)?;
    Ok(linked
        .into_iter()
        .map(|(mu, sigma)| Prediction { mu, sigma, label: None })
        .collect())
}

/// Trains `k` models on bootstrap resamples (seeds `seed+1 .. seed+k`) and
/// returns each member's test predictions, in member order.
fn bootstrap_members(
    train: &Dataset,
    test_columns: &[Vec<f64>],
    k: usize,
    config: &PipelineConfig,
    loss: &(dyn Loss + Sync),
) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return Err(Error::domain("ensemble estimators require k >= 2 members"));
    }
    (1..=k as u64)
        .into_par_iter()
        .map(|j| {
            let idx = gbt::bootstrap_indices(train.n_rows(), 1.0, config.seed.wrapping_add(j));
            let boot = train.subset(&idx);
            let model = gbt::fit(&boot.model_columns(), boot.outcome(), loss, config)?;
            let preds = model.predict_linked(test_columns, loss)?;
            Ok(preds.into_iter().map(|(mu, _)| mu).collect())
        })
        .collect()
}

fn binary_vote_counts(
    train: &Dataset,
    test: &Dataset,
    k: usize,
    config: &PipelineConfig,
) -> Result<Vec<EnsembleCounts>> {
    let test_columns = test.model_columns();
    let members = bootstrap_members(train, &test_columns, k, config, &Logistic)?;
    let n = test.n_rows();
    (0..n)
        .map(|i| {
            let k1 = members.iter().filter(|m| m[i] >= 0.5).count();
            EnsembleCounts::new(k - k1, k1)
        })
        .collect()
}

fn regression_ensemble(
    train: &Dataset,
    test: &Dataset,
    k: usize,
    config: &PipelineConfig,
) -> Result<Vec<Prediction>> {
    let test_columns = test.model_columns();
    let members = bootstrap_members(train, &test_columns, k, config, &SquaredError)?;
    Ok(aggregate_regression_members(&members))
}

/// Mean and population standard deviation over member predictions, per row.
fn aggregate_regression_members(members: &[Vec<f64>]) -> Vec<Prediction> {
    let k = members.len() as f64;
    let n = members.first().map_or(0, |m| m.len());
    (0..n)
        .map(|i| {
            let mean = members.iter().map(|m| m[i]).sum::<f64>() / k;
            let var = members.iter().map(|m| (m[i] - mean).powi(2)).sum::<f64>() / k;
            Prediction {
                mu: mean,
                sigma: var.sqrt(),
                label: None,
            }
        })
        .collect()
}
