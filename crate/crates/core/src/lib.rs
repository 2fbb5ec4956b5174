//! Heteroscedastic uncertainty estimation and fairness evaluation for
//! tabular prediction tasks.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`data`] — dataset representation, CSV ingestion, deterministic
//!   splitting, and synthetic generators with known ground-truth noise.
//! * [`gbt`] — a second-order gradient-boosted tree engine with a pluggable
//!   loss contract.
//! * [`losses`] — concrete losses: squared error, logistic, and the
//!   normal / beta / faithful negative log-likelihood family.
//! * [`estimators`] — the (mu, sigma)-producing estimation pipelines:
//!   bagged ensembles, vote-statistics scores, and direct NLL models.
//! * [`eval`] — consistency sweeps, binned calibration, and NLL scoring.
//! * [`fairness`] — group fairness metrics, the abstention harness,
//!   KS-based distributional parity on mixture CDFs, and Wasserstein
//!   feature-shift analysis.
//! * [`experiment`] — batch experiment runner behind the CLI: JSON config
//!   in, JSON report plus CSV tables out.

// `!(x > 0.0)`-style guards are deliberate: they reject NaN where the
// comparison rewrite would accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod experiment;
pub mod fairness;
pub mod gbt;
pub mod losses;

pub use error::{Error, Result};
