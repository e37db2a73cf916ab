//! Cross-silo federated learning simulator for clinical risk models.
//!
//! The numeric core (`models`, `optim`, `privacy`, `metrics`) is generic over
//! the scalar type through [`Scalar`]; the aliases below pin it to `f64`,
//! which is what the data pipeline, federation driver and experiment runner
//! use.

// Parameter checks are written `!(x > 0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod privacy;
pub mod rng;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamVec = models::ParamVector<f64>;
pub type Adam = optim::AdamState<f64>;
pub type Dp = optim::DpConfig<f64>;
pub type Scores = metrics::ScoredSet<f64>;
pub type Auc = metrics::AucEstimate<f64>;
pub type AucDelta = metrics::AucDiff<f64>;
pub type Accountant = privacy::AccountantParams<f64>;
pub type Curve = privacy::RdpCurve<f64>;
pub type Ledger = privacy::PrivacyLedger<f64>;
