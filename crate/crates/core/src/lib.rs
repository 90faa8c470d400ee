//! TSCAN: a temporal-spatial correlation attention network for ICU time series.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors, a per-pass reverse-mode tape and the
//!   named parameter store with its checkpoint format.
//! - [`layers`]: positional encoding, multi-head self/cross attention, the
//!   position-wise feed-forward block and the value MLP.
//! - [`model`]: chunking, the Encoder / Fusion-Encoder chain of each branch,
//!   branch fusion heads and attention reports.
//! - [`pipeline`]: stay filtering, event matching, hourly episode assembly,
//!   per-task sample extraction and a synthetic cohort generator.
//! - [`train`]: task losses, optimizers, the mini-batch training loop and a
//!   logistic-regression baseline.
//! - [`metrics`]: AUC-ROC, AUC-PR, linear weighted kappa, MAD and
//!   macro/micro AUC.

pub mod autodiff;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod train;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
pub use error::{Error, Result};
