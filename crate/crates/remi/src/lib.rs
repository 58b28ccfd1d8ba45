//! Desk-scale machine-unlearning workbench.
//!
//! Trains small classifiers, mounts membership-inference probes against
//! them, and removes a chosen forget set by descending a combined objective:
//! cross-entropy fidelity on forget + out-of-sample data, plus a privacy
//! term that pushes a frozen membership attack toward "non-member" on the
//! forget set. A full-retraining baseline and an evaluation harness make the
//! two paths comparable on accuracy, attack response, and wall-clock cost.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod layer;
pub mod loss;
pub mod net;
pub mod numcheck;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
pub use tensor::Tensor;
