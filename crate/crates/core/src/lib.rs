//! Next merchant category prediction benchmark.
//!
//! Pipeline: [`synthgen`] builds two synthetic banks, [`preprocess`] cleans
//! them, [`instructions`] turns customer windows into instruction pairs, and
//! four predictor families ([`baseline`], [`seqmodels`] LSTM/CNN, and the
//! LoRA-adapted language model in [`lora_lm`]) are scored by [`eval`] on the
//! held-out bank at several history lengths. [`autodiff`] is the tensor
//! engine under the neural models.

pub mod autodiff;
pub mod baseline;
pub mod domain;
pub mod error;
pub mod eval;
pub mod instructions;
pub mod io;
pub mod lora_lm;
pub mod par;
pub mod preprocess;
pub mod seqmodels;
pub mod synthgen;

pub use domain::{Category, CustomerProfile, Dataset, Merchant, Money, Transaction};
pub use error::{Error, Result};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
