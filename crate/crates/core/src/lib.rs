//! Desk-scale dialogue-model training and calibration workbench.
//!
//! The crate trains a small encoder-decoder transformer on query/reply
//! corpora, supports label-smoothed and temperature-scaled objectives,
//! self-distillation with fixed or NLL-optimal temperatures, and evaluates
//! models with BLEU-1, METEOR, perplexity, and expected calibration error.

pub mod autodiff;
pub mod calibration;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
mod numerics;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
