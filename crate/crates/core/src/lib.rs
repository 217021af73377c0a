//! Scene simulation, the frozen BEV encoder surrogate, text corpora, the
//! single-token projector, the micro language model with LoRA, the two-stage
//! trainer and QA metrics.

pub mod bevenc;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod langdata;
pub mod lm;
pub mod lmtrain;
pub mod params;
pub mod projector;
pub mod scenesim;
pub mod trainer;

pub use error::{BellaError, Result};
