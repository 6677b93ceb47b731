//! Dense audio-visual event localization on precomputed snippet features:
//! early multi-modal fusion with per-stage semantic guidance, a hard-gated
//! mixture of dependency experts, anchor-free decoding and mAP evaluation.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod model;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
