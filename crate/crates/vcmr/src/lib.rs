//! Video-conditioned music representation learning on raw waveforms.
//!
//! The pipeline has three stages: contrastive pre-training on audio alone,
//! multimodal contrastive pre-training against per-second video context
//! vectors, and supervised fine-tuning of a small tagging head on top of the
//! frozen audio backbone. Supporting machinery covers corpus curation,
//! feature caching, waveform augmentation, multi-label evaluation and the
//! resolution / data-scarcity ablation drivers.

pub mod augment;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
