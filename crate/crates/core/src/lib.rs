//! Noise-robust skeleton action recognition.
//!
//! The crate covers the full training pipeline for learning from
//! noisily-labelled skeleton sequences:
//!
//! - [`skeleton`]: sequence data model, the joint / bone / motion streams,
//!   dataset I/O and a seeded synthetic corpus;
//! - [`noise`]: symmetric label-noise injection with provenance, and
//!   selector precision / recall against that provenance;
//! - [`model`]: the [`model::Classifier`] trait, a reference spatio-temporal
//!   GCN and the expert gate network;
//! - [`cross_training`]: co-teaching of two peer networks with a small-loss
//!   keep-ratio schedule;
//! - [`global_select`]: clean-set construction from the three experts' loss
//!   rankings;
//! - [`cm_moe`]: gated mixture of the three experts, and the fixed-weight
//!   ensemble;
//! - [`harness`]: configuration, the end-to-end pipeline, evaluation,
//!   ablations and plots.

pub mod cm_moe;
pub mod cross_training;
pub mod digest;
pub mod error;
pub mod global_select;
pub mod harness;
pub mod model;
pub mod noise;
pub mod par;
pub mod skeleton;
pub mod stream;

pub use error::{Error, Result};
