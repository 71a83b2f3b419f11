//! Unsupervised cross-view embedding learning guided by soft multilabels.
//!
//! The library trains a small encoder so that images of the same person taken
//! from different views land close together on the unit sphere, without any
//! labels on the target data. Supervision is bootstrapped from a labeled
//! auxiliary dataset through a bank of reference agents: each unlabeled
//! embedding is compared against the agents to produce a soft multilabel,
//! and agreement between soft multilabels decides which visually similar
//! pairs are treated as genuine matches.
//!
//! Modules roughly follow the pipeline: [`data`] synthesizes or loads feature
//! datasets, [`encoder`] maps features to unit embeddings, [`softlabel`]
//! builds labels and the cross-view consistency loss, [`mining`] selects
//! positive and hard-negative pairs, [`agents`] holds the reference bank and
//! its losses, [`trainer`] runs the two-phase schedule, and [`evalset`]
//! scores retrieval quality.

pub mod agents;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalset;
pub mod geometry;
pub mod mining;
pub mod softlabel;
pub mod trainer;

pub use config::{FullConfig, MiningMode, TrainConfig};
pub use error::{MarError, Result};
