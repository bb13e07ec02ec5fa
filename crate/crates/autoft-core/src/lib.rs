//! AutoFT: adaptive transfer learning for deep CTR models.
//!
//! The crate implements a Deep & Cross Network backbone from scratch
//! (embedding, cross and deep stacks, sigmoid prediction, hand-derived
//! backward passes), a pre-train / freeze / fine-tune protocol, and
//! instance-conditioned Gumbel-Softmax policy networks that route each
//! instance through pre-trained or fine-tuned parameters field-by-field
//! (embeddings) and layer-by-layer (cross and deep stacks).
//!
//! Modules:
//! - [`numerics`]: dense matrices, seeded RNG, finite-difference checker
//! - [`features`]: schemas, vocabularies, CSV encoding
//! - [`dcn`]: the DCN/DNN backbone and its gradients
//! - [`policy`]: routing policies and the straight-through estimator
//! - [`training`]: Adam, minibatch loops, stage orchestration
//! - [`metrics`]: AUC, LogLoss, routing-fraction and results reports
//! - [`synth`]: seeded cross-domain synthetic benchmark generator
//! - [`checkpoint`]: bit-exact parameter containers
//! - [`rundir`]: run-directory layout (config snapshot, logs, dumps)

pub mod checkpoint;
pub mod dcn;
pub mod error;
pub mod features;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod rundir;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
