//! Self-supervised pretraining pipeline for 3D sinus-volume anomaly
//! classification.
//!
//! The pipeline: generate (or ingest) sinus-side volumes, split them at
//! patient level, train a convolutional autoencoder on normal anatomy,
//! sweep it over unlabelled volumes to produce residual pseudo-targets,
//! pretrain an encoder by reconstructing those residuals (with plain and
//! denoising autoencoder baselines), then fine-tune the encoder with a
//! classification head on labelled data and evaluate with ranking metrics.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod seeding;
pub mod splits;
pub mod ssl;
pub mod uad;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume;
