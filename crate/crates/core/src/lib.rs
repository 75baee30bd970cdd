//! Post-hoc calibration of frozen classifiers.
//!
//! - [`dataset`]: CALD files of (features, logits, labels), splits and
//!   synthetic generators with known optimal temperatures.
//! - [`metrics`]: ECE, AdaECE, reliability tables, NLL, Brier, AURRA.
//! - [`tempscale`]: single-temperature scaling fitted by grid search.
//! - [`adats`]: per-sample temperatures predicted from class-conditional
//!   VAE latent likelihoods.
//! - [`analysis`]: gradient verification and probes of trained models.
//! - [`nn`]: the small numeric core the models are built on.

// Negated range checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adats;
pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tempscale;

pub use adats::{calibrate, load_model, save_model, train, AdaTsModel, TrainConfig, TrainReport};
pub use dataset::{read_dataset, split_dataset, write_dataset, CalibrationDataset, DatasetSplit};
pub use error::{Error, Result};
pub use metrics::{BinScheme, ReliabilityDiagram, ScoreKind, Temperatures};
pub use tempscale::{
    fit_vanilla, softmax_with_temperature, FitObjective, TemperatureGrid, VanillaScaler,
};
