//! Small dense numeric core: MLPs with explicit backward passes, diagonal
//! Gaussian / Laplace densities, Adam and a seeded PRNG.
//!
//! Everything here runs in `f64`. There is no autodiff graph; each layer
//! exposes its own backward rule and every rule is checked against central
//! finite differences in the test suite.

pub mod adam;
pub mod dist;
pub mod mlp;
pub mod ops;
pub mod rng;

pub use adam::AdamState;
pub use dist::{gaussian_kl, gaussian_logpdf, laplace_logpdf, reparameterize, DiagonalGaussian};
pub use mlp::{Layer, Mlp, MlpGrad, OutputActivation};
pub use ops::{softmax_ce_logit_grad, softplus};
