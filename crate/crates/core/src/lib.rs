//! Density rankings induced by trained networks.
//!
//! The crate builds three families of density estimators on small models
//! trained from scratch (an affine coupling flow, a causal-window
//! autoregressive pixel model and generic encoders scored through their
//! Jacobian), ranks evaluation sets by the resulting scores and compares those
//! rankings with each other and with external complexity proxies.
//!
//! Modules follow the data flow of an experiment:
//!
//! - [`data`]: images, datasets, CIFAR-10 / PPM I/O, synthetic complexity tiers, noise.
//! - [`models`]: coupling flow, autoregressive model, encoders, training and checkpoints.
//! - [`estimators`]: flow likelihood, rectangular Jacobian log-volume, autoregressive
//!   self-estimation and score tables.
//! - [`complexity`]: JPEG-style compressed length and gradient (total variation) proxies.
//! - [`analysis`]: rankings, Spearman / Kendall statistics, correlation matrices,
//!   stratified sampling and the second-order expansion diagnostic.
//! - [`harness`]: config-driven experiment runs and their persisted artifacts.

pub mod analysis;
pub mod complexity;
pub mod data;
pub mod estimators;
pub mod harness;
pub mod models;

pub(crate) mod rng;
