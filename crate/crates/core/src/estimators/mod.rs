//! Density estimators induced by networks: exact flow likelihood, the
//! rectangular Jacobian log-volume estimator for encoders and autoregressive
//! self-estimation.

mod jacobian;
mod table;

pub use jacobian::{jacobian_logvol, numerical_jacobian, singular_values, Matrix};
pub use table::{EstimatorTag, ProxyTag, Score, ScoreTable, ScoreTag, Term, ESTIMATOR_HEADER, PROXY_HEADER};

use std::convert::Infallible;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{dequantize, Dataset, Image};
use crate::models::{ArModel, CouplingFlow, Encoder, ModelError};
use crate::rng;

/// Seed of the evaluation-time dequantization noise; each sample draws from
/// its own stream keyed by id.
pub const EVAL_DEQUANT_SEED: u64 = 0xE7A1_0000_0000_0001;

/// Default step of the central-difference Jacobian.
pub const JACOBIAN_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite map output")]
    NonFinite,
    #[error("every singular value is below the rank threshold")]
    DegenerateJacobian,
    #[error("score tables cover different ids")]
    IdMismatch,
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("sample {id}: {source}")]
    Sample {
        id: u64,
        #[source]
        source: Box<EstimatorError>,
    },
}

impl From<Infallible> for EstimatorError {
    fn from(e: Infallible) -> Self {
        match e {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityScore {
    pub total: f64,
    pub latent_term: Option<f64>,
    pub jacobian_term: Option<f64>,
    pub estimator_tag: EstimatorTag,
}

impl DensityScore {
    fn decomposed(latent: f64, jacobian: f64, tag: EstimatorTag) -> Self {
        Self {
            total: latent + jacobian,
            latent_term: Some(latent),
            jacobian_term: Some(jacobian),
            estimator_tag: tag,
        }
    }
}

/// Standard normal in `R^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDensity {
    pub dim: usize,
}

impl ReferenceDensity {
    pub fn standard_normal(dim: usize) -> Self {
        Self { dim }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64, EstimatorError> {
        if z.len() != self.dim {
            return Err(EstimatorError::Dimension {
                expected: self.dim,
                got: z.len(),
            });
        }
        let sq: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * sq - 0.5 * self.dim as f64 * (2.0 * PI).ln())
    }
}

/// `log p0(f(x)) + log |det J_f(x)|` on continuous input `x`.
pub fn flow_log_density(flow: &CouplingFlow, x: &[f64]) -> Result<DensityScore, EstimatorError> {
    let (z, logdet) = flow.forward(x)?;
    let latent = ReferenceDensity::standard_normal(flow.dim()).log_density(&z)?;
    Ok(DensityScore::decomposed(latent, logdet, EstimatorTag::Flow))
}

/// `sum_t log p(x_t | x_<t)`.
pub fn ar_log_density(model: &ArModel, x: &[u8]) -> Result<DensityScore, EstimatorError> {
    Ok(DensityScore {
        total: model.conditionals(x)?.iter().sum(),
        latent_term: None,
        jacobian_term: None,
        estimator_tag: EstimatorTag::Autoregressive,
    })
}

/// Reference log-density of `enc(x)` plus the negated log-volume of the
/// encoder's numerical Jacobian at `x`.
pub fn jacobian_density(
    enc: &Encoder,
    x: &[f64],
    reference: &ReferenceDensity,
    eps: f64,
) -> Result<DensityScore, EstimatorError> {
    if reference.dim != enc.output_dim() {
        return Err(EstimatorError::Dimension {
            expected: enc.output_dim(),
            got: reference.dim,
        });
    }
    let z = enc.forward(x)?;
    let latent = reference.log_density(&z)?;
    let j = numerical_jacobian(|v: &[f64]| enc.forward(v), x, eps)?;
    Ok(DensityScore::decomposed(latent, -jacobian_logvol(&j)?, EstimatorTag::JacobianRect))
}

/// The frozen-model side of [`score_dataset`].
pub trait DensityEstimator: Sync {
    fn score(&self, id: u64, img: &Image) -> Result<DensityScore, EstimatorError>;
}

/// Flow likelihood on dequantized pixels with per-id fixed noise.
#[derive(Debug, Clone, Copy)]
pub struct FlowScorer<'a> {
    pub flow: &'a CouplingFlow,
    pub dequant_seed: u64,
}

impl<'a> FlowScorer<'a> {
    pub fn new(flow: &'a CouplingFlow) -> Self {
        Self {
            flow,
            dequant_seed: EVAL_DEQUANT_SEED,
        }
    }

    /// The continuous input the flow sees for `(id, img)`.
    pub fn input(&self, id: u64, img: &Image) -> Vec<f64> {
        dequantize(img.pixels_q(), &mut rng::stream(self.dequant_seed, id))
    }
}

impl DensityEstimator for FlowScorer<'_> {
    fn score(&self, id: u64, img: &Image) -> Result<DensityScore, EstimatorError> {
        flow_log_density(self.flow, &self.input(id, img))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ArScorer<'a>(pub &'a ArModel);

impl DensityEstimator for ArScorer<'_> {
    fn score(&self, _id: u64, img: &Image) -> Result<DensityScore, EstimatorError> {
        ar_log_density(self.0, img.pixels_q())
    }
}

/// Rectangular Jacobian estimator on float pixels.
#[derive(Debug, Clone, Copy)]
pub struct EncoderScorer<'a> {
    pub encoder: &'a Encoder,
    pub eps: f64,
}

impl DensityEstimator for EncoderScorer<'_> {
    fn score(&self, _id: u64, img: &Image) -> Result<DensityScore, EstimatorError> {
        let reference = ReferenceDensity::standard_normal(self.encoder.output_dim());
        jacobian_density(self.encoder, img.pixels_f(), &reference, self.eps)
    }
}

/// One score per id, computed in parallel and assembled by id.
pub fn score_dataset<E: DensityEstimator>(estimator: &E, ds: &Dataset) -> Result<ScoreTable, EstimatorError> {
    let rows: Vec<(u64, Result<DensityScore, EstimatorError>)> = ds
        .ids()
        .par_iter()
        .zip(ds.images().par_iter())
        .map(|(&id, img)| (id, estimator.score(id, img)))
        .collect();
    let mut table = ScoreTable::new();
    for (id, score) in rows {
        let score = score.map_err(|e| EstimatorError::Sample {
            id,
            source: Box::new(e),
        })?;
        table.insert(id, Score::from(score));
    }
    Ok(table)
}
