//! Config-driven experiment runs and their persisted artifacts.
//!
//! A run owns one output directory, guarded by a lock file. Every file it
//! writes is hashed into `manifest.json`, which carries the verbatim config
//! text and all derived seeds but no timestamps, so identical configs give
//! byte-identical directories.

mod artifacts;
mod config;
mod runs;
pub mod svg;

pub use artifacts::{sha256_hex, Divergence, FileEntry, Manifest, RunArtifacts, RunDir, LOCK_FILE, MANIFEST_FILE};
pub use config::{ConditionerKind, DatasetConfig, ExperimentConfig, Family, ModelConfig, PerturbConfig, Regime, Source, StripConfig};
pub use runs::{
    dominance, emit_rank_strip, expect_flow, fit_model, perturb_inputs, run_base, run_dominance, run_ldt, run_perturbation,
    run_proxy_matrix, score_model, scores_file, select_lowest_density, with_proxies, write_matrices, BaseRun,
    BaseScores, CheckpointCorrelation, DominanceReport, Fit, LdtReport, LdtRun, PerturbReport, Selection,
    SetSummary, Splits,
};

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::complexity::ComplexityError;
use crate::data::DataError;
use crate::estimators::EstimatorError;
use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("output directory {0} is locked by another run")]
    Locked(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("operation needs a {0} model")]
    Family(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Complexity(#[from] ComplexityError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl HarnessError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(..) => "io",
            HarnessError::Locked(_) => "locked",
            HarnessError::Corrupt(_) => "corrupt",
            HarnessError::Family(_) => "family",
            HarnessError::Data(_) => "data",
            HarnessError::Model(_) => "model",
            HarnessError::Estimator(_) => "estimator",
            HarnessError::Complexity(_) => "complexity",
            HarnessError::Analysis(_) => "analysis",
        }
    }
}
