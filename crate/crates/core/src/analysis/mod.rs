//! Rankings, rank correlations, stratified sampling and the second-order
//! expansion diagnostic.

mod correlation;
mod ranking;

pub use correlation::{correlation_matrix, kendall_tau, spearman, CorrelationMatrix, Stat};
pub use ranking::{rank_by_score, stratified_sample, Ranking, RankingJson};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("nothing to rank")]
    Empty,
    #[error("score of id {id} is NaN")]
    NanScore { id: u64 },
    #[error("rankings cover different ids")]
    IdMismatch,
    #[error("need at least 2 samples, got {n}")]
    TooFew { n: usize },
    #[error("correlation undefined: a ranking is entirely tied")]
    Undefined,
    #[error("{bins} bins cannot split {n} samples")]
    Bins { bins: usize, n: usize },
    #[error("{per_bin} samples requested from a stratum of {size}")]
    StratumTooSmall { per_bin: usize, size: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("scorer returned a non-finite value near dimension {dim}")]
    NonFinite { dim: usize },
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

/// Second-difference estimate of the diagonal of the Hessian of `score` at `x0`:
/// `(s(x0 + eps e_j) - 2 s(x0) + s(x0 - eps e_j)) / eps^2`.
pub fn log_density_hessian_diag<F, E>(score: F, x0: &[f64], eps: f64) -> Result<Vec<f64>, AnalysisError>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: std::fmt::Display,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AnalysisError::InvalidStep(eps));
    }
    let eval = |x: &[f64], dim: usize| -> Result<f64, AnalysisError> {
        let v = score(x).map_err(|e| AnalysisError::Scorer(e.to_string()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AnalysisError::NonFinite { dim })
        }
    };
    let center = eval(x0, 0)?;
    let mut probe = x0.to_vec();
    (0..x0.len())
        .map(|j| {
            probe[j] = x0[j] + eps;
            let plus = eval(&probe, j)?;
            probe[j] = x0[j] - eps;
            let minus = eval(&probe, j)?;
            probe[j] = x0[j];
            Ok((plus - 2.0 * center + minus) / (eps * eps))
        })
        .collect()
}

/// `0.5 * sum_j h_j (var_q_j - var_p_j)`.
pub fn second_order_gap(hess_diag: &[f64], var_q: &[f64], var_p: &[f64]) -> Result<f64, AnalysisError> {
    if hess_diag.len() != var_q.len() {
        return Err(AnalysisError::Length(hess_diag.len(), var_q.len()));
    }
    if var_q.len() != var_p.len() {
        return Err(AnalysisError::Length(var_q.len(), var_p.len()));
    }
    Ok(0.5 * compensated_sum(hess_diag.iter().zip(var_q.iter().zip(var_p)).map(|(h, (q, p))| h * (q - p))))
}

/// Neumaier-compensated summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}
