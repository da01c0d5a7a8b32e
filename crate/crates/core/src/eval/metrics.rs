//! Ranking metrics and interval estimates.

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric over an empty input")]
    EmptyInput,
    #[error("token efficiency needs at least one generated step")]
    ZeroGenerated,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Mean reciprocal rank; a miss (`None`) contributes 0.
pub fn mrr(ranks: &[Option<usize>]) -> Result<f64, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let sum: f64 = ranks
        .iter()
        .map(|r| r.map_or(0.0, |r| 1.0 / r as f64))
        .sum();
    Ok(sum / ranks.len() as f64)
}

/// Fraction of ranks within the top `k`.
pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if ranks.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let hits = ranks
        .iter()
        .filter(|r| matches!(r, Some(r) if *r <= k))
        .count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Fraction of points whose generated identifier equals the ground truth.
pub fn exact_match<S: AsRef<str>>(
    generated: &[Option<S>],
    truths: &[S],
) -> Result<f64, MetricError> {
    if generated.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let hits = generated
        .iter()
        .zip(truths)
        .filter(|(g, t)| g.as_ref().is_some_and(|g| g.as_ref() == t.as_ref()))
        .count();
    Ok(hits as f64 / generated.len() as f64)
}

/// Ground-truth token count over decode steps.
pub fn token_efficiency(gt_token_len: usize, generated_steps: usize) -> Result<f64, MetricError> {
    if generated_steps == 0 {
        return Err(MetricError::ZeroGenerated);
    }
    Ok(gt_token_len as f64 / generated_steps as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 below two samples.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Mean and 95% Student-t half-width; no half-width below two samples.
pub fn mean_ci95(xs: &[f64]) -> (f64, Option<f64>) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, None);
    }
    let n = xs.len() as f64;
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    (m, Some(t * std_dev(xs) / n.sqrt()))
}
