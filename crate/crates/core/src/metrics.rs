//! Point-forecast error measures.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {actual} actual vs {predicted} predicted values")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("cannot score an empty prediction set")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

fn check(y: &[f64], yhat: &[f64]) -> Result<(), MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch {
            actual: y.len(),
            predicted: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    match y.iter().zip(yhat).position(|(a, b)| !(a.is_finite() && b.is_finite())) {
        Some(i) => Err(MetricError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Mean absolute error.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean squared error.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}
