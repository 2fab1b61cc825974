//! Classical regressors on flattened windows: RBF support vector regression
//! and random forests. Multi-step horizons use one independent regressor per
//! step.

pub mod forest;
pub mod svr;

use thiserror::Error;

pub use forest::{fit_random_forest, ForestModel, ForestParams};
pub use svr::{fit_svr, SvrModel, SvrParams, SvrProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassicalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{0}")]
    Contract(String),
    #[error("SMO did not converge after {iterations} iterations (KKT violation {violation})")]
    NotConverged { iterations: usize, violation: f64 },
    #[error("fitted model violates KKT conditions: {0}")]
    Kkt(String),
}

pub type Result<T> = std::result::Result<T, ClassicalError>;

/// Row count of a row-major matrix of the given width.
pub(crate) fn check_matrix(x: &[f64], width: usize) -> Result<usize> {
    if width == 0 || !x.len().is_multiple_of(width) {
        return Err(ClassicalError::Shape(format!(
            "{} values do not form rows of width {width}",
            x.len()
        )));
    }
    Ok(x.len() / width)
}

/// One fitted regressor per forecast step.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassicalModel {
    Svr(Vec<SvrModel>),
    Forest(Vec<ForestModel>),
}

impl ClassicalModel {
    /// Fits `h` SVRs sharing one kernel matrix; `targets` is row-major `[n, h]`.
    pub fn fit_svr(x: &[f64], width: usize, targets: &[f64], h: usize, params: &SvrParams) -> Result<Self> {
        let n = check_matrix(x, width)?;
        if h == 0 || targets.len() != n * h {
            return Err(ClassicalError::Shape(format!("{} targets for {n} rows of horizon {h}", targets.len())));
        }
        let problem = SvrProblem::new(x, width, params.gamma)?;
        let models = (0..h)
            .map(|step| {
                let y: Vec<f64> = targets.chunks(h).map(|r| r[step]).collect();
                problem.fit(&y, params)
            })
            .collect::<Result<_>>()?;
        Ok(Self::Svr(models))
    }

    /// Fits `h` forests, the step index mixed into each forest's seed.
    pub fn fit_forest(x: &[f64], width: usize, targets: &[f64], h: usize, params: &ForestParams) -> Result<Self> {
        let n = check_matrix(x, width)?;
        if h == 0 || targets.len() != n * h {
            return Err(ClassicalError::Shape(format!("{} targets for {n} rows of horizon {h}", targets.len())));
        }
        let models = (0..h)
            .map(|step| {
                let y: Vec<f64> = targets.chunks(h).map(|r| r[step]).collect();
                let p = ForestParams {
                    seed: params.seed.wrapping_add(step as u64),
                    ..params.clone()
                };
                fit_random_forest(x, width, &y, &p)
            })
            .collect::<Result<_>>()?;
        Ok(Self::Forest(models))
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::Svr(m) => m.len(),
            Self::Forest(m) => m.len(),
        }
    }

    /// Predicts rows of `h` values for a row-major `[n, width]` matrix.
    pub fn predict_batch(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let per_step: Vec<Vec<f64>> = match self {
            Self::Svr(ms) => ms.iter().map(|m| m.predict(x)).collect::<Result<_>>()?,
            Self::Forest(ms) => ms.iter().map(|m| m.predict(x)).collect::<Result<_>>()?,
        };
        let n = per_step.first().map_or(0, Vec::len);
        Ok((0..n).map(|i| per_step.iter().map(|s| s[i]).collect()).collect())
    }
}
