//! Multiple regression kernels used by the pre-selection procedures.
//!
//! [`ols_fit`] is a Householder-QR least squares fit; [`lad_fit`] minimises
//! the sum of absolute residuals with a simplex-type descent over
//! interpolating bases.

mod lad;
mod ols;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use lad::lad_fit;
pub(crate) use lad::lad_solve;
#[allow(unused_imports)]
pub(crate) use lad::LadSolution;
pub use ols::ols_fit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("design has {rows} rows and {columns} columns but response has {response} values")]
    Shape {
        rows: usize,
        columns: usize,
        response: usize,
    },
    #[error("ill-posed: {observations} observations for {parameters} parameters")]
    Underdetermined {
        observations: usize,
        parameters: usize,
    },
    #[error("rank-deficient design, dependent regressor columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error("LAD linear program did not terminate within {iterations} iterations (degenerate)")]
    LpDegenerate { iterations: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(String),
}

/// A regression of `response` on the columns of `design`, with an optional
/// intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub intercept: bool,
}

impl RegressionProblem {
    pub fn new(
        design: DMatrix<f64>,
        response: DVector<f64>,
        intercept: bool,
    ) -> Result<Self, RegressionError> {
        let p = Self {
            design,
            response,
            intercept,
        };
        p.check_shape()?;
        Ok(p)
    }

    pub fn observations(&self) -> usize {
        self.design.nrows()
    }

    pub fn regressors(&self) -> usize {
        self.design.ncols()
    }

    /// Regressors plus the intercept, if any.
    pub fn parameters(&self) -> usize {
        self.design.ncols() + usize::from(self.intercept)
    }

    fn check_shape(&self) -> Result<(), RegressionError> {
        if self.design.nrows() != self.response.len() {
            return Err(RegressionError::Shape {
                rows: self.design.nrows(),
                columns: self.design.ncols(),
                response: self.response.len(),
            });
        }
        Ok(())
    }

    /// Checks shape and that there are more observations than parameters.
    pub(crate) fn check_well_posed(&self) -> Result<(), RegressionError> {
        self.check_shape()?;
        if self.observations() <= self.parameters() {
            return Err(RegressionError::Underdetermined {
                observations: self.observations(),
                parameters: self.parameters(),
            });
        }
        Ok(())
    }

    /// Design with a leading column of ones when the intercept is on.
    pub(crate) fn augmented(&self) -> DMatrix<f64> {
        if !self.intercept {
            return self.design.clone();
        }
        let m = self.design.nrows();
        let mut a = DMatrix::zeros(m, self.design.ncols() + 1);
        a.column_mut(0).fill(1.0);
        a.columns_mut(1, self.design.ncols()).copy_from(&self.design);
        a
    }

    /// Sum of absolute residuals at the given coefficients.
    pub fn abs_loss(&self, coefficients: &[f64], intercept: f64) -> f64 {
        self.residuals_at(coefficients, intercept)
            .iter()
            .map(|r| r.abs())
            .sum()
    }

    /// Sum of squared residuals at the given coefficients.
    pub fn sq_loss(&self, coefficients: &[f64], intercept: f64) -> f64 {
        self.residuals_at(coefficients, intercept)
            .iter()
            .map(|r| r * r)
            .sum()
    }

    pub fn residuals_at(&self, coefficients: &[f64], intercept: f64) -> DVector<f64> {
        let beta = DVector::from_column_slice(coefficients);
        let shift = if self.intercept { intercept } else { 0.0 };
        (&self.response - &self.design * beta).add_scalar(-shift)
    }
}

/// Fit output shared by both loss functions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    /// One coefficient per regressor column.
    pub coefficients: Vec<f64>,
    /// Present iff the problem has an intercept.
    pub intercept_value: Option<f64>,
    pub residuals: Vec<f64>,
    /// Centered (with intercept) or uncentered (without) adjusted R².
    pub adjusted_r2: f64,
    /// `beta / se(beta)` per regressor. Only computed for least squares fits.
    pub t_values: Option<Vec<f64>>,
    /// Mean absolute residual.
    pub mad: f64,
    /// `beta_j * sd(x_j) / sd(y)` per regressor (sample standard deviations).
    pub standardized_coefficients: Vec<f64>,
}

impl RegressionFit {
    pub fn sse(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    pub fn sae(&self) -> f64 {
        self.residuals.iter().map(|r| r.abs()).sum()
    }

    /// Assembles the statistics common to both fits from coefficients.
    pub(crate) fn from_coefficients(
        problem: &RegressionProblem,
        coefficients: Vec<f64>,
        intercept_value: Option<f64>,
        t_values: Option<Vec<f64>>,
    ) -> Self {
        let residuals = problem.residuals_at(&coefficients, intercept_value.unwrap_or(0.0));
        let m = problem.observations();
        let sse: f64 = residuals.iter().map(|r| r * r).sum();
        let adjusted_r2 = adjusted_r2(
            sse,
            problem.response.as_slice(),
            problem.regressors(),
            problem.intercept,
        );
        let sd_y = sample_sd(problem.response.as_slice());
        let standardized_coefficients = coefficients
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let col: Vec<f64> = problem.design.column(j).iter().copied().collect();
                b * sample_sd(&col) / sd_y
            })
            .collect();
        let mad = residuals.iter().map(|r| r.abs()).sum::<f64>() / m as f64;
        Self {
            coefficients,
            intercept_value,
            residuals: residuals.as_slice().to_vec(),
            adjusted_r2,
            t_values,
            mad,
            standardized_coefficients,
        }
    }
}

/// Adjusted R² for `p` regressors. With an intercept the centered R² is
/// adjusted by `(m-1)/(m-p-1)`; without, the uncentered `1 - SSE/sum(y²)` is
/// adjusted by `m/(m-p)`.
pub fn adjusted_r2(sse: f64, response: &[f64], p: usize, intercept: bool) -> f64 {
    let m = response.len() as f64;
    let p = p as f64;
    let (total, dof_ratio) = if intercept {
        let mean = response.iter().sum::<f64>() / m;
        let sst: f64 = response.iter().map(|y| (y - mean).powi(2)).sum();
        (sst, (m - 1.0) / (m - p - 1.0))
    } else {
        (response.iter().map(|y| y * y).sum::<f64>(), m / (m - p))
    };
    let r2 = if total > 0.0 {
        1.0 - sse / total
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    1.0 - (1.0 - r2) * dof_ratio
}

pub(crate) fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Rescales every regressor and the response to zero mean and unit sample
/// standard deviation.
pub fn standardize(problem: &RegressionProblem) -> Result<RegressionProblem, RegressionError> {
    problem.check_shape()?;
    fn scale(v: &mut [f64], name: impl FnOnce() -> String) -> Result<(), RegressionError> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(RegressionError::ZeroVariance(name()));
        }
        v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
        Ok(())
    }
    let mut design = problem.design.clone();
    for j in 0..design.ncols() {
        let mut col: Vec<f64> = design.column(j).iter().copied().collect();
        scale(&mut col, || format!("regressor column {j}"))?;
        design.column_mut(j).copy_from_slice(&col);
    }
    let mut response = problem.response.as_slice().to_vec();
    scale(&mut response, || "response".to_string())?;
    Ok(RegressionProblem {
        design,
        response: DVector::from_vec(response),
        intercept: problem.intercept,
    })
}

/// Columns of `a` that are (numerically) linear combinations of earlier
/// columns, found from the diagonal of a Householder QR.
pub(crate) fn dependent_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let (m, q) = a.shape();
    if m < q {
        // QR of a wide matrix: flag everything past the row count.
        let mut cols = dependent_columns(&a.columns(0, m).into_owned());
        cols.extend(m..q);
        return cols;
    }
    let r = a.clone().qr().r();
    (0..q)
        .filter(|&j| {
            let norm = a.column(j).norm();
            norm == 0.0 || r[(j, j)].abs() <= 1e-10 * norm
        })
        .collect()
}
