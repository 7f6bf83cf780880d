use nalgebra::{DMatrix, DVector};

use super::{dependent_columns, RegressionError, RegressionFit, RegressionProblem};

/// Ordinary least squares via Householder QR.
///
/// t-values use the unbiased residual variance `SSE / (m - p - κ)`. An exact
/// fit has zero standard errors; its t-values are `±inf` (or 0 for a zero
/// coefficient).
pub fn ols_fit(problem: &RegressionProblem) -> Result<RegressionFit, RegressionError> {
    problem.check_well_posed()?;
    let a = problem.augmented();
    let offset = usize::from(problem.intercept);
    let q = a.ncols();
    let m = a.nrows();

    let qr = a.clone().qr();
    let r = qr.r();
    let deficient: Vec<usize> = (0..q)
        .filter(|&j| {
            let norm = a.column(j).norm();
            norm == 0.0 || r[(j, j)].abs() <= 1e-10 * norm
        })
        .collect();
    if !deficient.is_empty() {
        // Re-derive from scratch so the reported set is stable.
        let cols = dependent_columns(&a);
        return Err(RegressionError::RankDeficient {
            columns: cols
                .into_iter()
                .filter(|&c| c >= offset)
                .map(|c| c - offset)
                .collect(),
        });
    }
    let qty = qr.q().transpose() * &problem.response;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| RegressionError::RankDeficient {
            columns: dependent_columns(&a),
        })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(q, q))
        .expect("triangular factor checked non-singular");

    let resid: DVector<f64> = &problem.response - &a * &beta;
    let sse = resid.norm_squared();
    let sigma2 = sse / (m - q) as f64;
    let t_values: Vec<f64> = (offset..q)
        .map(|j| {
            let var = sigma2 * r_inv.row(j).norm_squared();
            let se = var.sqrt();
            if se > 0.0 {
                beta[j] / se
            } else if beta[j] == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(beta[j])
            }
        })
        .collect();
    let coefficients = beta.as_slice()[offset..].to_vec();
    let intercept = problem.intercept.then(|| beta[0]);
    Ok(RegressionFit::from_coefficients(
        problem,
        coefficients,
        intercept,
        Some(t_values),
    ))
}
