//! Least absolute deviation regression.
//!
//! The L1 problem `min sum |y_t - x_t·b|` is a linear program whose vertices
//! are fits interpolating `q` observations (`q` = regressors + intercept).
//! The solver walks between such vertices: at each one it prices every edge
//! (releasing one interpolated observation, in either direction), takes the
//! most negative directional derivative, and moves along the edge to the
//! weighted-median breakpoint, possibly passing several kinks in one step.
//! This is the condensed-tableau strategy of Barrodale and Roberts.
//!
//! Observations with zero residual outside the basis carry the side they were
//! last on; a pivot may cross them at zero step length, which is how
//! degenerate vertices are left.
//!
//! After a step that fails to decrease the objective the rule switches to
//! Bland's: the lowest-indexed improving edge is taken, and ties among
//! breakpoints go to the lowest observation index.

use nalgebra::{DMatrix, DVector};

use super::{dependent_columns, RegressionError, RegressionFit, RegressionProblem};

pub(crate) struct LadSolution {
    pub fit: RegressionFit,
    /// Observations interpolated by the optimal vertex.
    pub basis: Vec<usize>,
}

/// Least absolute deviation fit. Ties between optimal vertices are resolved
/// deterministically.
pub fn lad_fit(problem: &RegressionProblem) -> Result<RegressionFit, RegressionError> {
    lad_solve(problem, None).map(|s| s.fit)
}

/// Picks `q` linearly independent rows, trying `preferred` first and then
/// every row in index order.
fn initial_basis(a: &DMatrix<f64>, preferred: &[usize]) -> Option<Vec<usize>> {
    let (m, q) = a.shape();
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(q);
    let mut basis = Vec::with_capacity(q);
    let mut taken = vec![false; m];
    let candidates: Vec<usize> = preferred.iter().copied().chain(0..m).collect();
    for t in candidates {
        if basis.len() == q {
            break;
        }
        if t >= m || taken[t] {
            continue;
        }
        let row = a.row(t).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.clone();
        // Two Gram-Schmidt passes for stability.
        for _ in 0..2 {
            for u in &ortho {
                let c = u.dot(&v);
                v.axpy(-c, u, 1.0);
            }
        }
        let vn = v.norm();
        if vn > 1e-9 * norm {
            ortho.push(v / vn);
            basis.push(t);
            taken[t] = true;
        }
    }
    (basis.len() == q).then_some(basis)
}

fn basis_inverse(a: &DMatrix<f64>, basis: &[usize]) -> Option<DMatrix<f64>> {
    let q = basis.len();
    let mut xb = DMatrix::zeros(q, q);
    for (i, &t) in basis.iter().enumerate() {
        xb.row_mut(i).copy_from(&a.row(t));
    }
    xb.try_inverse()
}

struct Vertex {
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    beta: DVector<f64>,
    resid: DVector<f64>,
}

impl Vertex {
    fn new(a: &DMatrix<f64>, y: &DVector<f64>, basis: Vec<usize>) -> Option<Self> {
        let binv = basis_inverse(a, &basis)?;
        let mut v = Self {
            basis,
            binv,
            beta: DVector::zeros(a.ncols()),
            resid: DVector::zeros(a.nrows()),
        };
        v.refresh(a, y);
        Some(v)
    }

    /// Recomputes coefficients and residuals from the basis inverse.
    fn refresh(&mut self, a: &DMatrix<f64>, y: &DVector<f64>) {
        let yb = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|&t| y[t]));
        self.beta = &self.binv * yb;
        self.resid = y - a * &self.beta;
        for &t in &self.basis {
            self.resid[t] = 0.0;
        }
    }
}

/// Solves the LAD problem, optionally warm-starting from a set of
/// observations to try first for the initial vertex.
pub(crate) fn lad_solve(
    problem: &RegressionProblem,
    warm: Option<&[usize]>,
) -> Result<LadSolution, RegressionError> {
    problem.check_well_posed()?;
    let a = problem.augmented();
    let y = &problem.response;
    let (m, q) = a.shape();
    let offset = usize::from(problem.intercept);
    let cap = 50 * (m + problem.regressors());

    let rank_err = || {
        let cols = dependent_columns(&a);
        RegressionError::RankDeficient {
            columns: cols
                .into_iter()
                .filter(|&c| c >= offset)
                .map(|c| c - offset)
                .collect(),
        }
    };
    let basis = initial_basis(&a, warm.unwrap_or(&[])).ok_or_else(rank_err)?;
    let mut v = Vertex::new(&a, y, basis).ok_or_else(rank_err)?;

    let y_scale = y.amax().max(f64::MIN_POSITIVE);
    let zero_tol = 1e-12 * y_scale;
    let eps = 1e-11;
    let mut in_basis = vec![false; m];
    let mut side = vec![1.0; m];
    for &t in &v.basis {
        in_basis[t] = true;
    }
    let mut objective: f64 = v.resid.iter().map(|r| r.abs()).sum();
    let mut bland = false;
    let mut updates = 0usize;
    let mut iterations = 0usize;

    loop {
        if iterations >= cap {
            return Err(RegressionError::LpDegenerate { iterations });
        }
        iterations += 1;

        // Price every edge. Zero residuals off the basis are priced at the
        // side they were last assigned; crossing to the other side is a kink
        // at step zero in the line search.
        let mut g = DVector::zeros(q);
        for t in 0..m {
            if in_basis[t] {
                continue;
            }
            let r = v.resid[t];
            if r.abs() > zero_tol {
                side[t] = r.signum();
            }
            g.axpy(side[t], &a.row(t).transpose(), 1.0);
        }
        let w = v.binv.tr_mul(&g);
        // Candidate edges: (derivative, position in basis, direction sign).
        let mut order: Vec<usize> = (0..q).collect();
        order.sort_by_key(|&k| v.basis[k]);
        let mut chosen: Option<(f64, usize, f64)> = None;
        for &k in &order {
            for sign in [1.0, -1.0] {
                let deriv = 1.0 - sign * w[k];
                if deriv >= -eps {
                    continue;
                }
                let better = match chosen {
                    None => true,
                    Some(_) if bland => false,
                    Some((best, _, _)) => deriv < best,
                };
                if better {
                    chosen = Some((deriv, k, sign));
                }
            }
        }
        let Some((deriv, k, sign)) = chosen else {
            break;
        };

        // Line search along the edge: residual t moves as r_t - s * a_t.
        let dir = v.binv.column(k) * sign;
        let along = &a * &dir;
        let mut kinks: Vec<(f64, usize, f64)> = (0..m)
            .filter(|&t| !in_basis[t] && along[t] != 0.0)
            .filter_map(|t| {
                if v.resid[t].abs() > zero_tol {
                    let s = v.resid[t] / along[t];
                    (s > 0.0).then_some((s, t, 2.0 * along[t].abs()))
                } else {
                    // The residual moves as -s * along[t].
                    (along[t] * side[t] > 0.0).then_some((0.0, t, 2.0 * along[t].abs()))
                }
            })
            .collect();
        kinks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut slope = deriv;
        let mut entering = None;
        for (i, &(s, t, jump)) in kinks.iter().enumerate() {
            slope += jump;
            if slope >= 0.0 {
                entering = Some((s, t));
                for &(_, passed, _) in &kinks[..i] {
                    side[passed] = -side[passed];
                }
                break;
            }
        }
        let Some((step, t_in)) = entering else {
            return Err(RegressionError::LpDegenerate { iterations });
        };
        let t_out = v.basis[k];
        log::trace!(
            "lad iter {iterations}: objective {objective:.6e}, release obs {t_out} ({}), \
             enter obs {t_in}, step {step:.3e}, slope {deriv:.3e}",
            if sign > 0.0 { "+" } else { "-" }
        );

        // Sherman-Morrison update of the basis inverse for the row swap.
        let u = a.row(t_in) - a.row(t_out);
        let col = v.binv.column(k).into_owned();
        let u_binv = &u * &v.binv;
        let denom = 1.0 + (&u * &col)[(0, 0)];
        v.binv -= &col * &u_binv / denom;
        v.basis[k] = t_in;
        in_basis[t_out] = false;
        in_basis[t_in] = true;
        side[t_out] = -sign;
        updates += 1;
        if updates % 32 == 0 {
            match basis_inverse(&a, &v.basis) {
                Some(inv) => v.binv = inv,
                None => return Err(RegressionError::LpDegenerate { iterations }),
            }
            v.refresh(&a, y);
        } else {
            v.beta.axpy(step, &dir, 1.0);
            v.resid.axpy(-step, &along, 1.0);
            v.resid[t_in] = 0.0;
        }

        let next: f64 = v.resid.iter().map(|r| r.abs()).sum();
        bland = objective - next <= 1e-14 * (1.0 + objective);
        objective = next;
    }

    v.refresh(&a, y);
    let coefficients = v.beta.as_slice()[offset..].to_vec();
    let intercept = problem.intercept.then(|| v.beta[0]);
    let fit = RegressionFit::from_coefficients(problem, coefficients, intercept, None);
    let mut basis = v.basis;
    basis.sort_unstable();
    Ok(LadSolution { fit, basis })
}
