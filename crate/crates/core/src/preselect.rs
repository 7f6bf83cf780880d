//! Stepwise asset pre-selection.
//!
//! Produces, for every cardinality `n = 1..=n_max`, the set of assets a
//! tracking portfolio of that size should hold. Forward selection grows the
//! set one asset at a time; backward elimination starts from the whole
//! universe and drops one asset per refit. Either runs under least squares
//! or least absolute deviation loss, with or without a regression constant.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::TRADING_DAYS;
use crate::regression::{
    self, dependent_columns, lad_solve, ols_fit, RegressionError, RegressionProblem,
};

/// Relative tolerance under which two candidate scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error(
        "backward elimination needs more observations than assets: {observations} observations, {assets} assets"
    )]
    Infeasible { observations: usize, assets: usize },
    #[error("regression failed at step {step}: {source}")]
    Regression {
        step: usize,
        #[source]
        source: RegressionError,
    },
    #[error("{0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Ols,
    Lad,
}

/// One of the eight procedures, e.g. `BE-OLS(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Procedure {
    pub direction: Direction,
    pub loss: Loss,
    pub intercept: bool,
}

impl Procedure {
    pub const fn new(direction: Direction, loss: Loss, intercept: bool) -> Self {
        Self {
            direction,
            loss,
            intercept,
        }
    }

    /// All eight procedures in a fixed order (with constant first).
    pub fn all() -> Vec<Procedure> {
        let mut v = Vec::new();
        for intercept in [true, false] {
            for loss in [Loss::Ols, Loss::Lad] {
                for direction in [Direction::Forward, Direction::Backward] {
                    v.push(Procedure::new(direction, loss, intercept));
                }
            }
        }
        v
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.direction {
            Direction::Forward => "FS",
            Direction::Backward => "BE",
        };
        let l = match self.loss {
            Loss::Ols => "OLS",
            Loss::Lad => "LAD",
        };
        let c = if self.intercept { "c" } else { "n" };
        write!(f, "{d}-{l}({c})")
    }
}

impl FromStr for Procedure {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SelectionError::Config(format!("unknown procedure '{s}'"));
        let t = s.trim().to_ascii_uppercase().replace('_', "-");
        let (body, c) = t
            .strip_suffix(')')
            .and_then(|b| b.rsplit_once('('))
            .ok_or_else(bad)?;
        let intercept = match c {
            "C" => true,
            "N" => false,
            _ => return Err(bad()),
        };
        let (d, l) = body.split_once('-').ok_or_else(bad)?;
        let direction = match d {
            "FS" => Direction::Forward,
            "BE" => Direction::Backward,
            _ => return Err(bad()),
        };
        let loss = match l {
            "OLS" => Loss::Ols,
            "LAD" => Loss::Lad,
            _ => return Err(bad()),
        };
        Ok(Procedure::new(direction, loss, intercept))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub procedure: Procedure,
    pub n_max: usize,
    /// Per-observation enhancement added to every index return.
    pub lambda_daily: f64,
}

/// Per-observation enhancement equivalent to `percent` p.a., chosen so that
/// 252 daily additions compound to exactly `1 + percent/100`.
pub fn annual_to_daily_lambda(percent: f64) -> f64 {
    (1.0 + percent / 100.0).ln() / TRADING_DAYS
}

/// Regression target: index log return plus the enhancement.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSeries(pub Vec<f64>);

impl TargetSeries {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_target(index_returns: &[f64], lambda_daily: f64) -> TargetSeries {
    TargetSeries(index_returns.iter().map(|r| r + lambda_daily).collect())
}

/// Binary selection matrix Δ, stored as the sorted member list of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    universe_size: usize,
    rows: Vec<Vec<usize>>,
    /// Assets in the order added (forward) or removed (backward; the final
    /// survivor is last).
    pub ordering: Vec<usize>,
}

impl SelectionMatrix {
    pub fn from_rows(universe_size: usize, rows: Vec<Vec<usize>>, ordering: Vec<usize>) -> Self {
        Self {
            universe_size,
            rows,
            ordering,
        }
    }

    pub fn n_max(&self) -> usize {
        self.rows.len()
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    /// Members of the cardinality-`n` portfolio (1-based `n`), ascending.
    pub fn row(&self, n: usize) -> &[usize] {
        &self.rows[n - 1]
    }

    pub fn contains(&self, n: usize, asset: usize) -> bool {
        self.rows[n - 1].binary_search(&asset).is_ok()
    }

    /// Dense `n_max x M` 0/1 matrix.
    pub fn delta(&self) -> Vec<Vec<u8>> {
        self.rows
            .iter()
            .map(|row| {
                let mut d = vec![0u8; self.universe_size];
                for &j in row {
                    d[j] = 1;
                }
                d
            })
            .collect()
    }

    /// Writes Δ as CSV: header `cardinality,<ids>`, one row per cardinality.
    pub fn write_csv<W: Write>(&self, ids: &[String], writer: W) -> Result<(), SelectionError> {
        let err = |e: csv::Error| SelectionError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cardinality".to_string()];
        header.extend(ids.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (n, d) in self.delta().iter().enumerate() {
            let mut rec = vec![(n + 1).to_string()];
            rec.extend(d.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| SelectionError::Csv(e.to_string()))
    }

    /// Reads a Δ CSV back as asset ids and the matrix (ordering is not stored).
    pub fn read_csv<R: Read>(reader: R) -> Result<(Vec<String>, Self), SelectionError> {
        let err = |e: csv::Error| SelectionError::Csv(e.to_string());
        let mut rdr = csv::Reader::from_reader(reader);
        let ids: Vec<String> = rdr
            .headers()
            .map_err(err)?
            .iter()
            .skip(1)
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(err)?;
            let row: Vec<usize> = rec
                .iter()
                .skip(1)
                .enumerate()
                .filter(|(_, v)| *v == "1")
                .map(|(j, _)| j)
                .collect();
            rows.push(row);
        }
        Ok((ids.clone(), Self::from_rows(ids.len(), rows, Vec::new())))
    }
}

/// `true` when `candidate` beats `best` by more than the tie tolerance
/// (lower is better).
fn strictly_better(candidate: f64, best: f64) -> bool {
    if best.is_infinite() && candidate.is_infinite() && best.signum() == candidate.signum() {
        return false;
    }
    candidate < best - TIE_TOLERANCE * candidate.abs().max(best.abs())
}

/// Lowest score wins; ties go to the lowest position. `None` scores are
/// ineligible.
fn argmin_with_ties(scores: &[(usize, Option<f64>)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(j, s) in scores {
        let Some(s) = s else { continue };
        match best {
            None => best = Some((j, s)),
            Some((_, b)) if strictly_better(s, b) => best = Some((j, s)),
            _ => {}
        }
    }
    best.map(|(j, _)| j)
}

fn column_problem(
    returns: &DMatrix<f64>,
    cols: &[usize],
    response: &[f64],
    intercept: bool,
) -> RegressionProblem {
    let m = returns.nrows();
    let mut design = DMatrix::zeros(m, cols.len());
    for (c, &j) in cols.iter().enumerate() {
        design.column_mut(c).copy_from(&returns.column(j));
    }
    RegressionProblem {
        design,
        response: DVector::from_column_slice(response),
        intercept,
    }
}

fn validate(
    returns: &DMatrix<f64>,
    target: &TargetSeries,
    config: &SelectionConfig,
) -> Result<(), SelectionError> {
    let m = returns.ncols();
    if target.len() != returns.nrows() {
        return Err(SelectionError::Config(format!(
            "target has {} observations, returns have {}",
            target.len(),
            returns.nrows()
        )));
    }
    if m == 0 {
        return Err(SelectionError::Config("empty universe".into()));
    }
    if config.n_max == 0 || config.n_max > m {
        return Err(SelectionError::Config(format!(
            "n_max must lie in 1..={m}, got {}",
            config.n_max
        )));
    }
    Ok(())
}

/// Score of regressing `response` on one candidate column: negative adjusted
/// R² for least squares, mean absolute deviation for LAD. Lower is better.
/// Candidates that cannot be fitted are ineligible.
fn candidate_score(
    returns: &DMatrix<f64>,
    j: usize,
    response: &[f64],
    loss: Loss,
    intercept: bool,
) -> Option<f64> {
    let p = column_problem(returns, &[j], response, intercept);
    match loss {
        Loss::Ols => ols_fit(&p).ok().map(|f| -f.adjusted_r2),
        Loss::Lad => lad_solve(&p, None).ok().map(|s| s.fit.mad),
    }
}

/// Forward selection: choose the best single regressor for the target, then
/// repeatedly regress the current multiple-regression residual on each
/// remaining candidate, add the best one and refit the multiple regression.
pub fn forward_select(
    returns: &DMatrix<f64>,
    target: &TargetSeries,
    config: &SelectionConfig,
) -> Result<SelectionMatrix, SelectionError> {
    validate(returns, target, config)?;
    let proc = config.procedure;
    let universe = returns.ncols();
    let mut chosen: Vec<usize> = Vec::with_capacity(config.n_max);
    let mut taken = vec![false; universe];
    let mut residual = target.0.clone();
    let mut basis: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(config.n_max);

    for step in 1..=config.n_max {
        let scores: Vec<(usize, Option<f64>)> = (0..universe)
            .into_par_iter()
            .map(|j| {
                let s = if taken[j] {
                    None
                } else {
                    candidate_score(returns, j, &residual, proc.loss, proc.intercept)
                };
                (j, s)
            })
            .collect();
        let best = argmin_with_ties(&scores).ok_or_else(|| SelectionError::Regression {
            step,
            source: RegressionError::RankDeficient {
                columns: (0..universe).filter(|&j| !taken[j]).collect(),
            },
        })?;
        log::debug!("forward step {step}: asset {best}");
        chosen.push(best);
        taken[best] = true;
        let mut row = chosen.clone();
        row.sort_unstable();

        if step < config.n_max {
            let p = column_problem(returns, &row, &target.0, proc.intercept);
            let wrap = |source| SelectionError::Regression { step, source };
            residual = match proc.loss {
                Loss::Ols => ols_fit(&p).map_err(wrap)?.residuals,
                Loss::Lad => {
                    let sol = lad_solve(&p, Some(&basis)).map_err(wrap)?;
                    basis = sol.basis;
                    sol.fit.residuals
                }
            };
        }
        rows.push(row);
    }
    Ok(SelectionMatrix::from_rows(universe, rows, chosen))
}

/// Backward elimination: fit the target on the whole universe and repeatedly
/// drop the asset contributing least (smallest |t| for least squares,
/// smallest |β| of the standardised regression for LAD), refitting after
/// each removal.
pub fn backward_eliminate(
    returns: &DMatrix<f64>,
    target: &TargetSeries,
    config: &SelectionConfig,
) -> Result<SelectionMatrix, SelectionError> {
    validate(returns, target, config)?;
    let (obs, universe) = returns.shape();
    if obs <= universe {
        return Err(SelectionError::Infeasible {
            observations: obs,
            assets: universe,
        });
    }
    let proc = config.procedure;
    let mut active: Vec<usize> = (0..universe).collect();
    let mut removed = Vec::with_capacity(universe);
    let mut rows_desc: Vec<Vec<usize>> = Vec::with_capacity(config.n_max);

    match proc.loss {
        Loss::Ols => {
            let gram = GramOls::new(returns, &target.0, proc.intercept);
            while active.len() > 1 {
                if active.len() <= config.n_max {
                    rows_desc.push(active.clone());
                }
                let step = active.len();
                let t = gram
                    .t_values(&active)
                    .map_err(|source| SelectionError::Regression { step, source })?;
                let scores: Vec<(usize, Option<f64>)> = t
                    .iter()
                    .enumerate()
                    .map(|(pos, v)| (pos, Some(v.abs())))
                    .collect();
                let pos = argmin_with_ties(&scores).expect("scores are never empty");
                log::debug!("backward k={step}: drop asset {}", active[pos]);
                removed.push(active.remove(pos));
            }
        }
        Loss::Lad => {
            let full = RegressionProblem {
                design: returns.clone(),
                response: DVector::from_column_slice(&target.0),
                intercept: proc.intercept,
            };
            let std = regression::standardize(&full).map_err(|source| {
                SelectionError::Regression {
                    step: universe,
                    source,
                }
            })?;
            let mut basis: Vec<usize> = Vec::new();
            while active.len() > 1 {
                if active.len() <= config.n_max {
                    rows_desc.push(active.clone());
                }
                let step = active.len();
                let p = column_problem(&std.design, &active, std.response.as_slice(), proc.intercept);
                let sol = lad_solve(&p, Some(&basis))
                    .map_err(|source| SelectionError::Regression { step, source })?;
                basis = sol.basis;
                let scores: Vec<(usize, Option<f64>)> = sol
                    .fit
                    .coefficients
                    .iter()
                    .enumerate()
                    .map(|(pos, b)| (pos, Some(b.abs())))
                    .collect();
                let pos = argmin_with_ties(&scores).expect("scores are never empty");
                log::debug!("backward k={step}: drop asset {}", active[pos]);
                removed.push(active.remove(pos));
            }
        }
    }
    rows_desc.push(active.clone());
    removed.push(active[0]);
    rows_desc.reverse();
    Ok(SelectionMatrix::from_rows(universe, rows_desc, removed))
}

/// Runs the configured direction.
pub fn preselect(
    returns: &DMatrix<f64>,
    target: &TargetSeries,
    config: &SelectionConfig,
) -> Result<SelectionMatrix, SelectionError> {
    match config.procedure.direction {
        Direction::Forward => forward_select(returns, target, config),
        Direction::Backward => backward_eliminate(returns, target, config),
    }
}

/// Least squares refits over column subsets using one precomputed cross
/// product matrix. Residuals are recomputed from the data at each fit so the
/// residual variance does not suffer cancellation on near-exact fits.
struct GramOls<'a> {
    returns: &'a DMatrix<f64>,
    response: &'a [f64],
    intercept: bool,
    /// Cross products of `[1?, X]`.
    gram: DMatrix<f64>,
    /// `[1?, X]' y`.
    xty: DVector<f64>,
}

impl<'a> GramOls<'a> {
    fn new(returns: &'a DMatrix<f64>, response: &'a [f64], intercept: bool) -> Self {
        let problem = RegressionProblem {
            design: returns.clone(),
            response: DVector::from_column_slice(response),
            intercept,
        };
        let a = problem.augmented();
        let gram = a.tr_mul(&a);
        let xty = a.tr_mul(&problem.response);
        Self {
            returns,
            response,
            intercept,
            gram,
            xty,
        }
    }

    /// t-values of the regressors in `cols` (universe positions, ascending).
    fn t_values(&self, cols: &[usize]) -> Result<Vec<f64>, RegressionError> {
        let off = usize::from(self.intercept);
        let idx: Vec<usize> = (0..off).chain(cols.iter().map(|&c| c + off)).collect();
        let q = idx.len();
        let m = self.returns.nrows();
        if m <= q {
            return Err(RegressionError::Underdetermined {
                observations: m,
                parameters: q,
            });
        }
        let g = DMatrix::from_fn(q, q, |i, j| self.gram[(idx[i], idx[j])]);
        let b = DVector::from_fn(q, |i, _| self.xty[idx[i]]);
        let rank_err = || {
            let p = column_problem(self.returns, cols, self.response, self.intercept);
            let deps = dependent_columns(&p.augmented());
            RegressionError::RankDeficient {
                columns: deps
                    .into_iter()
                    .filter(|&c| c >= off)
                    .map(|c| cols[c - off])
                    .collect(),
            }
        };
        let chol = g.clone().cholesky().ok_or_else(rank_err)?;
        let inv = chol.inverse();
        // Reject numerically singular systems the factorisation let through.
        let diag_ok = (0..q).all(|i| {
            let v = inv[(i, i)] * g[(i, i)];
            v.is_finite() && v < 1e12
        });
        if !diag_ok {
            return Err(rank_err());
        }
        let beta = chol.solve(&b);
        let mut rss = 0.0;
        for t in 0..m {
            let mut fitted = if self.intercept { beta[0] } else { 0.0 };
            for (k, &c) in cols.iter().enumerate() {
                fitted += beta[k + off] * self.returns[(t, c)];
            }
            rss += (self.response[t] - fitted).powi(2);
        }
        let sigma2 = rss / (m - q) as f64;
        Ok((0..cols.len())
            .map(|k| {
                let i = k + off;
                let se = (sigma2 * inv[(i, i)]).sqrt();
                if se > 0.0 {
                    beta[i] / se
                } else if beta[i] == 0.0 {
                    0.0
                } else {
                    f64::INFINITY.copysign(beta[i])
                }
            })
            .collect())
    }
}
