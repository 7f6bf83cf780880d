//! Evaluation statistics over backtest output: return-risk ratios, the
//! tracking-error power law, average ranks, selection overlap and the
//! tracking error / volatility correlation.

pub mod tables;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::market_data::TRADING_DAYS;
use crate::regression::{ols_fit, RegressionError, RegressionProblem};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),
    #[error("missing value for {row} at column {column}")]
    MissingCell { row: usize, column: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error("{0}")]
    Io(String),
}

/// Daily rate equivalent to an annual rate of `annual_percent` % p.a.
pub fn daily_risk_free(annual_percent: f64) -> Result<f64, AnalyticsError> {
    if !(annual_percent > -100.0) || !annual_percent.is_finite() {
        return Err(AnalyticsError::Domain(format!(
            "annual rate must exceed -100%, got {annual_percent}"
        )));
    }
    Ok((1.0 + 0.01 * annual_percent).powf(1.0 / TRADING_DAYS) - 1.0)
}

/// Annual risk-free rates (% p.a.) by date.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RiskFreeSeries {
    rates: BTreeMap<NaiveDate, f64>,
}

impl RiskFreeSeries {
    pub fn new(rates: BTreeMap<NaiveDate, f64>) -> Self {
        Self { rates }
    }

    /// Reads `date,rate` rows; blank or `NA` rates are skipped.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, AnalyticsError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rates = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| AnalyticsError::Io(e.to_string()))?;
            let bad = |what: &str| AnalyticsError::Io(format!("row {}: bad {what}", i + 2));
            let date = NaiveDate::parse_from_str(rec.get(0).ok_or_else(|| bad("date"))?.trim(), "%Y-%m-%d")
                .map_err(|_| bad("date"))?;
            let raw = rec.get(1).ok_or_else(|| bad("rate"))?.trim();
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                continue;
            }
            rates.insert(date, raw.parse().map_err(|_| bad("rate"))?);
        }
        Ok(Self { rates })
    }

    pub fn load(path: &Path) -> Result<Self, AnalyticsError> {
        let f = std::fs::File::open(path)
            .map_err(|e| AnalyticsError::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(f)
    }

    /// Daily rates for `dates`, carrying the last observed annual rate
    /// forward over gaps. Dates before the first observation are an error.
    pub fn daily_for(&self, dates: &[NaiveDate]) -> Result<Vec<f64>, AnalyticsError> {
        dates
            .iter()
            .map(|d| {
                let (_, r) = self.rates.range(..=*d).next_back().ok_or_else(|| {
                    AnalyticsError::Domain(format!("no risk-free rate on or before {d}"))
                })?;
                daily_risk_free(*r)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesSource {
    Index,
    Portfolio,
}

/// Daily log returns in excess of the daily risk-free rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessReturnSeries {
    pub values: Vec<f64>,
    pub source: SeriesSource,
}

impl ExcessReturnSeries {
    pub fn new(values: Vec<f64>, source: SeriesSource) -> Self {
        Self { values, source }
    }

    pub fn from_returns(
        log_returns: &[f64],
        daily_rf: &[f64],
        source: SeriesSource,
    ) -> Result<Self, AnalyticsError> {
        if log_returns.len() != daily_rf.len() {
            return Err(AnalyticsError::Domain(format!(
                "{} returns but {} risk-free rates",
                log_returns.len(),
                daily_rf.len()
            )));
        }
        Ok(Self {
            values: log_returns.iter().zip(daily_rf).map(|(r, f)| r - f).collect(),
            source,
        })
    }
}

/// Sums used by all three ratios.
struct Sums {
    t: f64,
    s1: f64,
    s2: f64,
    s1_plus: f64,
    s1_minus: f64,
    s2_minus: f64,
}

impl Sums {
    fn of(y: &[f64]) -> Self {
        let mut s = Sums {
            t: y.len() as f64,
            s1: 0.0,
            s2: 0.0,
            s1_plus: 0.0,
            s1_minus: 0.0,
            s2_minus: 0.0,
        };
        for &v in y {
            s.s1 += v;
            s.s2 += v * v;
            if v > 0.0 {
                s.s1_plus += v;
            } else {
                s.s1_minus -= v;
                s.s2_minus += v * v;
            }
        }
        s
    }

    fn annual_mean(&self) -> f64 {
        100.0 * TRADING_DAYS * self.s1 / self.t
    }
}

/// Annualised mean over annualised standard deviation.
pub fn sharpe(excess: &ExcessReturnSeries) -> Result<f64, AnalyticsError> {
    if excess.values.len() < 2 {
        return Err(AnalyticsError::UndefinedRatio(
            "Sharpe ratio needs at least 2 observations".into(),
        ));
    }
    let s = Sums::of(&excess.values);
    let var = (s.s2 - s.s1 * s.s1 / s.t) / s.t;
    if !(var > 0.0) {
        return Err(AnalyticsError::UndefinedRatio(
            "Sharpe ratio of a zero-variance series".into(),
        ));
    }
    Ok(s.annual_mean() / (100.0 * (TRADING_DAYS * var).sqrt()))
}

/// Sum of gains over sum of losses (losses are non-positive values).
pub fn gain_loss(excess: &ExcessReturnSeries) -> Result<f64, AnalyticsError> {
    let s = Sums::of(&excess.values);
    if !(s.s1_minus > 0.0) {
        return Err(AnalyticsError::UndefinedRatio(
            "gain-loss ratio without losses".into(),
        ));
    }
    Ok(s.s1_plus / s.s1_minus)
}

/// Annualised mean over annualised downside deviation.
pub fn sortino(excess: &ExcessReturnSeries) -> Result<f64, AnalyticsError> {
    let s = Sums::of(&excess.values);
    if excess.values.is_empty() || !(s.s2_minus > 0.0) {
        return Err(AnalyticsError::UndefinedRatio(
            "Sortino ratio without downside variation".into(),
        ));
    }
    Ok(s.annual_mean() / (100.0 * (TRADING_DAYS * s.s2_minus / s.t).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSet {
    pub sharpe: f64,
    pub gain_loss: f64,
    pub sortino: f64,
}

pub fn ratios(excess: &ExcessReturnSeries) -> Result<RatioSet, AnalyticsError> {
    Ok(RatioSet {
        sharpe: sharpe(excess)?,
        gain_loss: gain_loss(excess)?,
        sortino: sortino(excess)?,
    })
}

/// `ln TE = alpha0 + alpha1 ln n + sum_p d_p I_p`, base procedure absorbed in
/// the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha0: f64,
    pub alpha1: f64,
    /// Procedure tag and coefficient, in order of first appearance.
    pub dummy_coefficients: Vec<(String, f64)>,
    pub adjusted_r2: f64,
    /// Two-sided p-values for alpha0, alpha1, then each dummy.
    pub p_values: Vec<f64>,
    pub observations: usize,
}

impl PowerLawFit {
    /// `theta` in `TE = theta / n^omega`.
    pub fn theta(&self) -> f64 {
        self.alpha0.exp()
    }

    pub fn omega(&self) -> f64 {
        -self.alpha1
    }
}

/// A single tracking-error observation for the power-law regression.
#[derive(Debug, Clone, PartialEq)]
pub struct TeRecord {
    pub procedure: String,
    pub cardinality: usize,
    pub te: f64,
}

pub fn fit_power_law(records: &[TeRecord], base_procedure: &str) -> Result<PowerLawFit, AnalyticsError> {
    if let Some(r) = records.iter().find(|r| !(r.te > 0.0) || r.cardinality == 0) {
        return Err(AnalyticsError::Domain(format!(
            "tracking errors and cardinalities must be positive, got TE {} at n {}",
            r.te, r.cardinality
        )));
    }
    let mut distinct: Vec<usize> = records.iter().map(|r| r.cardinality).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(AnalyticsError::Degenerate(
            "need at least two distinct cardinalities".into(),
        ));
    }
    let mut others: Vec<String> = Vec::new();
    for r in records {
        if r.procedure != base_procedure && !others.contains(&r.procedure) {
            others.push(r.procedure.clone());
        }
    }
    let m = records.len();
    let q = 1 + others.len();
    let design = DMatrix::from_fn(m, q, |i, j| {
        if j == 0 {
            (records[i].cardinality as f64).ln()
        } else if records[i].procedure == others[j - 1] {
            1.0
        } else {
            0.0
        }
    });
    let response = DVector::from_iterator(m, records.iter().map(|r| r.te.ln()));
    let problem = RegressionProblem::new(design, response, true)?;
    let fit = ols_fit(&problem)?;
    let dof = (m - q - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| AnalyticsError::Degenerate(e.to_string()))?;
    let p_value = |t: f64| {
        if t.is_infinite() {
            0.0
        } else {
            2.0 * (1.0 - dist.cdf(t.abs()))
        }
    };
    // Intercept t-value is not part of the fit output; derive it here.
    let t_intercept = intercept_t_value(&problem, fit.intercept_value.unwrap_or(0.0), fit.sse());
    let mut p_values = vec![p_value(t_intercept)];
    p_values.extend(fit.t_values.as_ref().unwrap().iter().map(|t| p_value(*t)));
    Ok(PowerLawFit {
        alpha0: fit.intercept_value.unwrap_or(0.0),
        alpha1: fit.coefficients[0],
        dummy_coefficients: others
            .into_iter()
            .zip(fit.coefficients[1..].iter().copied())
            .collect(),
        adjusted_r2: fit.adjusted_r2,
        p_values,
        observations: m,
    })
}

fn intercept_t_value(problem: &RegressionProblem, intercept: f64, sse: f64) -> f64 {
    let a = {
        let mut a = DMatrix::zeros(problem.observations(), problem.regressors() + 1);
        a.column_mut(0).fill(1.0);
        a.columns_mut(1, problem.regressors()).copy_from(&problem.design);
        a
    };
    let q = a.ncols();
    let sigma2 = sse / (problem.observations() - q) as f64;
    let r = a.qr().r();
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(q, q))
        .expect("design already checked for full rank");
    let se = (sigma2 * r_inv.row(0).norm_squared()).sqrt();
    if se > 0.0 {
        intercept / se
    } else if intercept == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(intercept)
    }
}

/// Mean rank of each row across columns. Each column ranks the rows
/// (1 = smallest when `ascending`), ties sharing their average rank.
pub fn average_rank(values: &[Vec<Option<f64>>], ascending: bool) -> Result<Vec<f64>, AnalyticsError> {
    let rows = values.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = values[0].len();
    if values.iter().any(|r| r.len() != cols) {
        return Err(AnalyticsError::Domain("ragged value matrix".into()));
    }
    if cols == 0 {
        return Err(AnalyticsError::Domain("no columns to rank".into()));
    }
    let mut totals = vec![0.0; rows];
    for c in 0..cols {
        let mut col = Vec::with_capacity(rows);
        for (r, row) in values.iter().enumerate() {
            let v = row[c].ok_or(AnalyticsError::MissingCell { row: r, column: c })?;
            if v.is_nan() {
                return Err(AnalyticsError::MissingCell { row: r, column: c });
            }
            col.push((r, if ascending { v } else { -v }));
        }
        col.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut i = 0;
        while i < rows {
            let mut j = i;
            while j + 1 < rows && col[j + 1].1 == col[i].1 {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for item in &col[i..=j] {
                totals[item.0] += rank;
            }
            i = j + 1;
        }
    }
    Ok(totals.into_iter().map(|t| t / cols as f64).collect())
}

/// Percentage of the `n` members of `a` that are also in `b`.
pub fn overlap_percent<T: Ord>(a: &[T], b: &[T]) -> Result<f64, AnalyticsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AnalyticsError::Domain(format!(
            "overlap needs equal non-zero cardinalities, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let b: std::collections::BTreeSet<&T> = b.iter().collect();
    let common = a.iter().filter(|x| b.contains(x)).count();
    Ok(100.0 * common as f64 / a.len() as f64)
}

/// Pearson correlation of paired yearly tracking errors and volatilities.
pub fn te_volatility_correlation(out_tes: &[f64], vols: &[f64]) -> Result<f64, AnalyticsError> {
    if out_tes.len() != vols.len() {
        return Err(AnalyticsError::Domain("unpaired series".into()));
    }
    if out_tes.len() < 3 {
        return Err(AnalyticsError::Degenerate(
            "correlation needs at least 3 pairs".into(),
        ));
    }
    let n = out_tes.len() as f64;
    let mx = out_tes.iter().sum::<f64>() / n;
    let my = vols.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in out_tes.iter().zip(vols) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(AnalyticsError::Degenerate("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
