//! Rolling estimation/evaluation runs over a price panel.
//!
//! For each window the eligible universe is filtered, pre-selection runs once
//! up to `n_max`, weights are fitted in-sample for every requested
//! cardinality and the resulting buy-and-hold portfolio is evaluated on the
//! following window.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{
    eligible_universe, return_matrix, MarketDataError, MembershipCalendar, PeriodSpec, PricePanel,
    Window, WindowSchedule, TRADING_DAYS,
};
use crate::preselect::{
    annual_to_daily_lambda, build_target, preselect, Direction, Procedure, SelectionConfig,
    SelectionError, SelectionMatrix,
};
use crate::weights::{
    annualize, optimize_window, GapPolicy, ObjectiveConfig, Portfolio, StartKind,
    TrackingWindow, WeightsError,
};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid backtest config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] MarketDataError),
    #[error(
        "backward elimination infeasible in period {k}: {observations} observations for {assets} assets"
    )]
    Infeasible {
        k: usize,
        observations: usize,
        assets: usize,
    },
    #[error("{0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub procedure: Procedure,
    pub n_max: usize,
    /// Cardinalities to fit and evaluate, each in `1..=n_max`.
    pub cardinalities: Vec<usize>,
    pub n_in: PeriodSpec,
    pub n_out: PeriodSpec,
    /// Target enhancement in % p.a.
    pub lambda_annual: f64,
    pub objective: ObjectiveConfig,
}

impl BacktestConfig {
    pub fn lambda_daily(&self) -> f64 {
        annual_to_daily_lambda(self.lambda_annual)
    }

    pub fn selection(&self, universe_size: usize) -> SelectionConfig {
        SelectionConfig {
            procedure: self.procedure,
            n_max: self.n_max.min(universe_size),
            lambda_daily: self.lambda_daily(),
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_daily: self.lambda_daily(),
            ..self.objective
        }
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        if self.n_max == 0 {
            return Err(BacktestError::Config("n_max must be at least 1".into()));
        }
        if self.cardinalities.is_empty() {
            return Err(BacktestError::Config("no cardinalities requested".into()));
        }
        if let Some(&n) = self
            .cardinalities
            .iter()
            .find(|&&n| n == 0 || n > self.n_max)
        {
            return Err(BacktestError::Config(format!(
                "cardinality {n} outside 1..={}",
                self.n_max
            )));
        }
        let mut sorted = self.cardinalities.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.cardinalities.len() {
            return Err(BacktestError::Config("duplicate cardinalities".into()));
        }
        if !(self.lambda_annual > -100.0) || !self.lambda_annual.is_finite() {
            return Err(BacktestError::Config(format!(
                "lambda_annual must exceed -100, got {}",
                self.lambda_annual
            )));
        }
        if !(self.objective.penalty_weight >= 0.0) || !self.objective.penalty_weight.is_finite() {
            return Err(BacktestError::Config(format!(
                "penalty weight must be non-negative, got {}",
                self.objective.penalty_weight
            )));
        }
        Ok(())
    }
}

/// What went wrong in a failed cell, used for exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Data,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub k: usize,
    pub cardinality: usize,
    pub kind: FailureKind,
    pub message: String,
}

/// One evaluated portfolio.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cardinality: usize,
    /// % p.a.
    pub in_sample_te: f64,
    /// % p.a.
    pub out_sample_te: f64,
    /// `None` when the previous period's portfolio is unavailable.
    pub transaction_volume: Option<f64>,
    /// % p.a. over the index.
    pub enhanced_return: f64,
    pub objective: f64,
    pub converged: bool,
    pub start: StartKind,
    /// Out-of-sample prices carried forward over gaps or after delisting.
    pub carried_prices: usize,
    pub portfolio: Portfolio,
    pub out_sample_returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodResult {
    pub window: Window,
    pub rebalance_date: NaiveDate,
    /// Eligible asset ids; selection positions refer to this list.
    pub universe: Vec<String>,
    pub selection: Option<SelectionMatrix>,
    pub out_dates: Vec<NaiveDate>,
    pub index_out_returns: Vec<f64>,
    pub cells: Vec<CellResult>,
}

impl PeriodResult {
    pub fn k(&self) -> usize {
        self.window.k
    }

    pub fn universe_size(&self) -> usize {
        self.universe.len()
    }

    pub fn cell(&self, cardinality: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cardinality == cardinality)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completeness {
    pub attempted: usize,
    pub succeeded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOutput {
    pub config: BacktestConfig,
    pub periods: Vec<PeriodResult>,
    pub errors: Vec<CellError>,
    pub completeness: Completeness,
}

impl BacktestOutput {
    pub fn is_complete(&self) -> bool {
        self.completeness.attempted == self.completeness.succeeded
    }

    /// Mean out-of-sample TE per cardinality over the periods that succeeded.
    pub fn mean_out_sample_te(&self) -> BTreeMap<usize, f64> {
        mean_by_cardinality(&self.periods, |c| Some(c.out_sample_te))
    }

    pub fn mean_in_sample_te(&self) -> BTreeMap<usize, f64> {
        mean_by_cardinality(&self.periods, |c| Some(c.in_sample_te))
    }

    /// Mean transaction volume per rebalance (periods after the first).
    pub fn mean_transaction_volume(&self) -> BTreeMap<usize, f64> {
        let later: Vec<PeriodResult> = self.periods.iter().skip(1).cloned().collect();
        mean_by_cardinality(&later, |c| c.transaction_volume)
    }
}

fn mean_by_cardinality(
    periods: &[PeriodResult],
    f: impl Fn(&CellResult) -> Option<f64>,
) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in periods {
        for c in &p.cells {
            if let Some(v) = f(c) {
                let e = acc.entry(c.cardinality).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(n, (s, k))| (n, s / k as f64))
        .collect()
}

/// Sum of absolute weight changes over the union of holdings. Assets absent
/// from one side count with weight zero.
pub fn transaction_volume(previous: &Portfolio, next: &Portfolio) -> f64 {
    let mut total = 0.0;
    for (id, x) in &previous.holdings {
        total += (next.weight(id) - x).abs();
    }
    for (id, x) in &next.holdings {
        if !previous.holdings.contains_key(id) {
            total += x;
        }
    }
    total
}

/// `100 * 252 * (mean portfolio return - mean index return)`, % p.a.
pub fn enhanced_return(portfolio: &[f64], index: &[f64]) -> Result<f64, BacktestError> {
    if portfolio.len() != index.len() || portfolio.is_empty() {
        return Err(BacktestError::Config(format!(
            "return series lengths differ or are empty: {} vs {}",
            portfolio.len(),
            index.len()
        )));
    }
    let n = portfolio.len() as f64;
    let diff: f64 = portfolio.iter().zip(index).map(|(p, i)| p - i).sum();
    Ok(100.0 * TRADING_DAYS * diff / n)
}

/// Eligible universe for one window, checked for backward feasibility.
struct Plan {
    window: Window,
    universe: Result<Vec<usize>, MarketDataError>,
}

fn plan(
    panel: &PricePanel,
    members: &MembershipCalendar,
    config: &BacktestConfig,
) -> Result<Vec<Plan>, BacktestError> {
    config.validate()?;
    let schedule = WindowSchedule::for_dates(panel.dates(), config.n_in, config.n_out)?;
    let plans: Vec<Plan> = schedule
        .windows
        .iter()
        .map(|w| Plan {
            window: *w,
            universe: eligible_universe(panel, members, w.in_range, w.in_range.end),
        })
        .collect();
    if config.procedure.direction == Direction::Backward {
        for p in &plans {
            if let Ok(u) = &p.universe {
                if p.window.in_range.len() <= u.len() {
                    return Err(BacktestError::Infeasible {
                        k: p.window.k,
                        observations: p.window.in_range.len(),
                        assets: u.len(),
                    });
                }
            }
        }
    }
    Ok(plans)
}

/// Checks the config and data against each other without fitting anything.
pub fn validate_backtest(
    panel: &PricePanel,
    members: &MembershipCalendar,
    config: &BacktestConfig,
) -> Result<usize, BacktestError> {
    Ok(plan(panel, members, config)?.len())
}

struct Selected {
    universe: Vec<usize>,
    selection: Result<SelectionMatrix, (FailureKind, String)>,
}

fn select_period(
    panel: &PricePanel,
    config: &BacktestConfig,
    plan: &Plan,
) -> Result<Selected, (FailureKind, String)> {
    let universe = plan
        .universe
        .as_ref()
        .map_err(|e| (FailureKind::Data, e.to_string()))?
        .clone();
    let range = plan.window.in_range;
    let returns =
        return_matrix(panel, &universe, range).map_err(|e| (FailureKind::Data, e.to_string()))?;
    let cfg = config.selection(universe.len());
    let target = build_target(&panel.index_returns(range), cfg.lambda_daily);
    let selection = preselect(&returns, &target, &cfg).map_err(|e| match e {
        SelectionError::Regression { .. } => (FailureKind::Numerical, e.to_string()),
        other => (FailureKind::Data, other.to_string()),
    });
    log::info!(
        "period {}: {} eligible assets, {} selected",
        plan.window.k,
        universe.len(),
        config.procedure
    );
    Ok(Selected {
        universe,
        selection,
    })
}

fn weights_error_kind(e: &WeightsError) -> FailureKind {
    match e {
        WeightsError::MissingPrice { .. } | WeightsError::EmptySelection => FailureKind::Data,
        _ => FailureKind::Numerical,
    }
}

fn fit_cell(
    panel: &PricePanel,
    config: &BacktestConfig,
    window: &Window,
    selection: &[usize],
    warm: Option<&Portfolio>,
) -> Result<(CellResult, Vec<f64>), (FailureKind, String)> {
    let lambda = config.lambda_daily();
    let objective = config.objective();
    let wrap = |e: WeightsError| (weights_error_kind(&e), e.to_string());
    let ids: Vec<String> = selection.iter().map(|&j| panel.assets()[j].clone()).collect();
    let in_window =
        TrackingWindow::new(panel, selection, window.in_range, lambda, GapPolicy::Reject)
            .map_err(wrap)?;
    let warm_w: Option<Vec<f64>> = warm.map(|p| ids.iter().map(|id| p.weight(id)).collect());
    let opt = optimize_window(&in_window, &objective, warm_w.as_deref()).map_err(wrap)?;
    let portfolio =
        Portfolio::from_weights(panel.dates()[window.in_range.end], &ids, &opt.weights)
            .map_err(wrap)?;
    let out_window = TrackingWindow::new(
        panel,
        selection,
        window.out_range,
        lambda,
        GapPolicy::CarryForward,
    )
    .map_err(wrap)?;
    let out_returns = out_window.portfolio_returns(&opt.weights);
    let index_out = panel.index_returns(window.out_range);
    let enhanced = enhanced_return(&out_returns, &index_out)
        .map_err(|e| (FailureKind::Numerical, e.to_string()))?;
    let cell = CellResult {
        cardinality: selection.len(),
        in_sample_te: annualize(in_window.tracking_error(&opt.weights)),
        out_sample_te: annualize(out_window.tracking_error(&opt.weights)),
        transaction_volume: None,
        enhanced_return: enhanced,
        objective: opt.objective,
        converged: opt.converged,
        start: opt.start,
        carried_prices: out_window.carried_prices(),
        portfolio,
        out_sample_returns: out_returns.clone(),
    };
    Ok((cell, out_returns))
}

/// Runs every window and requested cardinality. Per-cell failures are
/// recorded and the run continues; only config or schedule problems abort.
pub fn run_backtest(
    panel: &PricePanel,
    members: &MembershipCalendar,
    config: &BacktestConfig,
) -> Result<BacktestOutput, BacktestError> {
    let plans = plan(panel, members, config)?;

    let selected: Vec<Result<Selected, (FailureKind, String)>> = plans
        .par_iter()
        .map(|p| select_period(panel, config, p))
        .collect();

    // Weight fits chain across periods through the warm start, so each
    // cardinality runs its periods in order.
    let per_cardinality: Vec<Vec<Result<CellResult, (FailureKind, String)>>> = config
        .cardinalities
        .par_iter()
        .map(|&n| {
            let mut prev: Option<Portfolio> = None;
            let mut out = Vec::with_capacity(plans.len());
            for (p, s) in plans.iter().zip(&selected) {
                let res = match s {
                    Err(e) => Err(e.clone()),
                    Ok(sel) => match &sel.selection {
                        Err(e) => Err(e.clone()),
                        Ok(delta) if n > delta.n_max() => Err((
                            FailureKind::Data,
                            format!(
                                "cardinality {n} exceeds the {} eligible assets",
                                sel.universe.len()
                            ),
                        )),
                        Ok(delta) => {
                            let chosen: Vec<usize> =
                                delta.row(n).iter().map(|&j| sel.universe[j]).collect();
                            fit_cell(panel, config, &p.window, &chosen, prev.as_ref())
                                .map(|(c, _)| c)
                        }
                    },
                };
                prev = res.as_ref().ok().map(|c| c.portfolio.clone());
                out.push(res);
            }
            out
        })
        .collect();

    let mut periods = Vec::with_capacity(plans.len());
    let mut errors = Vec::new();
    let mut succeeded = 0;
    for (pi, (p, s)) in plans.iter().zip(selected).enumerate() {
        let (universe, selection) = match s {
            Ok(sel) => (
                sel.universe
                    .iter()
                    .map(|&j| panel.assets()[j].clone())
                    .collect(),
                sel.selection.ok(),
            ),
            Err(_) => (Vec::new(), None),
        };
        let mut cells = Vec::new();
        for (ci, &n) in config.cardinalities.iter().enumerate() {
            match &per_cardinality[ci][pi] {
                Ok(cell) => {
                    let mut cell = cell.clone();
                    cell.transaction_volume = if pi == 0 {
                        Some(1.0)
                    } else {
                        per_cardinality[ci][pi - 1]
                            .as_ref()
                            .ok()
                            .map(|prev| transaction_volume(&prev.portfolio, &cell.portfolio))
                    };
                    if cell.carried_prices > 0 {
                        log::warn!(
                            "period {} cardinality {n}: {} out-of-sample prices carried forward",
                            p.window.k,
                            cell.carried_prices
                        );
                    }
                    succeeded += 1;
                    cells.push(cell);
                }
                Err((kind, message)) => {
                    log::warn!("period {} cardinality {n}: {message}", p.window.k);
                    errors.push(CellError {
                        k: p.window.k,
                        cardinality: n,
                        kind: *kind,
                        message: message.clone(),
                    });
                }
            }
        }
        let out_dates = p.window.out_range.iter().map(|t| panel.dates()[t]).collect();
        periods.push(PeriodResult {
            window: p.window,
            rebalance_date: panel.dates()[p.window.in_range.end],
            universe,
            selection,
            out_dates,
            index_out_returns: panel.index_returns(p.window.out_range),
            cells,
        });
    }
    let completeness = Completeness {
        attempted: plans.len() * config.cardinalities.len(),
        succeeded,
    };
    log::info!(
        "{} of {} cells succeeded",
        completeness.succeeded,
        completeness.attempted
    );
    Ok(BacktestOutput {
        config: config.clone(),
        periods,
        errors,
        completeness,
    })
}

/// Transaction volume per annum: mean per-rebalance volume times rebalances
/// per year (the per-year sum), alongside the plain per-rebalance mean.
pub fn volume_per_annum(mean_per_rebalance: f64, n_out: PeriodSpec) -> f64 {
    mean_per_rebalance * n_out.per_year()
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub procedure: String,
    pub n_in: String,
    pub n_out: String,
    pub lambda_annual: f64,
    pub k: usize,
    pub rebalance_date: NaiveDate,
    pub universe_size: usize,
    pub cardinality: usize,
    pub in_sample_te: f64,
    pub out_sample_te: f64,
    pub transaction_volume: Option<f64>,
    pub enhanced_return: f64,
    pub objective: f64,
    pub converged: bool,
    pub start: StartKind,
    pub carried_prices: usize,
}

/// One row of the out-of-sample returns CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnRow {
    pub k: usize,
    pub cardinality: usize,
    pub date: NaiveDate,
    pub portfolio_return: f64,
    pub index_return: f64,
}

/// One row of the holdings CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldingRow {
    pub k: usize,
    pub cardinality: usize,
    pub rebalance_date: NaiveDate,
    pub asset: String,
    pub weight: f64,
}

impl BacktestOutput {
    pub fn result_rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for p in &self.periods {
            for c in &p.cells {
                rows.push(ResultRow {
                    procedure: self.config.procedure.to_string(),
                    n_in: self.config.n_in.to_string(),
                    n_out: self.config.n_out.to_string(),
                    lambda_annual: self.config.lambda_annual,
                    k: p.k(),
                    rebalance_date: p.rebalance_date,
                    universe_size: p.universe_size(),
                    cardinality: c.cardinality,
                    in_sample_te: c.in_sample_te,
                    out_sample_te: c.out_sample_te,
                    transaction_volume: c.transaction_volume,
                    enhanced_return: c.enhanced_return,
                    objective: c.objective,
                    converged: c.converged,
                    start: c.start,
                    carried_prices: c.carried_prices,
                });
            }
        }
        rows
    }

    pub fn return_rows(&self) -> Vec<ReturnRow> {
        let mut rows = Vec::new();
        for p in &self.periods {
            for c in &p.cells {
                for (t, r) in c.out_sample_returns.iter().enumerate() {
                    rows.push(ReturnRow {
                        k: p.k(),
                        cardinality: c.cardinality,
                        date: p.out_dates[t],
                        portfolio_return: *r,
                        index_return: p.index_out_returns[t],
                    });
                }
            }
        }
        rows
    }

    pub fn holding_rows(&self) -> Vec<HoldingRow> {
        let mut rows = Vec::new();
        for p in &self.periods {
            for c in &p.cells {
                for (id, w) in &c.portfolio.holdings {
                    rows.push(HoldingRow {
                        k: p.k(),
                        cardinality: c.cardinality,
                        rebalance_date: c.portfolio.rebalance_date,
                        asset: id.clone(),
                        weight: *w,
                    });
                }
            }
        }
        rows
    }
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| BacktestError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| BacktestError::Csv(e.to_string()))
}

pub fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>, BacktestError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| BacktestError::Csv(e.to_string())))
        .collect()
}
