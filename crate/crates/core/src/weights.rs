//! Tracking portfolio weights.
//!
//! The portfolio value is `V_t = sum_i x_i P_it` with the `x_i` fixed over a
//! window, so the portfolio return is `ln(V_t / V_{t-1})`. Weights minimise
//! `TE² + w * Penalty` over the simplex `x_i > 0, sum x_i = 1`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{ObsRange, PricePanel, TRADING_DAYS};

/// Lower bound on the auxiliary variables `z` (with `x = z / sum z`).
pub const Z_LOWER_BOUND: f64 = 1e-8;
/// Optimised weights below this are raised to [`WEIGHT_FLOOR`].
pub const WEIGHT_CUTOFF: f64 = 1e-6;
pub const WEIGHT_FLOOR: f64 = 1e-8;
const MEMORY: usize = 10;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("empty selection")]
    EmptySelection,
    #[error("asset {asset} has no price on {date}")]
    MissingPrice { asset: String, date: NaiveDate },
    #[error("invalid portfolio: {0}")]
    InvalidPortfolio(String),
    #[error("{0}")]
    Domain(String),
    #[error("portfolio csv: {0}")]
    Csv(String),
}

/// Long-only, fully invested holdings at one rebalance date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub rebalance_date: NaiveDate,
    /// Asset id to weight; every weight is strictly positive.
    pub holdings: BTreeMap<String, f64>,
}

impl Portfolio {
    pub fn new(
        rebalance_date: NaiveDate,
        holdings: BTreeMap<String, f64>,
    ) -> Result<Self, WeightsError> {
        if holdings.is_empty() {
            return Err(WeightsError::EmptySelection);
        }
        if let Some((id, w)) = holdings.iter().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
            return Err(WeightsError::InvalidPortfolio(format!(
                "weight of {id} is {w}, must be positive"
            )));
        }
        let total: f64 = holdings.values().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(WeightsError::InvalidPortfolio(format!(
                "weights sum to {total}"
            )));
        }
        Ok(Self {
            rebalance_date,
            holdings,
        })
    }

    /// Builds a portfolio from parallel id/weight slices.
    pub fn from_weights(
        rebalance_date: NaiveDate,
        ids: &[String],
        weights: &[f64],
    ) -> Result<Self, WeightsError> {
        Self::new(
            rebalance_date,
            ids.iter().cloned().zip(weights.iter().copied()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.holdings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holdings.is_empty()
    }

    /// Weight of `id`, zero when not held.
    pub fn weight(&self, id: &str) -> f64 {
        self.holdings.get(id).copied().unwrap_or(0.0)
    }

    /// Writes `asset,weight` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), WeightsError> {
        let err = |e: csv::Error| WeightsError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["asset", "weight"]).map_err(err)?;
        for (id, x) in &self.holdings {
            w.write_record([id.as_str(), &x.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| WeightsError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(rebalance_date: NaiveDate, reader: R) -> Result<Self, WeightsError> {
        let err = |e: csv::Error| WeightsError::Csv(e.to_string());
        let mut rdr = csv::Reader::from_reader(reader);
        let mut holdings = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(err)?;
            let w: f64 = rec[1]
                .parse()
                .map_err(|_| WeightsError::Csv(format!("bad weight '{}'", &rec[1])))?;
            holdings.insert(rec[0].to_string(), w);
        }
        Self::new(rebalance_date, holdings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub penalty_weight: f64,
    pub lambda_daily: f64,
    /// Stop when the relative objective decrease of a step falls below this.
    pub tolerance: f64,
    /// Stop when the projected gradient infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Defaults to `10 * (n + 50)` for `n` selected assets.
    pub max_iterations: Option<usize>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            penalty_weight: 5.0,
            lambda_daily: 0.0,
            tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            max_iterations: None,
        }
    }
}

/// How missing prices inside a window are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapPolicy {
    /// Any missing price is an error (estimation windows).
    Reject,
    /// A missing price repeats the last observed one (evaluation windows).
    CarryForward,
}

/// Prices of the selected assets over `start-1..=end` and the target returns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingWindow {
    /// Asset-major: `prices[i][s]` for `s = 0..=m`.
    prices: Vec<Vec<f64>>,
    target: Vec<f64>,
    carried: usize,
}

impl TrackingWindow {
    pub fn new(
        panel: &PricePanel,
        assets: &[usize],
        range: ObsRange,
        lambda_daily: f64,
        gaps: GapPolicy,
    ) -> Result<Self, WeightsError> {
        if assets.is_empty() {
            return Err(WeightsError::EmptySelection);
        }
        let first = range.start - 1;
        let mut prices = Vec::with_capacity(assets.len());
        let mut carried = 0;
        for &j in assets {
            let mut col = Vec::with_capacity(range.len() + 1);
            let mut last: Option<f64> = None;
            for t in first..=range.end {
                let p = match (panel.price(j, t), gaps) {
                    (Some(p), _) => p,
                    (None, GapPolicy::CarryForward) if last.is_some() => {
                        carried += 1;
                        last.unwrap()
                    }
                    (None, _) => {
                        return Err(WeightsError::MissingPrice {
                            asset: panel.assets()[j].clone(),
                            date: panel.dates()[t],
                        })
                    }
                };
                last = Some(p);
                col.push(p);
            }
            prices.push(col);
        }
        let target = range
            .iter()
            .map(|t| panel.index_return(t) + lambda_daily)
            .collect();
        Ok(Self {
            prices,
            target,
            carried,
        })
    }

    /// Direct construction: `prices[i]` has one more entry than `target`.
    pub fn from_parts(prices: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self, WeightsError> {
        if prices.is_empty() {
            return Err(WeightsError::EmptySelection);
        }
        if prices.iter().any(|p| p.len() != target.len() + 1) {
            return Err(WeightsError::Domain(
                "each price series needs one more value than the target".into(),
            ));
        }
        if target.is_empty() {
            return Err(WeightsError::Domain("empty window".into()));
        }
        if prices.iter().flatten().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(WeightsError::Domain("prices must be positive".into()));
        }
        Ok(Self {
            prices,
            target,
            carried: 0,
        })
    }

    /// Missing prices replaced by the previous observation.
    pub fn carried_prices(&self) -> usize {
        self.carried
    }

    pub fn num_assets(&self) -> usize {
        self.prices.len()
    }

    pub fn observations(&self) -> usize {
        self.target.len()
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    fn values(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.target.len() + 1];
        for (xi, p) in x.iter().zip(&self.prices) {
            for (vs, ps) in v.iter_mut().zip(p) {
                *vs += xi * ps;
            }
        }
        v
    }

    /// Buy-and-hold portfolio log returns.
    pub fn portfolio_returns(&self, x: &[f64]) -> Vec<f64> {
        let v = self.values(x);
        v.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
    }

    /// `target_t - portfolio_return_t` per observation.
    pub fn deviations(&self, x: &[f64]) -> Vec<f64> {
        self.portfolio_returns(x)
            .iter()
            .zip(&self.target)
            .map(|(r, y)| y - r)
            .collect()
    }

    /// Root mean square deviation (per observation, not annualised).
    pub fn tracking_error(&self, x: &[f64]) -> f64 {
        let d = self.deviations(x);
        (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
    }

    /// Squared mean deviation.
    pub fn penalty(&self, x: &[f64]) -> f64 {
        let d = self.deviations(x);
        (d.iter().sum::<f64>() / d.len() as f64).powi(2)
    }

    pub fn objective(&self, x: &[f64], penalty_weight: f64) -> f64 {
        let d = self.deviations(x);
        let m = d.len() as f64;
        let mean = d.iter().sum::<f64>() / m;
        d.iter().map(|v| v * v).sum::<f64>() / m + penalty_weight * mean * mean
    }

    /// Objective and its gradient with respect to the unnormalised weights
    /// `z`. The objective depends on `z` only through `z / sum z`, so the
    /// same formula serves both parameterisations.
    pub fn objective_and_gradient(&self, z: &[f64], penalty_weight: f64) -> (f64, Vec<f64>) {
        let v = self.values(z);
        let m = self.target.len();
        let mf = m as f64;
        let d: Vec<f64> = (0..m)
            .map(|t| self.target[t] - (v[t + 1] / v[t]).ln())
            .collect();
        let mean = d.iter().sum::<f64>() / mf;
        let f = d.iter().map(|x| x * x).sum::<f64>() / mf + penalty_weight * mean * mean;
        let grad = self
            .prices
            .iter()
            .map(|p| {
                let mut sq = 0.0;
                let mut lin = 0.0;
                for t in 0..m {
                    let g = p[t + 1] / v[t + 1] - p[t] / v[t];
                    sq += d[t] * g;
                    lin += g;
                }
                -2.0 / mf * sq - penalty_weight * 2.0 * mean * lin / mf
            })
            .collect();
        (f, grad)
    }

    /// Pairs of assets whose price series are proportional over the window.
    fn proportional_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.prices.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let r0 = self.prices[a][0] / self.prices[b][0];
                if self.prices[a]
                    .iter()
                    .zip(&self.prices[b])
                    .all(|(x, y)| ((x / y) / r0 - 1.0).abs() < 1e-12)
                {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Per-observation tracking error to % p.a.
pub fn annualize(te: f64) -> f64 {
    100.0 * TRADING_DAYS.sqrt() * te
}

fn positions(portfolio: &Portfolio, panel: &PricePanel) -> Result<(Vec<usize>, Vec<f64>), WeightsError> {
    let mut idx = Vec::with_capacity(portfolio.len());
    let mut w = Vec::with_capacity(portfolio.len());
    for (id, x) in &portfolio.holdings {
        let j = panel
            .asset_position(id)
            .ok_or_else(|| WeightsError::Domain(format!("asset {id} not in panel")))?;
        idx.push(j);
        w.push(*x);
    }
    Ok((idx, w))
}

/// Per-observation tracking error of a held portfolio over `range`.
pub fn tracking_error(
    portfolio: &Portfolio,
    panel: &PricePanel,
    range: ObsRange,
    lambda_daily: f64,
    gaps: GapPolicy,
) -> Result<f64, WeightsError> {
    let (idx, w) = positions(portfolio, panel)?;
    Ok(TrackingWindow::new(panel, &idx, range, lambda_daily, gaps)?.tracking_error(&w))
}

/// Squared mean deviation of a held portfolio over `range`.
pub fn penalty(
    portfolio: &Portfolio,
    panel: &PricePanel,
    range: ObsRange,
    lambda_daily: f64,
    gaps: GapPolicy,
) -> Result<f64, WeightsError> {
    let (idx, w) = positions(portfolio, panel)?;
    Ok(TrackingWindow::new(panel, &idx, range, lambda_daily, gaps)?.penalty(&w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Uniform,
    Warm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    /// Weights in selection order, strictly positive, summing to one.
    pub weights: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub start: StartKind,
    pub warnings: Vec<String>,
}

struct Run {
    x: Vec<f64>,
    f: f64,
    converged: bool,
    iterations: usize,
}

/// Projected limited-memory quasi-Newton descent on `z >= Z_LOWER_BOUND`.
fn lbfgs(window: &TrackingWindow, z0: &[f64], config: &ObjectiveConfig, max_iter: usize) -> Run {
    let n = z0.len();
    let w = config.penalty_weight;
    let (f_start, _) = window.objective_and_gradient(z0, w);
    // Work with the objective relative to its starting value so the
    // tolerances do not depend on the volatility level of the data.
    let scale = if f_start > 0.0 { f_start } else { 1.0 };
    let eval = |z: &[f64]| {
        let (f, g) = window.objective_and_gradient(z, w);
        (f / scale, g.into_iter().map(|v| v / scale).collect::<Vec<_>>())
    };
    let mut z: Vec<f64> = z0.iter().map(|v| v.max(Z_LOWER_BOUND)).collect();
    let (mut f, mut g) = eval(&z);
    let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut converged = f_start == 0.0;
    let mut iterations = 0;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    while !converged && iterations < max_iter {
        let active: Vec<bool> = (0..n)
            .map(|i| z[i] <= Z_LOWER_BOUND && g[i] > 0.0)
            .collect();
        let pg: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] }).collect();
        let pg_norm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if pg_norm < config.gradient_tolerance {
            converged = true;
            break;
        }

        let mut stalled = false;
        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !mem.is_empty();
            let mut d = if use_memory {
                two_loop(&pg, &mem)
            } else {
                let mean_z = z.iter().sum::<f64>() / n as f64;
                let s = 0.1 * mean_z / pg_norm;
                pg.iter().map(|v| -v * s).collect()
            };
            for i in 0..n {
                if active[i] {
                    d[i] = 0.0;
                }
            }
            if dot(&d, &pg) >= 0.0 {
                if use_memory {
                    continue;
                }
                stalled = true;
                break;
            }
            let mut alpha = 1.0;
            for _ in 0..60 {
                let trial: Vec<f64> = (0..n)
                    .map(|i| (z[i] + alpha * d[i]).max(Z_LOWER_BOUND))
                    .collect();
                let step: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
                let (ft, gt) = eval(&trial);
                if ft.is_finite() && ft <= f + 1e-4 * dot(&g, &step) && ft <= f {
                    accepted = Some((trial, step, ft, gt));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            if !use_memory {
                stalled = true;
            }
            mem.clear();
        }
        if stalled || accepted.is_none() {
            // No descent possible at working precision.
            log::trace!("line search stalled at iteration {iterations}, f = {f:e}");
            converged = true;
            break;
        }
        let (z_new, s, f_new, g_new) = accepted.unwrap();
        iterations += 1;
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == MEMORY {
                mem.remove(0);
            }
            mem.push((s, y, 1.0 / sy));
        }
        let decrease = f - f_new;
        log::trace!("iteration {iterations}: f = {f_new:e}");
        z = z_new;
        g = g_new;
        let f_old = f;
        f = f_new;
        if decrease <= config.tolerance * f_old.abs().max(f_new.abs()) || f == 0.0 {
            converged = true;
        }
    }
    let total: f64 = z.iter().sum();
    Run {
        x: z.iter().map(|v| v / total).collect(),
        f: f * scale,
        converged,
        iterations,
    }
}

fn two_loop(grad: &[f64], mem: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut q = grad.to_vec();
    let mut alphas = vec![0.0; mem.len()];
    for (k, (s, y, rho)) in mem.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[k] = a;
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
    }
    let (s, y, _) = mem.last().expect("memory is non-empty");
    let gamma = dot(s, y) / dot(y, y);
    q.iter_mut().for_each(|v| *v *= gamma);
    for (k, (s, y, rho)) in mem.iter().enumerate() {
        let b = rho * dot(y, &q);
        q.iter_mut()
            .zip(s)
            .for_each(|(qi, si)| *qi += (alphas[k] - b) * si);
    }
    q.iter().map(|v| -v).collect()
}

/// Raises tiny weights to the floor and renormalises, keeping every weight
/// strictly positive.
fn floor_weights(x: &[f64]) -> Vec<f64> {
    let raised: Vec<f64> = x
        .iter()
        .map(|&v| if v < WEIGHT_CUTOFF { WEIGHT_FLOOR } else { v })
        .collect();
    let total: f64 = raised.iter().sum();
    raised.iter().map(|v| v / total).collect()
}

/// Minimises `TE² + w * Penalty` over the simplex for one window, from the
/// uniform start and, if given, from `warm` (weights in selection order,
/// zeros allowed). The better result is kept; ties favour the warm start.
pub fn optimize_window(
    window: &TrackingWindow,
    config: &ObjectiveConfig,
    warm: Option<&[f64]>,
) -> Result<Optimum, WeightsError> {
    if config.penalty_weight < 0.0 || !config.penalty_weight.is_finite() {
        return Err(WeightsError::Domain(format!(
            "penalty weight must be non-negative, got {}",
            config.penalty_weight
        )));
    }
    let n = window.num_assets();
    let mut warnings = Vec::new();
    if window.observations() < n + 1 {
        warnings.push(format!(
            "{} observations for {n} assets; weights are poorly determined",
            window.observations()
        ));
    }
    for (a, b) in window.proportional_pairs() {
        warnings.push(format!(
            "selected assets {a} and {b} have proportional prices; weights are not unique"
        ));
    }
    for msg in &warnings {
        log::warn!("{msg}");
    }
    let w = config.penalty_weight;
    let uniform = vec![1.0 / n as f64; n];
    if n == 1 {
        return Ok(Optimum {
            objective: window.objective(&uniform, w),
            weights: uniform,
            converged: true,
            iterations: 0,
            start: StartKind::Uniform,
            warnings,
        });
    }
    let max_iter = config.max_iterations.unwrap_or(10 * (n + 50));
    let mut best = lbfgs(window, &uniform, config, max_iter);
    let mut start = StartKind::Uniform;
    if let Some(warm) = warm {
        if warm.len() != n {
            return Err(WeightsError::Domain(format!(
                "warm start has {} weights for {n} assets",
                warm.len()
            )));
        }
        let total: f64 = warm.iter().map(|v| v.max(0.0)).sum();
        if total > 0.0 {
            let z0: Vec<f64> = warm.iter().map(|v| v.max(0.0) / total).collect();
            let run = lbfgs(window, &z0, config, max_iter);
            if run.f <= best.f {
                best = run;
                start = StartKind::Warm;
            }
        }
    }
    let mut weights = floor_weights(&best.x);
    let mut objective = window.objective(&weights, w);
    let f_uniform = window.objective(&uniform, w);
    if objective > f_uniform {
        weights = uniform;
        objective = f_uniform;
        start = StartKind::Uniform;
    }
    if !best.converged {
        let msg = format!("optimizer stopped after {max_iter} iterations without converging");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Optimum {
        weights,
        objective,
        converged: best.converged,
        iterations: best.iterations,
        start,
        warnings,
    })
}

/// Optimises weights for `selection` (panel asset positions) over the
/// estimation range. The rebalance date is the last date of the range. A
/// warm-start portfolio is restricted to the selection and renormalised.
pub fn optimize_weights(
    selection: &[usize],
    panel: &PricePanel,
    in_range: ObsRange,
    config: &ObjectiveConfig,
    warm_start: Option<&Portfolio>,
) -> Result<(Portfolio, Optimum), WeightsError> {
    let window = TrackingWindow::new(panel, selection, in_range, config.lambda_daily, GapPolicy::Reject)?;
    let ids: Vec<String> = selection.iter().map(|&j| panel.assets()[j].clone()).collect();
    let warm: Option<Vec<f64>> = warm_start.map(|p| ids.iter().map(|id| p.weight(id)).collect());
    let opt = optimize_window(&window, config, warm.as_deref())?;
    let date = panel.dates()[in_range.end];
    let portfolio = Portfolio::from_weights(date, &ids, &opt.weights)?;
    Ok((portfolio, opt))
}
