use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{MarketDataError, ObsRange, TRADING_DAYS};

/// Length of an estimation or evaluation period, either as a raw observation
/// count or as a calendar span in months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeriodSpec {
    Observations(usize),
    Months(u32),
}

impl PeriodSpec {
    /// Approximate number of observations, using 252 trading days per year.
    pub fn approx_observations(&self) -> usize {
        match *self {
            PeriodSpec::Observations(n) => n,
            PeriodSpec::Months(m) => ((m as f64) * TRADING_DAYS / 12.0).round() as usize,
        }
    }

    /// Rebalances per year implied by using this as an evaluation period.
    pub fn per_year(&self) -> f64 {
        match *self {
            PeriodSpec::Observations(n) => TRADING_DAYS / n as f64,
            PeriodSpec::Months(m) => 12.0 / m as f64,
        }
    }
}

impl fmt::Display for PeriodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PeriodSpec::Observations(n) => write!(f, "{n}"),
            PeriodSpec::Months(m) if m % 12 == 0 => write!(f, "{}y", m / 12),
            PeriodSpec::Months(m) => write!(f, "{m}m"),
        }
    }
}

impl FromStr for PeriodSpec {
    type Err = MarketDataError;

    /// Accepts `754` (observations), `3y` (years) or `6m` (months).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || MarketDataError::Schedule(format!("unrecognised period '{s}'"));
        if let Some(y) = s.strip_suffix(['y', 'Y']) {
            let y: u32 = y.trim().parse().map_err(|_| bad())?;
            if y == 0 {
                return Err(bad());
            }
            return Ok(PeriodSpec::Months(12 * y));
        }
        if let Some(m) = s.strip_suffix(['m', 'M']) {
            let m: u32 = m.trim().parse().map_err(|_| bad())?;
            if m == 0 {
                return Err(bad());
            }
            return Ok(PeriodSpec::Months(m));
        }
        let n: usize = s.parse().map_err(|_| bad())?;
        Ok(PeriodSpec::Observations(n))
    }
}

/// One estimation/evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// 1-based period index.
    pub k: usize,
    pub in_range: ObsRange,
    pub out_range: ObsRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSchedule {
    pub n_in: PeriodSpec,
    pub n_out: PeriodSpec,
    pub windows: Vec<Window>,
}

impl WindowSchedule {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Builds the schedule for a panel, dispatching on the period kind. Both
    /// periods must be of the same kind.
    pub fn for_dates(
        dates: &[NaiveDate],
        n_in: PeriodSpec,
        n_out: PeriodSpec,
    ) -> Result<Self, MarketDataError> {
        match (n_in, n_out) {
            (PeriodSpec::Observations(i), PeriodSpec::Observations(o)) => {
                window_schedule(dates.len().saturating_sub(1), i, o)
            }
            (PeriodSpec::Months(i), PeriodSpec::Months(o)) => calendar_schedule(dates, i, o),
            _ => Err(MarketDataError::Schedule(
                "estimation and evaluation periods must both be counts or both be calendar spans"
                    .into(),
            )),
        }
    }
}

/// Fixed-count rolling schedule. Window `K` uses observations
/// `[(K-1)*n_out + 1, (K-1)*n_out + n_in]` for estimation and
/// `[(K-1)*n_out + n_in + 1, K*n_out + n_in]` for evaluation, for every `K`
/// with `K*n_out + n_in <= total_observations`.
pub fn window_schedule(
    total_observations: usize,
    n_in: usize,
    n_out: usize,
) -> Result<WindowSchedule, MarketDataError> {
    if n_in < 2 || n_out < 1 {
        return Err(MarketDataError::Schedule(format!(
            "need n_in >= 2 and n_out >= 1, got {n_in} and {n_out}"
        )));
    }
    if total_observations < n_in + n_out {
        return Err(MarketDataError::InsufficientData {
            needed: n_in + n_out,
            available: total_observations,
        });
    }
    let count = (total_observations - n_in) / n_out;
    let windows = (1..=count)
        .map(|k| {
            let base = (k - 1) * n_out;
            Window {
                k,
                in_range: ObsRange::new(base + 1, base + n_in),
                out_range: ObsRange::new(base + n_in + 1, k * n_out + n_in),
            }
        })
        .collect();
    Ok(WindowSchedule {
        n_in: PeriodSpec::Observations(n_in),
        n_out: PeriodSpec::Observations(n_out),
        windows,
    })
}

fn month_number(d: NaiveDate) -> i64 {
    d.year() as i64 * 12 + d.month0() as i64
}

/// Calendar-aligned rolling schedule. Window `K` estimates on the `in_months`
/// calendar months starting `(K-1)*out_months` months after the month of the
/// first observation, and evaluates on the following `out_months` months. A
/// window is kept while its evaluation span ends no later than the month of
/// the final panel date.
pub fn calendar_schedule(
    dates: &[NaiveDate],
    in_months: u32,
    out_months: u32,
) -> Result<WindowSchedule, MarketDataError> {
    if in_months == 0 || out_months == 0 {
        return Err(MarketDataError::Schedule("periods must be non-empty".into()));
    }
    if dates.len() < 3 {
        return Err(MarketDataError::InsufficientData {
            needed: 3,
            available: dates.len().saturating_sub(1),
        });
    }
    let months: Vec<i64> = dates.iter().map(|&d| month_number(d)).collect();
    let first = months[1];
    let last = *months.last().unwrap();
    // Observation t lives at date index t; find obs ranges by month bounds.
    let obs_in_months = |lo: i64, hi: i64| -> Option<ObsRange> {
        let start = 1 + months[1..].partition_point(|&m| m < lo);
        let end = months[1..].partition_point(|&m| m <= hi);
        (start <= end && end >= 1).then(|| ObsRange::new(start, end))
    };
    let mut windows = Vec::new();
    for k in 1.. {
        let in_lo = first + (k as i64 - 1) * out_months as i64;
        let in_hi = in_lo + in_months as i64 - 1;
        let out_lo = in_hi + 1;
        let out_hi = out_lo + out_months as i64 - 1;
        if out_hi > last {
            break;
        }
        let (Some(in_range), Some(out_range)) =
            (obs_in_months(in_lo, in_hi), obs_in_months(out_lo, out_hi))
        else {
            break;
        };
        if in_range.len() < 2 {
            break;
        }
        windows.push(Window {
            k,
            in_range,
            out_range,
        });
    }
    if windows.is_empty() {
        return Err(MarketDataError::InsufficientData {
            needed: ((in_months + out_months) as f64 * TRADING_DAYS / 12.0) as usize,
            available: dates.len() - 1,
        });
    }
    Ok(WindowSchedule {
        n_in: PeriodSpec::Months(in_months),
        n_out: PeriodSpec::Months(out_months),
        windows,
    })
}
