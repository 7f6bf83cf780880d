//! Price panels, membership calendars, log returns, eligible universes and
//! the rolling estimation/evaluation schedule.

mod io;
mod membership;
mod panel;
mod schedule;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use thiserror::Error;

pub use io::{
    convert_dataset, load_membership, load_price_panel, read_membership, read_price_panel,
    save_membership, save_price_panel, write_membership, write_price_panel, PanelFormat,
    INDEX_COLUMN,
};
pub use membership::{MembershipCalendar, MembershipInterval};
pub use panel::{annualized_volatility, log_return, ObsRange, PricePanel};
pub use schedule::{calendar_schedule, window_schedule, PeriodSpec, Window, WindowSchedule};

/// Trading days per year used for every annualization.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: malformed date '{value}'")]
    MalformedDate { row: usize, value: String },
    #[error("row {row}, column {column}: malformed number '{value}'")]
    MalformedNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column {column}: non-positive price {value}")]
    NonPositivePrice {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: duplicate date {date}")]
    DuplicateDate { row: usize, date: NaiveDate },
    #[error("row {row}: date {date} is out of order")]
    UnorderedDates { row: usize, date: NaiveDate },
    #[error("row {row}: missing index value")]
    MissingIndex { row: usize },
    #[error("duplicate asset id '{0}'")]
    DuplicateAsset(String),
    #[error("panel shape: {0}")]
    Shape(String),
    #[error("membership: {0}")]
    Membership(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("insufficient data: need {needed} observations, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("empty universe at {date}: no index member is fully priced over the estimation window")]
    EmptyUniverse { date: NaiveDate },
    #[error("unknown panel layout '{0}'")]
    UnknownLayout(String),
}

/// Assets eligible for selection in one estimation window: members of the
/// index on the rebalance date with a price on every date the window's
/// returns touch (`in_range.start - 1 ..= in_range.end`) and on the rebalance
/// date itself.
///
/// Returned indices are panel column positions in ascending order.
pub fn eligible_universe(
    panel: &PricePanel,
    members: &MembershipCalendar,
    in_range: ObsRange,
    rebalance: usize,
) -> Result<Vec<usize>, MarketDataError> {
    if in_range.start == 0 || in_range.end >= panel.num_dates() || rebalance >= panel.num_dates()
    {
        return Err(MarketDataError::Domain(format!(
            "window {}..={} / rebalance {} outside panel of {} dates",
            in_range.start,
            in_range.end,
            rebalance,
            panel.num_dates()
        )));
    }
    let date = panel.dates()[rebalance];
    let universe: Vec<usize> = (0..panel.num_assets())
        .filter(|&j| {
            members.is_member(&panel.assets()[j], date)
                && panel.fully_priced(j, in_range)
                && panel.price(j, rebalance).is_some()
        })
        .collect();
    if universe.is_empty() {
        log::warn!("empty universe at rebalance date {date}");
        return Err(MarketDataError::EmptyUniverse { date });
    }
    Ok(universe)
}

/// Log-return matrix (observations x assets) for the given assets over an
/// observation range. Every asset must be fully priced over the range.
pub fn return_matrix(
    panel: &PricePanel,
    assets: &[usize],
    range: ObsRange,
) -> Result<DMatrix<f64>, MarketDataError> {
    let mut out = DMatrix::zeros(range.len(), assets.len());
    for (c, &j) in assets.iter().enumerate() {
        for (r, t) in range.iter().enumerate() {
            out[(r, c)] = panel.asset_return(j, t).ok_or_else(|| {
                MarketDataError::Domain(format!(
                    "asset {} lacks prices around {}",
                    panel.assets()[j],
                    panel.dates()[t]
                ))
            })?;
        }
    }
    Ok(out)
}
