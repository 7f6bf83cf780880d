use chrono::NaiveDate;

use super::MarketDataError;

/// Dated price matrix for a set of assets plus the tracked index.
///
/// Prices are stored column-wise (one vector per asset). A missing price is
/// `None`; zero is never used as a sentinel. The index is present on every
/// date.
///
/// Return observation `t` is aligned with date index `t`: it is the log return
/// between dates `t - 1` and `t`, so the first date carries no return and
/// observations are numbered `1..=num_dates() - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    prices: Vec<Vec<Option<f64>>>,
    index: Vec<f64>,
}

impl PricePanel {
    /// Builds a panel, checking every invariant. `prices[j][t]` is the price of
    /// asset `j` on date `t`.
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        prices: Vec<Vec<Option<f64>>>,
        index: Vec<f64>,
    ) -> Result<Self, MarketDataError> {
        for (row, pair) in dates.windows(2).enumerate() {
            if pair[1] == pair[0] {
                return Err(MarketDataError::DuplicateDate {
                    row: row + 1,
                    date: pair[1],
                });
            }
            if pair[1] < pair[0] {
                return Err(MarketDataError::UnorderedDates {
                    row: row + 1,
                    date: pair[1],
                });
            }
        }
        if prices.len() != assets.len() {
            return Err(MarketDataError::Shape(format!(
                "{} asset ids but {} price columns",
                assets.len(),
                prices.len()
            )));
        }
        if index.len() != dates.len() {
            return Err(MarketDataError::Shape(format!(
                "{} dates but {} index values",
                dates.len(),
                index.len()
            )));
        }
        for (j, column) in prices.iter().enumerate() {
            if column.len() != dates.len() {
                return Err(MarketDataError::Shape(format!(
                    "asset {} has {} prices for {} dates",
                    assets[j],
                    column.len(),
                    dates.len()
                )));
            }
            for (row, p) in column.iter().enumerate() {
                if let Some(p) = *p {
                    if !(p > 0.0 && p.is_finite()) {
                        return Err(MarketDataError::NonPositivePrice {
                            row,
                            column: assets[j].clone(),
                            value: p,
                        });
                    }
                }
            }
        }
        for (row, &v) in index.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MarketDataError::NonPositivePrice {
                    row,
                    column: "index".to_string(),
                    value: v,
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &assets {
            if !seen.insert(id.as_str()) {
                return Err(MarketDataError::DuplicateAsset(id.clone()));
            }
        }
        Ok(Self {
            dates,
            assets,
            prices,
            index,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn num_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn num_assets(&self) -> usize {
        self.assets.len()
    }

    /// Number of return observations (`num_dates - 1`, or 0 for an empty panel).
    pub fn num_observations(&self) -> usize {
        self.dates.len().saturating_sub(1)
    }

    pub fn price(&self, asset: usize, date: usize) -> Option<f64> {
        self.prices[asset][date]
    }

    pub fn asset_prices(&self, asset: usize) -> &[Option<f64>] {
        &self.prices[asset]
    }

    pub fn index_values(&self) -> &[f64] {
        &self.index
    }

    pub fn asset_position(&self, id: &str) -> Option<usize> {
        self.assets.iter().position(|a| a == id)
    }

    pub fn date_position(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Index log return for observation `t` (1-based, aligned to date `t`).
    pub fn index_return(&self, t: usize) -> f64 {
        (self.index[t] / self.index[t - 1]).ln()
    }

    /// Index log returns over an inclusive observation range.
    pub fn index_returns(&self, range: ObsRange) -> Vec<f64> {
        range.iter().map(|t| self.index_return(t)).collect()
    }

    /// Asset log return for observation `t`, if both prices are present.
    pub fn asset_return(&self, asset: usize, t: usize) -> Option<f64> {
        match (self.prices[asset][t], self.prices[asset][t - 1]) {
            (Some(now), Some(prev)) => Some((now / prev).ln()),
            _ => None,
        }
    }

    /// True when the asset has a price on every date `range.start - 1 ..= range.end`.
    pub fn fully_priced(&self, asset: usize, range: ObsRange) -> bool {
        self.prices[asset][range.start - 1..=range.end]
            .iter()
            .all(Option::is_some)
    }

    /// Returns a copy of the panel with one price replaced. Used to build
    /// perturbed panels in tests and what-if runs.
    pub fn with_price(
        &self,
        asset: usize,
        date: usize,
        price: Option<f64>,
    ) -> Result<Self, MarketDataError> {
        let mut prices = self.prices.clone();
        prices[asset][date] = price;
        Self::new(
            self.dates.clone(),
            self.assets.clone(),
            prices,
            self.index.clone(),
        )
    }
}

/// Inclusive, 1-based range of return observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ObsRange {
    pub start: usize,
    pub end: usize,
}

impl ObsRange {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start >= 1 && start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Natural log return `ln(p_now / p_prev)`.
pub fn log_return(p_now: f64, p_prev: f64) -> Result<f64, MarketDataError> {
    if !(p_now > 0.0 && p_prev > 0.0) || !p_now.is_finite() || !p_prev.is_finite() {
        return Err(MarketDataError::Domain(format!(
            "log return needs positive prices, got {p_now} and {p_prev}"
        )));
    }
    Ok((p_now / p_prev).ln())
}

/// Annualized volatility in percent: `100 * sqrt(252) * sample std`.
pub fn annualized_volatility(returns: &[f64]) -> Result<f64, MarketDataError> {
    if returns.len() < 2 {
        return Err(MarketDataError::Domain(format!(
            "volatility needs at least 2 observations, got {}",
            returns.len()
        )));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let ss: f64 = returns.iter().map(|r| (r - mean).powi(2)).sum();
    Ok(100.0 * super::TRADING_DAYS.sqrt() * (ss / (n - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn log_return_examples() {
        assert!((log_return(110.0, 100.0).unwrap() - 0.09531017980432493).abs() < 1e-15);
        assert_eq!(log_return(100.0, 100.0).unwrap(), 0.0);
        assert!((log_return(100.0, 110.0).unwrap() + 0.09531017980432493).abs() < 1e-15);
        assert!(log_return(0.0, 1.0).is_err());
        assert!(log_return(1.0, -2.0).is_err());
    }

    #[test]
    fn volatility() {
        assert!(annualized_volatility(&[0.01; 30]).unwrap() < 1e-12);
        let alt: Vec<f64> = (0..252)
            .map(|i| if i % 2 == 0 { 0.01 } else { -0.01 })
            .collect();
        // 100 * sqrt(252) * 0.01 * sqrt(252 / 251)
        assert!((annualized_volatility(&alt).unwrap() - 15.906098958064609).abs() < 1e-9);
        assert!(annualized_volatility(&[0.1]).is_err());
    }

    #[test]
    fn rejects_bad_panels() {
        let dates = vec![d(2020, 1, 1), d(2020, 1, 1)];
        let err = PricePanel::new(dates, vec![], vec![], vec![1.0, 1.0]).unwrap_err();
        assert!(matches!(err, MarketDataError::DuplicateDate { row: 1, .. }));

        let dates = vec![d(2020, 1, 1), d(2020, 1, 2)];
        let err = PricePanel::new(
            dates.clone(),
            vec!["A".into()],
            vec![vec![Some(1.0), Some(0.0)]],
            vec![1.0, 1.0],
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-positive price"));

        let err = PricePanel::new(dates, vec![], vec![], vec![1.0, -1.0]).unwrap_err();
        assert!(matches!(err, MarketDataError::NonPositivePrice { row: 1, .. }));
    }

    #[test]
    fn return_alignment() {
        let p = PricePanel::new(
            vec![d(2020, 1, 1), d(2020, 1, 2), d(2020, 1, 3)],
            vec!["A".into()],
            vec![vec![Some(100.0), None, Some(121.0)]],
            vec![10.0, 11.0, 12.1],
        )
        .unwrap();
        assert_eq!(p.num_observations(), 2);
        assert!((p.index_return(1) - 1.1f64.ln()).abs() < 1e-15);
        assert_eq!(p.asset_return(0, 1), None);
        assert_eq!(p.asset_return(0, 2), None);
        assert!(!p.fully_priced(0, ObsRange::new(1, 2)));
    }
}
