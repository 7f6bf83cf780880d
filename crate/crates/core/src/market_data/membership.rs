use std::collections::BTreeMap;

use chrono::NaiveDate;

use super::MarketDataError;

/// Closed date interval of index membership. `None` bounds are open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MembershipInterval {
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

impl MembershipInterval {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start.map_or(true, |s| s <= date) && self.end.map_or(true, |e| date <= e)
    }
}

/// Per-asset index membership.
///
/// Assets absent from an explicit calendar are never members. The
/// [`MembershipCalendar::always`] calendar treats every asset as a member on
/// every date, which is the right default when no constituent history exists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MembershipCalendar {
    intervals: BTreeMap<String, Vec<MembershipInterval>>,
    everyone: bool,
}

impl MembershipCalendar {
    pub fn always() -> Self {
        Self {
            intervals: BTreeMap::new(),
            everyone: true,
        }
    }

    /// Builds a calendar from raw intervals. Intervals per asset are sorted by
    /// start and must not overlap.
    pub fn from_intervals<I>(entries: I) -> Result<Self, MarketDataError>
    where
        I: IntoIterator<Item = (String, MembershipInterval)>,
    {
        let mut intervals: BTreeMap<String, Vec<MembershipInterval>> = BTreeMap::new();
        for (asset, iv) in entries {
            if let (Some(s), Some(e)) = (iv.start, iv.end) {
                if e < s {
                    return Err(MarketDataError::Membership(format!(
                        "{asset}: interval ends {e} before it starts {s}"
                    )));
                }
            }
            intervals.entry(asset).or_default().push(iv);
        }
        for (asset, ivs) in intervals.iter_mut() {
            ivs.sort_by_key(|iv| iv.start);
            for pair in ivs.windows(2) {
                let overlaps = match (pair[0].end, pair[1].start) {
                    (None, _) | (_, None) => true,
                    (Some(e), Some(s)) => s <= e,
                };
                if overlaps {
                    return Err(MarketDataError::Membership(format!(
                        "{asset}: overlapping membership intervals"
                    )));
                }
            }
        }
        Ok(Self {
            intervals,
            everyone: false,
        })
    }

    pub fn is_member(&self, asset: &str, date: NaiveDate) -> bool {
        if self.everyone {
            return true;
        }
        self.intervals
            .get(asset)
            .is_some_and(|ivs| ivs.iter().any(|iv| iv.contains(date)))
    }

    pub fn is_open_ended(&self) -> bool {
        self.everyone
    }

    /// All intervals in asset-id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &MembershipInterval)> {
        self.intervals
            .iter()
            .flat_map(|(a, ivs)| ivs.iter().map(move |iv| (a.as_str(), iv)))
    }

    /// Checks that every bounded endpoint is a trading date of the panel.
    pub fn check_dates(&self, dates: &[NaiveDate]) -> Result<(), MarketDataError> {
        for (asset, iv) in self.entries() {
            for d in [iv.start, iv.end].into_iter().flatten() {
                if dates.binary_search(&d).is_err() {
                    return Err(MarketDataError::Membership(format!(
                        "{asset}: endpoint {d} is not a trading date"
                    )));
                }
            }
        }
        Ok(())
    }
}
