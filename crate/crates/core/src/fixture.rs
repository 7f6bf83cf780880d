//! Deterministic synthetic dataset with a known tracking solution.
//!
//! Fifty assets over six years of weekdays follow a one-factor model. The
//! index is the price-level combination of five of them with a daily
//! log-return perturbation of standard deviation [`NOISE_SD`]. A handful of
//! the remaining assets list late, have price gaps, are delisted or change
//! index membership, so the universe rules get exercised.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::market_data::{MembershipCalendar, MembershipInterval, PricePanel};

pub const FIXTURE_SEED: u64 = 20_240_601;
pub const NUM_ASSETS: usize = 50;
pub const NOISE_SD: f64 = 5e-4;
/// Positions of the index constituents and their value weights at the start.
pub const TRUE_ASSETS: [usize; 5] = [3, 11, 19, 28, 40];
pub const TRUE_VALUE_WEIGHTS: [f64; 5] = [0.30, 0.25, 0.20, 0.15, 0.10];

pub struct SyntheticDataset {
    pub panel: PricePanel,
    pub members: MembershipCalendar,
    pub true_assets: Vec<String>,
}

pub fn asset_id(j: usize) -> String {
    format!("S{:02}", j + 1)
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid fixture date")
}

/// Weekdays from 2012-01-02 to 2017-12-29.
pub fn fixture_dates() -> Vec<NaiveDate> {
    let mut d = date(2012, 1, 2);
    let end = date(2017, 12, 29);
    let mut out = Vec::new();
    while d <= end {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

pub fn generate(seed: u64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dates = fixture_dates();
    let t_len = dates.len();
    let market = Normal::new(2e-4, 0.009).expect("valid normal");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, NOISE_SD).expect("valid normal");

    let betas: Vec<f64> = (0..NUM_ASSETS).map(|_| rng.gen_range(0.6..1.4)).collect();
    let idio: Vec<f64> = (0..NUM_ASSETS).map(|_| rng.gen_range(0.008..0.02)).collect();
    let start: Vec<f64> = (0..NUM_ASSETS).map(|_| rng.gen_range(10.0..150.0)).collect();

    let mut prices = vec![vec![0.0; t_len]; NUM_ASSETS];
    for j in 0..NUM_ASSETS {
        prices[j][0] = start[j];
    }
    let mut index = vec![0.0; t_len];
    let units: Vec<f64> = TRUE_ASSETS
        .iter()
        .zip(TRUE_VALUE_WEIGHTS)
        .map(|(&j, w)| 1000.0 * w / start[j])
        .collect();
    let basket = |p: &Vec<Vec<f64>>, t: usize| -> f64 {
        TRUE_ASSETS
            .iter()
            .zip(&units)
            .map(|(&j, u)| u * p[j][t])
            .sum()
    };
    index[0] = basket(&prices, 0);
    let mut drift = 0.0;
    for t in 1..t_len {
        let f = market.sample(&mut rng);
        for j in 0..NUM_ASSETS {
            let r = betas[j] * f + idio[j] * unit.sample(&mut rng);
            prices[j][t] = prices[j][t - 1] * r.exp();
        }
        drift += noise.sample(&mut rng);
        index[t] = basket(&prices, t) * drift.exp();
    }

    let pos = |d: NaiveDate| dates.partition_point(|x| *x < d);
    let mut priced: Vec<Vec<Option<f64>>> = prices
        .into_iter()
        .map(|col| col.into_iter().map(Some).collect())
        .collect();
    // S46 lists mid-2013.
    for v in &mut priced[45][..pos(date(2013, 7, 1))] {
        *v = None;
    }
    // S47 has a two-week gap in March 2016.
    for v in &mut priced[46][pos(date(2016, 3, 7))..pos(date(2016, 3, 19))] {
        *v = None;
    }
    // S50 is delisted after 2017-03-31.
    for v in &mut priced[49][pos(date(2017, 4, 1))..] {
        *v = None;
    }

    let mut intervals = Vec::new();
    for j in 0..NUM_ASSETS {
        let iv = match j {
            45 => MembershipInterval {
                start: Some(date(2013, 7, 1)),
                end: None,
            },
            // Leaves the index at the end of June 2016.
            47 => MembershipInterval {
                start: None,
                end: Some(date(2016, 6, 30)),
            },
            // Joins the index in 2014.
            48 => MembershipInterval {
                start: Some(date(2014, 1, 1)),
                end: None,
            },
            49 => MembershipInterval {
                start: None,
                end: Some(date(2017, 3, 31)),
            },
            _ => MembershipInterval {
                start: None,
                end: None,
            },
        };
        intervals.push((asset_id(j), iv));
    }
    let members = MembershipCalendar::from_intervals(intervals).expect("valid fixture membership");
    let panel = PricePanel::new(
        dates,
        (0..NUM_ASSETS).map(asset_id).collect(),
        priced,
        index,
    )
    .expect("valid fixture panel");
    SyntheticDataset {
        panel,
        members,
        true_assets: TRUE_ASSETS.iter().map(|&j| asset_id(j)).collect(),
    }
}

/// The bundled dataset.
pub fn synthetic() -> SyntheticDataset {
    generate(FIXTURE_SEED)
}
