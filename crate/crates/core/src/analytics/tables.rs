//! Summary tables and plot-ready series built from one or more runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, NaiveDate};

use super::{
    average_rank, fit_power_law, overlap_percent, ratios, te_volatility_correlation,
    AnalyticsError, ExcessReturnSeries, PowerLawFit, RiskFreeSeries, SeriesSource, TeRecord,
};
use crate::backtest::{BacktestOutput, ResultRow, ReturnRow};
use crate::market_data::{annualized_volatility, PeriodSpec};
use crate::preselect::annual_to_daily_lambda;
use crate::weights::annualize;

/// A rectangular table of pre-formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AnalyticsError> {
        let err = |e: csv::Error| AnalyticsError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| AnalyticsError::Io(e.to_string()))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Selected asset ids per cardinality for one period.
pub type PeriodSelection = BTreeMap<usize, Vec<String>>;

/// Everything the tables need from one backtest run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub procedure: String,
    pub n_in: String,
    pub n_out: String,
    pub lambda_annual: f64,
    pub results: Vec<ResultRow>,
    pub returns: Vec<ReturnRow>,
    /// Period index to the selection at each requested cardinality.
    pub selections: BTreeMap<usize, PeriodSelection>,
}

impl RunData {
    pub fn from_output(out: &BacktestOutput) -> Self {
        let mut selections = BTreeMap::new();
        for p in &out.periods {
            if let Some(delta) = &p.selection {
                let mut per_n = BTreeMap::new();
                for n in 1..=delta.n_max() {
                    let mut ids: Vec<String> =
                        delta.row(n).iter().map(|&j| p.universe[j].clone()).collect();
                    ids.sort();
                    per_n.insert(n, ids);
                }
                selections.insert(p.k(), per_n);
            }
        }
        Self {
            procedure: out.config.procedure.to_string(),
            n_in: out.config.n_in.to_string(),
            n_out: out.config.n_out.to_string(),
            lambda_annual: out.config.lambda_annual,
            results: out.result_rows(),
            returns: out.return_rows(),
            selections,
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}/{} λ={}", self.procedure, self.n_in, self.n_out, self.lambda_annual)
    }

    fn rebalances_per_year(&self) -> f64 {
        self.n_out
            .parse::<PeriodSpec>()
            .map(|p| p.per_year())
            .unwrap_or(1.0)
    }

    fn mean_of(&self, n: usize, f: impl Fn(&ResultRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.cardinality == n)
            .filter_map(&f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_in_sample_te(&self, n: usize) -> Option<f64> {
        self.mean_of(n, |r| Some(r.in_sample_te))
    }

    pub fn mean_out_sample_te(&self, n: usize) -> Option<f64> {
        self.mean_of(n, |r| Some(r.out_sample_te))
    }

    pub fn mean_enhanced_return(&self, n: usize) -> Option<f64> {
        self.mean_of(n, |r| Some(r.enhanced_return))
    }

    /// Mean volume per rebalance, first period excluded.
    pub fn mean_volume_per_rebalance(&self, n: usize) -> Option<f64> {
        let first = self.results.iter().map(|r| r.k).min()?;
        self.mean_of(n, |r| if r.k == first { None } else { r.transaction_volume })
    }

    /// Volume per annum: per-rebalance mean times rebalances per year.
    pub fn volume_per_annum(&self, n: usize) -> Option<f64> {
        self.mean_volume_per_rebalance(n)
            .map(|v| v * self.rebalances_per_year())
    }

    pub fn cardinalities(&self) -> BTreeSet<usize> {
        self.results.iter().map(|r| r.cardinality).collect()
    }
}

/// Cardinalities at or above `rank_min` present in every run.
fn rank_columns(runs: &[RunData], rank_min: usize) -> Vec<usize> {
    let mut common: Option<BTreeSet<usize>> = None;
    for r in runs {
        let c = r.cardinalities();
        common = Some(match common {
            None => c,
            Some(s) => s.intersection(&c).copied().collect(),
        });
    }
    common
        .unwrap_or_default()
        .into_iter()
        .filter(|&n| n >= rank_min)
        .collect()
}

type Measure = (&'static str, bool, fn(&RunData, usize) -> Option<f64>);

fn measure_table(
    runs: &[RunData],
    cardinalities: &[usize],
    rank_min: usize,
    leading: &[&str],
    lead_values: impl Fn(&RunData) -> Vec<String>,
    measures: &[Measure],
) -> Result<Table, AnalyticsError> {
    let mut header: Vec<String> = leading.iter().map(|s| s.to_string()).collect();
    header.push("measure".into());
    header.push("average_rank".into());
    header.extend(cardinalities.iter().map(|n| n.to_string()));
    let mut t = Table {
        header,
        rows: Vec::new(),
    };
    let rank_cols = rank_columns(runs, rank_min);
    for &(name, ascending, f) in measures {
        let ranks = if rank_cols.is_empty() {
            None
        } else {
            let values: Vec<Vec<Option<f64>>> = runs
                .iter()
                .map(|r| rank_cols.iter().map(|&n| f(r, n)).collect())
                .collect();
            average_rank(&values, ascending).ok()
        };
        for (i, r) in runs.iter().enumerate() {
            let mut row = lead_values(r);
            row.push(name.into());
            row.push(cell(ranks.as_ref().map(|v| v[i])));
            row.extend(cardinalities.iter().map(|&n| cell(f(r, n))));
            t.rows.push(row);
        }
    }
    Ok(t)
}

/// Average in- and out-of-sample TE and transaction volume per procedure,
/// with average ranks over cardinalities `>= rank_min`.
pub fn table1(runs: &[RunData], cardinalities: &[usize], rank_min: usize) -> Result<Table, AnalyticsError> {
    measure_table(
        runs,
        cardinalities,
        rank_min,
        &["procedure"],
        |r| vec![r.procedure.clone()],
        &[
            ("in_sample_te", true, |r, n| r.mean_in_sample_te(n)),
            ("out_sample_te", true, |r, n| r.mean_out_sample_te(n)),
            ("transaction_volume_pa", true, |r, n| r.volume_per_annum(n)),
            ("transaction_volume_per_rebalance", true, |r, n| {
                r.mean_volume_per_rebalance(n)
            }),
        ],
    )
}

/// Average percentage of common assets for every pair of runs.
pub fn table2(runs: &[RunData], cardinalities: &[usize]) -> Result<Table, AnalyticsError> {
    let mut t = Table::new(
        ["pair".to_string()]
            .into_iter()
            .chain(cardinalities.iter().map(|n| n.to_string())),
    );
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a, b) = (&runs[i], &runs[j]);
            let mut row = vec![format!("{} vs {}", a.procedure, b.procedure)];
            for &n in cardinalities {
                let mut vals = Vec::new();
                for (k, sa) in &a.selections {
                    if let (Some(x), Some(y)) = (sa.get(&n), b.selections.get(k).and_then(|s| s.get(&n))) {
                        vals.push(overlap_percent(x, y)?);
                    }
                }
                row.push(cell(
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                ));
            }
            t.rows.push(row);
        }
    }
    Ok(t)
}

/// Out-of-sample TE by calendar year against index volatility that year,
/// followed by the range and correlation rows.
pub fn table3(run: &RunData, cardinalities: &[usize]) -> Result<Table, AnalyticsError> {
    let lambda = annual_to_daily_lambda(run.lambda_annual);
    let mut index_by_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    let mut dev: BTreeMap<(usize, i32), Vec<f64>> = BTreeMap::new();
    for r in &run.returns {
        index_by_date.insert(r.date, r.index_return);
        dev.entry((r.cardinality, r.date.year()))
            .or_default()
            .push(r.index_return + lambda - r.portfolio_return);
    }
    let mut by_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for (d, r) in &index_by_date {
        by_year.entry(d.year()).or_default().push(*r);
    }
    let mut t = Table::new(
        ["year".to_string(), "volatility".to_string()]
            .into_iter()
            .chain(cardinalities.iter().map(|n| n.to_string())),
    );
    let mut vol_col = Vec::new();
    let mut te_cols: Vec<Vec<f64>> = vec![Vec::new(); cardinalities.len()];
    for (year, rets) in &by_year {
        let vol = annualized_volatility(rets).ok();
        let mut row = vec![year.to_string(), cell(vol)];
        for (c, &n) in cardinalities.iter().enumerate() {
            let te = dev.get(&(n, *year)).map(|d| {
                annualize((d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
            });
            if let (Some(te), Some(_)) = (te, vol) {
                te_cols[c].push(te);
            }
            row.push(cell(te));
        }
        if let Some(v) = vol {
            vol_col.push(v);
        }
        t.rows.push(row);
    }
    let range = |v: &[f64]| {
        (!v.is_empty()).then(|| {
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        })
    };
    let mut range_row = vec!["range".to_string(), cell(range(&vol_col))];
    let mut corr_row = vec!["correlation".to_string(), String::new()];
    for col in &te_cols {
        range_row.push(cell(range(col)));
        let corr = if col.len() == vol_col.len() {
            te_volatility_correlation(col, &vol_col).ok()
        } else {
            None
        };
        corr_row.push(cell(corr));
    }
    t.rows.push(range_row);
    t.rows.push(corr_row);
    Ok(t)
}

fn te_records(runs: &[RunData], rank_min: usize, out_sample: bool) -> Vec<TeRecord> {
    let mut recs = Vec::new();
    for r in runs {
        for row in &r.results {
            if row.cardinality >= rank_min {
                recs.push(TeRecord {
                    procedure: r.procedure.clone(),
                    cardinality: row.cardinality,
                    te: if out_sample {
                        row.out_sample_te
                    } else {
                        row.in_sample_te
                    },
                });
            }
        }
    }
    recs
}

/// Power-law fits of per-period TE on cardinality for in- and out-of-sample
/// tracking errors.
pub fn power_law_fits(
    runs: &[RunData],
    base: &str,
    rank_min: usize,
) -> Result<(PowerLawFit, PowerLawFit), AnalyticsError> {
    Ok((
        fit_power_law(&te_records(runs, rank_min, false), base)?,
        fit_power_law(&te_records(runs, rank_min, true), base)?,
    ))
}

pub fn table4(runs: &[RunData], base: &str, rank_min: usize) -> Result<Table, AnalyticsError> {
    let (fi, fo) = power_law_fits(runs, base, rank_min)?;
    let mut t = Table::new([
        "term",
        "in_sample",
        "in_sample_p_value",
        "out_of_sample",
        "out_of_sample_p_value",
    ]);
    t.rows.push(vec![
        "observations".into(),
        fi.observations.to_string(),
        String::new(),
        fo.observations.to_string(),
        String::new(),
    ]);
    t.rows.push(vec![
        "adjusted_r2".into(),
        fi.adjusted_r2.to_string(),
        String::new(),
        fo.adjusted_r2.to_string(),
        String::new(),
    ]);
    let mut terms = vec![
        ("alpha0".to_string(), fi.alpha0, fo.alpha0),
        ("alpha1 ln(n)".to_string(), fi.alpha1, fo.alpha1),
    ];
    for ((name, a), (_, b)) in fi.dummy_coefficients.iter().zip(&fo.dummy_coefficients) {
        terms.push((name.clone(), *a, *b));
    }
    for (i, (name, a, b)) in terms.into_iter().enumerate() {
        t.rows.push(vec![
            name,
            a.to_string(),
            fi.p_values[i].to_string(),
            b.to_string(),
            fo.p_values[i].to_string(),
        ]);
    }
    Ok(t)
}

/// Sensitivity grid: out-of-sample TE, enhanced return and transaction
/// volume per (estimation, evaluation) combination.
pub fn sensitivity_table(
    runs: &[RunData],
    cardinalities: &[usize],
    rank_min: usize,
) -> Result<Table, AnalyticsError> {
    measure_table(
        runs,
        cardinalities,
        rank_min,
        &["procedure", "n_in", "n_out", "lambda_annual"],
        |r| {
            vec![
                r.procedure.clone(),
                r.n_in.clone(),
                r.n_out.clone(),
                r.lambda_annual.to_string(),
            ]
        },
        &[
            ("out_sample_te", true, |r, n| r.mean_out_sample_te(n)),
            ("enhanced_return", false, |r, n| r.mean_enhanced_return(n)),
            ("transaction_volume_pa", true, |r, n| r.volume_per_annum(n)),
            ("transaction_volume_per_rebalance", true, |r, n| {
                r.mean_volume_per_rebalance(n)
            }),
        ],
    )
}

/// Sharpe, gain-loss and Sortino ratios of the chained out-of-sample
/// returns per cardinality, plus the index over the same dates. Without a
/// risk-free series the rate is taken as zero.
pub fn table7(
    runs: &[RunData],
    cardinalities: &[usize],
    risk_free: Option<&RiskFreeSeries>,
) -> Result<Table, AnalyticsError> {
    let mut t = Table::new([
        "procedure",
        "n_in",
        "n_out",
        "lambda_annual",
        "cardinality",
        "out_sample_te",
        "enhanced_return",
        "transaction_volume_pa",
        "sharpe",
        "gain_loss",
        "sortino",
    ]);
    let excess = |dates: &[NaiveDate], rets: &[f64], src| -> Result<ExcessReturnSeries, AnalyticsError> {
        let rf = match risk_free {
            Some(s) => s.daily_for(dates)?,
            None => vec![0.0; dates.len()],
        };
        ExcessReturnSeries::from_returns(rets, &rf, src)
    };
    for r in runs {
        let lead = vec![
            r.procedure.clone(),
            r.n_in.clone(),
            r.n_out.clone(),
            r.lambda_annual.to_string(),
        ];
        let mut index: BTreeMap<NaiveDate, f64> = BTreeMap::new();
        for &n in cardinalities {
            let mut series: Vec<(NaiveDate, f64)> = r
                .returns
                .iter()
                .filter(|x| x.cardinality == n)
                .map(|x| {
                    index.insert(x.date, x.index_return);
                    (x.date, x.portfolio_return)
                })
                .collect();
            if series.is_empty() {
                continue;
            }
            series.sort_by_key(|x| x.0);
            let dates: Vec<NaiveDate> = series.iter().map(|x| x.0).collect();
            let rets: Vec<f64> = series.iter().map(|x| x.1).collect();
            let rs = ratios(&excess(&dates, &rets, SeriesSource::Portfolio)?).ok();
            let mut row = lead.clone();
            row.extend([
                n.to_string(),
                cell(r.mean_out_sample_te(n)),
                cell(r.mean_enhanced_return(n)),
                cell(r.volume_per_annum(n)),
                cell(rs.map(|x| x.sharpe)),
                cell(rs.map(|x| x.gain_loss)),
                cell(rs.map(|x| x.sortino)),
            ]);
            t.rows.push(row);
        }
        if !index.is_empty() {
            let dates: Vec<NaiveDate> = index.keys().copied().collect();
            let rets: Vec<f64> = index.values().copied().collect();
            let rs = ratios(&excess(&dates, &rets, SeriesSource::Index)?).ok();
            let mut row = lead.clone();
            row.extend([
                "index".to_string(),
                String::new(),
                String::new(),
                String::new(),
                cell(rs.map(|x| x.sharpe)),
                cell(rs.map(|x| x.gain_loss)),
                cell(rs.map(|x| x.sortino)),
            ]);
            t.rows.push(row);
        }
    }
    Ok(t)
}

/// Long format TE per period and cardinality, for TE-versus-cardinality
/// curves.
pub fn figure_te_curves(runs: &[RunData]) -> Table {
    let mut t = Table::new([
        "procedure",
        "n_in",
        "n_out",
        "lambda_annual",
        "k",
        "rebalance_date",
        "cardinality",
        "in_sample_te",
        "out_sample_te",
    ]);
    for r in runs {
        for row in &r.results {
            t.rows.push(vec![
                r.procedure.clone(),
                r.n_in.clone(),
                r.n_out.clone(),
                r.lambda_annual.to_string(),
                row.k.to_string(),
                row.rebalance_date.to_string(),
                row.cardinality.to_string(),
                row.in_sample_te.to_string(),
                row.out_sample_te.to_string(),
            ]);
        }
    }
    t
}

/// Long format mean enhanced return per cardinality, for enhancement curves.
pub fn figure_enhancement(runs: &[RunData]) -> Table {
    let mut t = Table::new([
        "procedure",
        "n_in",
        "n_out",
        "lambda_annual",
        "cardinality",
        "enhanced_return",
    ]);
    for r in runs {
        for n in r.cardinalities() {
            t.rows.push(vec![
                r.procedure.clone(),
                r.n_in.clone(),
                r.n_out.clone(),
                r.lambda_annual.to_string(),
                n.to_string(),
                cell(r.mean_enhanced_return(n)),
            ]);
        }
    }
    t
}
