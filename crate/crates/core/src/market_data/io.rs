//! Panel and membership file formats.
//!
//! Canonical panel: wide CSV, header `date,INDEX,<asset ids...>`, dates as
//! `YYYY-MM-DD`, empty cell = missing price. The `INDEX` column may appear in
//! any position on input; it is always written second.
//!
//! Canonical membership: CSV `asset,start,end`, empty bound = open-ended.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;

use super::{MarketDataError, MembershipCalendar, MembershipInterval, PricePanel};

/// Reserved header of the index column in the canonical panel.
pub const INDEX_COLUMN: &str = "INDEX";

/// Input layouts understood by [`convert_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelFormat {
    /// Canonical wide CSV (optionally a directory with `panel.csv` and
    /// `membership.csv`).
    Canonical,
    /// Long CSV `date,asset,price`; index rows use the asset id `INDEX`.
    Long,
    /// Directory holding `prices.csv` (wide, `d/m/yyyy` dates, index column)
    /// and optionally `members.csv` (wide 0/1 constituent flags).
    Public,
}

impl FromStr for PanelFormat {
    type Err = MarketDataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(PanelFormat::Canonical),
            "long" => Ok(PanelFormat::Long),
            "public" => Ok(PanelFormat::Public),
            other => Err(MarketDataError::UnknownLayout(other.to_string())),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> MarketDataError {
    MarketDataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_iso(row: usize, s: &str) -> Result<NaiveDate, MarketDataError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| MarketDataError::MalformedDate {
        row,
        value: s.to_string(),
    })
}

fn parse_dmy(row: usize, s: &str) -> Result<NaiveDate, MarketDataError> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%d/%m/%Y")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y-%m-%d"))
        .map_err(|_| MarketDataError::MalformedDate {
            row,
            value: s.to_string(),
        })
}

fn parse_price(
    row: usize,
    column: &str,
    cell: &str,
    extra_missing: bool,
) -> Result<Option<f64>, MarketDataError> {
    let cell = cell.trim();
    if cell.is_empty() || (extra_missing && matches!(cell, "NA" | "NaN" | "nan" | "null")) {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| MarketDataError::MalformedNumber {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(MarketDataError::NonPositivePrice {
            row,
            column: column.to_string(),
            value: v,
        });
    }
    Ok(Some(v))
}

/// Shared wide-CSV reader. Rows are reported 1-based counting the header as
/// row 0, so row `r` is the `r`-th data line.
fn read_wide<R: Read>(
    reader: R,
    index_column: &str,
    date_parser: fn(usize, &str) -> Result<NaiveDate, MarketDataError>,
    extra_missing: bool,
) -> Result<PricePanel, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index_pos = headers
        .iter()
        .skip(1)
        .position(|h| h.eq_ignore_ascii_case(index_column))
        .map(|p| p + 1)
        .ok_or_else(|| MarketDataError::Shape(format!("no '{index_column}' column in header")))?;
    let asset_cols: Vec<usize> = (1..headers.len()).filter(|&c| c != index_pos).collect();
    let assets: Vec<String> = asset_cols.iter().map(|&c| headers[c].to_string()).collect();
    let mut dates = Vec::new();
    let mut index = Vec::new();
    let mut prices: Vec<Vec<Option<f64>>> = vec![Vec::new(); assets.len()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(MarketDataError::Shape(format!(
                "row {row}: {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let date = date_parser(row, &record[0])?;
        if let Some(&prev) = dates.last() {
            if date == prev {
                return Err(MarketDataError::DuplicateDate { row, date });
            }
            if date < prev {
                return Err(MarketDataError::UnorderedDates { row, date });
            }
        }
        dates.push(date);
        match parse_price(row, INDEX_COLUMN, &record[index_pos], extra_missing)? {
            Some(v) => index.push(v),
            None => return Err(MarketDataError::MissingIndex { row }),
        }
        for (k, &c) in asset_cols.iter().enumerate() {
            prices[k].push(parse_price(row, &assets[k], &record[c], extra_missing)?);
        }
    }
    let panel = PricePanel::new(dates, assets, prices, index)?;
    log::info!(
        "loaded panel: {} dates x {} assets",
        panel.num_dates(),
        panel.num_assets()
    );
    Ok(panel)
}

/// Reads a canonical panel.
pub fn read_price_panel<R: Read>(reader: R) -> Result<PricePanel, MarketDataError> {
    read_wide(reader, INDEX_COLUMN, parse_iso, false)
}

/// Loads a panel file in the given layout. For directory layouts pass the
/// directory.
pub fn load_price_panel(path: &Path, format: PanelFormat) -> Result<PricePanel, MarketDataError> {
    Ok(convert_dataset(path, format, None)?.0)
}

/// Writes the canonical panel. Prices use Rust's shortest round-trip float
/// formatting, so reading the output back reproduces the panel exactly.
pub fn write_price_panel<W: Write>(panel: &PricePanel, writer: W) -> Result<(), MarketDataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string(), INDEX_COLUMN.to_string()];
    header.extend(panel.assets().iter().cloned());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for (t, date) in panel.dates().iter().enumerate() {
        row.clear();
        row.push(date.format("%Y-%m-%d").to_string());
        row.push(panel.index_values()[t].to_string());
        for j in 0..panel.num_assets() {
            row.push(panel.price(j, t).map(|p| p.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| MarketDataError::Io {
        path: "<panel writer>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn save_price_panel(panel: &PricePanel, path: &Path) -> Result<(), MarketDataError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_price_panel(panel, std::io::BufWriter::new(f))
}

pub fn read_membership<R: Read>(reader: R) -> Result<MembershipCalendar, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut entries = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != 3 {
            return Err(MarketDataError::Shape(format!(
                "membership row {row}: expected asset,start,end"
            )));
        }
        let bound = |s: &str| -> Result<Option<NaiveDate>, MarketDataError> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_iso(row, s).map(Some)
            }
        };
        entries.push((
            record[0].to_string(),
            MembershipInterval {
                start: bound(&record[1])?,
                end: bound(&record[2])?,
            },
        ));
    }
    MembershipCalendar::from_intervals(entries)
}

pub fn load_membership(path: &Path) -> Result<MembershipCalendar, MarketDataError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_membership(f)
}

pub fn write_membership<W: Write>(
    calendar: &MembershipCalendar,
    writer: W,
) -> Result<(), MarketDataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["asset", "start", "end"])?;
    let fmt = |d: Option<NaiveDate>| d.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default();
    for (asset, iv) in calendar.entries() {
        w.write_record([asset.to_string(), fmt(iv.start), fmt(iv.end)])?;
    }
    w.flush().map_err(|e| MarketDataError::Io {
        path: "<membership writer>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn save_membership(calendar: &MembershipCalendar, path: &Path) -> Result<(), MarketDataError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_membership(calendar, std::io::BufWriter::new(f))
}

fn read_long<R: Read>(reader: R) -> Result<PricePanel, MarketDataError> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
    let mut dates = BTreeSet::new();
    let mut assets = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != 3 {
            return Err(MarketDataError::Shape(format!(
                "row {row}: expected date,asset,price"
            )));
        }
        let date = parse_iso(row, &record[0])?;
        let asset = record[1].to_string();
        let Some(price) = parse_price(row, &asset, &record[2], true)? else {
            continue;
        };
        if cells.insert((date, asset.clone()), price).is_some() {
            return Err(MarketDataError::DuplicateDate { row, date });
        }
        dates.insert(date);
        if asset != INDEX_COLUMN && seen.insert(asset.clone()) {
            assets.push(asset);
        }
    }
    assets.sort();
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    let mut index = Vec::with_capacity(dates.len());
    for (row, d) in dates.iter().enumerate() {
        match cells.get(&(*d, INDEX_COLUMN.to_string())) {
            Some(&v) => index.push(v),
            None => return Err(MarketDataError::MissingIndex { row: row + 1 }),
        }
    }
    let prices = assets
        .iter()
        .map(|a| {
            dates
                .iter()
                .map(|d| cells.get(&(*d, a.clone())).copied())
                .collect()
        })
        .collect();
    PricePanel::new(dates, assets, prices, index)
}

/// Converts a wide 0/1 constituent matrix (same date layout as the prices)
/// into membership intervals spanning each run of ones.
fn read_member_flags<R: Read>(
    reader: R,
    dates: &[NaiveDate],
) -> Result<MembershipCalendar, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let assets: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut run_start: Vec<Option<NaiveDate>> = vec![None; assets.len()];
    let mut last_date: Option<NaiveDate> = None;
    let mut entries = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let date = parse_dmy(row, &record[0])?;
        if dates.binary_search(&date).is_err() {
            return Err(MarketDataError::Membership(format!(
                "row {row}: constituent date {date} is not a price date"
            )));
        }
        for (k, asset) in assets.iter().enumerate() {
            let cell = record.get(k + 1).unwrap_or("").trim();
            let member = match cell {
                "1" | "1.0" | "true" | "TRUE" => true,
                "" | "0" | "0.0" | "false" | "FALSE" => false,
                other => {
                    return Err(MarketDataError::MalformedNumber {
                        row,
                        column: asset.clone(),
                        value: other.to_string(),
                    })
                }
            };
            match (member, run_start[k]) {
                (true, None) => run_start[k] = Some(date),
                (false, Some(s)) => {
                    entries.push((
                        asset.clone(),
                        MembershipInterval {
                            start: Some(s),
                            end: last_date,
                        },
                    ));
                    run_start[k] = None;
                }
                _ => {}
            }
        }
        last_date = Some(date);
    }
    for (k, s) in run_start.into_iter().enumerate() {
        if let Some(s) = s {
            entries.push((
                assets[k].clone(),
                MembershipInterval {
                    start: Some(s),
                    end: last_date,
                },
            ));
        }
    }
    MembershipCalendar::from_intervals(entries)
}

/// Reads a dataset in any supported layout, returning the panel and its
/// membership calendar (open membership when the layout carries none).
///
/// `index_column` overrides the index header name for the public layout.
pub fn convert_dataset(
    input: &Path,
    format: PanelFormat,
    index_column: Option<&str>,
) -> Result<(PricePanel, MembershipCalendar), MarketDataError> {
    let open = |p: &Path| File::open(p).map_err(|e| io_err(p, e));
    match format {
        PanelFormat::Canonical => {
            if input.is_dir() {
                let panel = read_price_panel(open(&input.join("panel.csv"))?)?;
                let mpath = input.join("membership.csv");
                let members = if mpath.exists() {
                    let m = read_membership(open(&mpath)?)?;
                    m.check_dates(panel.dates())?;
                    m
                } else {
                    MembershipCalendar::always()
                };
                Ok((panel, members))
            } else {
                Ok((read_price_panel(open(input)?)?, MembershipCalendar::always()))
            }
        }
        PanelFormat::Long => Ok((read_long(open(input)?)?, MembershipCalendar::always())),
        PanelFormat::Public => {
            let panel = read_wide(
                open(&input.join("prices.csv"))?,
                index_column.unwrap_or(INDEX_COLUMN),
                parse_dmy,
                true,
            )?;
            let mpath = input.join("members.csv");
            let members = if mpath.exists() {
                read_member_flags(open(&mpath)?, panel.dates())?
            } else {
                MembershipCalendar::always()
            };
            Ok((panel, members))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SMALL: &str = "date,INDEX,AAA,BBB\n\
                         2020-01-02,100,10,20\n\
                         2020-01-03,101,10.5,\n\
                         2020-01-06,99.5,10.25,19.5\n";

    #[test]
    fn reads_small_panel() {
        let p = read_price_panel(SMALL.as_bytes()).unwrap();
        assert_eq!(p.num_dates(), 3);
        assert_eq!(p.num_assets(), 2);
        assert_eq!(p.price(1, 1), None);
        assert_eq!(p.price(0, 2), Some(10.25));
        assert_eq!(p.index_values(), &[100.0, 101.0, 99.5]);
    }

    #[test]
    fn load_errors_name_location() {
        let zero = "date,INDEX,A\n2020-01-02,100,0.0\n";
        let err = read_price_panel(zero.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("non-positive price"), "{err}");
        assert!(err.to_string().contains("row 1"), "{err}");

        let bad_date = "date,INDEX,A\n2020-13-02,100,1\n";
        assert!(matches!(
            read_price_panel(bad_date.as_bytes()),
            Err(MarketDataError::MalformedDate { row: 1, .. })
        ));

        let dup = "date,INDEX,A\n2020-01-02,100,1\n2020-01-02,100,1\n";
        assert!(matches!(
            read_price_panel(dup.as_bytes()),
            Err(MarketDataError::DuplicateDate { row: 2, .. })
        ));

        let no_index = "date,INDEX,A\n2020-01-02,,1\n";
        assert!(matches!(
            read_price_panel(no_index.as_bytes()),
            Err(MarketDataError::MissingIndex { row: 1 })
        ));
    }

    #[test]
    fn long_layout() {
        let long = "date,asset,price\n\
                    2020-01-02,INDEX,100\n2020-01-02,B,2\n2020-01-02,A,1\n\
                    2020-01-03,INDEX,101\n2020-01-03,A,1.1\n";
        let (p, m) = convert_dataset_from_str(long);
        assert_eq!(p.assets(), &["A".to_string(), "B".to_string()]);
        assert_eq!(p.price(1, 1), None);
        assert!(m.is_open_ended());
    }

    fn convert_dataset_from_str(s: &str) -> (PricePanel, MembershipCalendar) {
        (read_long(s.as_bytes()).unwrap(), MembershipCalendar::always())
    }

    #[test]
    fn public_layout_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("prices.csv"),
            "Date,SP500,A,B\n3/1/2005,1200,10,NA\n4/1/2005,1190,10.1,5\n5/1/2005,1195,10.2,5.1\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("members.csv"),
            "Date,A,B\n3/1/2005,1,0\n4/1/2005,1,1\n5/1/2005,0,1\n",
        )
        .unwrap();
        let (p, m) = convert_dataset(dir.path(), PanelFormat::Public, Some("SP500")).unwrap();
        assert_eq!(p.num_dates(), 3);
        assert_eq!(p.dates()[0], NaiveDate::from_ymd_opt(2005, 1, 3).unwrap());
        assert_eq!(p.price(1, 0), None);
        assert!(m.is_member("A", p.dates()[1]));
        assert!(!m.is_member("A", p.dates()[2]));
        assert!(!m.is_member("B", p.dates()[0]));
        assert!(m.is_member("B", p.dates()[2]));
    }

    #[test]
    fn unknown_layout() {
        assert!(matches!(
            "xml".parse::<PanelFormat>(),
            Err(MarketDataError::UnknownLayout(_))
        ));
    }

    #[test]
    fn membership_roundtrip() {
        let src = "asset,start,end\nA,2020-01-02,2020-03-31\nA,2020-06-01,\nB,,2021-01-04\n";
        let cal = read_membership(src.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_membership(&cal, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), src);
    }

    proptest! {
        #[test]
        fn panel_roundtrip_is_bit_identical(
            cells in proptest::collection::vec(proptest::option::weighted(0.8, 1e-6f64..1e6), 3 * 12),
            index in proptest::collection::vec(1e-3f64..1e5, 12),
        ) {
            let start = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
            let dates: Vec<NaiveDate> = (0..12).map(|i| start + chrono::Days::new(i)).collect();
            let prices: Vec<Vec<Option<f64>>> = cells.chunks(12).map(|c| c.to_vec()).collect();
            let p = PricePanel::new(dates, vec!["X".into(), "Y".into(), "Z".into()], prices, index).unwrap();
            let mut first = Vec::new();
            write_price_panel(&p, &mut first).unwrap();
            let back = read_price_panel(first.as_slice()).unwrap();
            prop_assert_eq!(&back, &p);
            let mut second = Vec::new();
            write_price_panel(&back, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
