use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use cardtrack::analytics::tables::{
    figure_enhancement, figure_te_curves, sensitivity_table, table1, table2, table3, table4,
    table7, PeriodSelection, RunData, Table,
};
use cardtrack::analytics::{AnalyticsError, RiskFreeSeries};
use cardtrack::backtest::{
    read_rows, run_backtest, validate_backtest, write_rows, BacktestError, BacktestOutput,
    FailureKind,
};
use cardtrack::fixture::{synthetic, NOISE_SD};
use cardtrack::market_data::{
    convert_dataset, write_membership, write_price_panel, MembershipCalendar, PanelFormat,
    PeriodSpec, PricePanel,
};
use cardtrack::preselect::{Direction, Procedure, SelectionMatrix};
use cardtrack::weights::annualize;
use serde::Serialize;

use crate::config::{parse_cardinalities, parse_layout, parse_period, RunFlags, Settings};
use crate::error::{CliError, CliResult};
use crate::output::{
    dataset_digest, delta_file, now, sha256_file, write_atomic, DatasetRef, RunManifest,
    DELTA_DIR, ERRORS, HOLDINGS, MANIFEST, RESULTS, RETURNS,
};

/// Cardinalities below this are left out of average ranks and power-law fits.
pub const RANK_MIN: usize = 5;

fn layout_name(f: PanelFormat) -> &'static str {
    match f {
        PanelFormat::Canonical => "canonical",
        PanelFormat::Long => "long",
        PanelFormat::Public => "public",
    }
}

// ---------------------------------------------------------------------------
// convert

pub fn convert(
    input: &Path,
    layout: &str,
    out_dir: &Path,
    index_column: Option<&str>,
) -> CliResult<()> {
    let format = parse_layout(layout)?;
    let (panel, members) = convert_dataset(input, format, index_column)?;
    write_atomic(&out_dir.join("panel.csv"), |w| Ok(write_price_panel(&panel, w)?))?;
    write_atomic(&out_dir.join("membership.csv"), |w| {
        Ok(write_membership(&members, w)?)
    })?;
    println!(
        "wrote {} ({} dates x {} assets)",
        out_dir.display(),
        panel.num_dates(),
        panel.num_assets()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// backtest

pub struct Dataset {
    pub panel: PricePanel,
    pub members: MembershipCalendar,
    pub reference: DatasetRef,
}

pub fn load_dataset(settings: &Settings) -> CliResult<Dataset> {
    let (panel, members) = convert_dataset(
        &settings.dataset,
        settings.layout,
        settings.index_column.as_deref(),
    )?;
    Ok(Dataset {
        panel,
        members,
        reference: DatasetRef {
            path: settings.dataset.display().to_string(),
            layout: layout_name(settings.layout).to_string(),
            sha256: dataset_digest(&settings.dataset)?,
        },
    })
}

fn csv_err(e: BacktestError) -> CliError {
    CliError::Data(e.to_string())
}

/// Runs one backtest and writes its run directory. Per-cell failures are
/// recorded in the outputs; they do not abort the run.
pub fn run_to_dir(
    settings: &Settings,
    data: &Dataset,
    out_dir: &Path,
) -> CliResult<BacktestOutput> {
    let cfg = &settings.backtest;
    let periods = validate_backtest(&data.panel, &data.members, cfg)?;
    log::info!("{}: {periods} periods", cfg.procedure);
    let started = now();
    let out = run_backtest(&data.panel, &data.members, cfg)?;

    let delta_dir = out_dir.join(DELTA_DIR);
    if delta_dir.is_dir() {
        for e in fs::read_dir(&delta_dir)?.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.starts_with("period_") && name.ends_with(".csv") {
                fs::remove_file(e.path())?;
            }
        }
    }
    let mut names = vec![RESULTS.to_string(), RETURNS.to_string(), HOLDINGS.to_string(), ERRORS.to_string()];
    write_atomic(&out_dir.join(RESULTS), |w| write_rows(&out.result_rows(), w).map_err(csv_err))?;
    write_atomic(&out_dir.join(RETURNS), |w| write_rows(&out.return_rows(), w).map_err(csv_err))?;
    write_atomic(&out_dir.join(HOLDINGS), |w| write_rows(&out.holding_rows(), w).map_err(csv_err))?;
    write_atomic(&out_dir.join(ERRORS), |w| write_rows(&out.errors, w).map_err(csv_err))?;
    for p in &out.periods {
        if let Some(sel) = &p.selection {
            let name = delta_file(p.k());
            write_atomic(&out_dir.join(&name), |w| {
                sel.write_csv(&p.universe, w)
                    .map_err(|e| CliError::Data(e.to_string()))
            })?;
            names.push(name);
        }
    }
    let mut files = BTreeMap::new();
    for name in names {
        files.insert(name.clone(), sha256_file(&out_dir.join(&name))?);
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: now(),
        dataset: data.reference.clone(),
        procedure: cfg.procedure.to_string(),
        config: cfg.clone(),
        periods: out.periods.len(),
        completeness: out.completeness,
        files,
    };
    manifest.save(out_dir)?;
    Ok(out)
}

/// Maps an incomplete run to the exit class of its worst failure.
fn completion_status(out: &BacktestOutput, label: &str) -> CliResult<()> {
    if out.is_complete() {
        return Ok(());
    }
    let msg = format!(
        "{label}: {} of {} cells failed; see {ERRORS}",
        out.completeness.attempted - out.completeness.succeeded,
        out.completeness.attempted
    );
    if out.errors.iter().any(|e| e.kind == FailureKind::Numerical) {
        Err(CliError::Numerical(msg))
    } else {
        Err(CliError::Data(msg))
    }
}

fn summarize(out: &BacktestOutput) {
    let te = out.mean_out_sample_te();
    let shown: Vec<String> = te
        .iter()
        .take(8)
        .map(|(n, v)| format!("{n}:{v:.3}"))
        .collect();
    println!(
        "{} {}/{}: {} periods, {}/{} cells; mean out-of-sample TE {}{}",
        out.config.procedure,
        out.config.n_in,
        out.config.n_out,
        out.periods.len(),
        out.completeness.succeeded,
        out.completeness.attempted,
        shown.join(" "),
        if te.len() > 8 { " ..." } else { "" }
    );
}

pub fn backtest(flags: &RunFlags) -> CliResult<()> {
    let file = flags.file_config()?;
    let settings = flags.resolve(&file)?;
    let data = load_dataset(&settings)?;
    let out = run_to_dir(&settings, &data, &settings.out_dir)?;
    summarize(&out);
    println!("wrote {}", settings.out_dir.join(MANIFEST).display());
    completion_status(&out, &settings.out_dir.display().to_string())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SweepFlags {
    /// Estimation periods, e.g. "2y,3y,4y".
    #[arg(long)]
    pub nin_grid: Option<String>,
    /// Evaluation periods, e.g. "3m,6m,1y".
    #[arg(long)]
    pub nout_grid: Option<String>,
    /// Enhancement levels in % p.a., e.g. "0,5".
    #[arg(long, allow_hyphen_values = true)]
    pub lambdas: Option<String>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Serialize)]
struct SweepCell {
    dir: String,
    procedure: String,
    n_in: String,
    n_out: String,
    lambda_annual: f64,
    substituted_forward: bool,
    attempted: usize,
    succeeded: usize,
}

fn lambda_tag(l: f64) -> String {
    format!("l{l}")
}

pub fn sweep(flags: &RunFlags, grid: &SweepFlags) -> CliResult<()> {
    let file = flags.file_config()?;
    let base = flags.resolve(&file)?;
    let section = file.sweep.clone().unwrap_or_default();
    let n_ins: Vec<String> = match &grid.nin_grid {
        Some(s) => split_list(s),
        None => section
            .n_in
            .clone()
            .unwrap_or_else(|| vec!["2y".into(), "3y".into(), "4y".into()]),
    };
    let n_outs: Vec<String> = match &grid.nout_grid {
        Some(s) => split_list(s),
        None => section
            .n_out
            .clone()
            .unwrap_or_else(|| vec!["3m".into(), "6m".into(), "1y".into()]),
    };
    let lambdas: Vec<f64> = match &grid.lambdas {
        Some(s) => split_list(s)
            .iter()
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("bad lambda '{v}'")))
            })
            .collect::<CliResult<_>>()?,
        None => section
            .lambda_annual
            .clone()
            .unwrap_or_else(|| vec![base.backtest.lambda_annual]),
    };
    if n_ins.is_empty() || n_outs.is_empty() {
        return Err(CliError::Usage("empty estimation or evaluation grid".into()));
    }
    if lambdas.is_empty() {
        return Err(CliError::Usage("empty lambda list".into()));
    }
    let n_ins: Vec<PeriodSpec> = n_ins.iter().map(|s| parse_period(s)).collect::<CliResult<_>>()?;
    let n_outs: Vec<PeriodSpec> = n_outs.iter().map(|s| parse_period(s)).collect::<CliResult<_>>()?;
    // Validate every cell before computing any of them.
    let mut plan = Vec::new();
    for &lambda in &lambdas {
        for &n_in in &n_ins {
            for &n_out in &n_outs {
                let mut s = base.clone();
                s.backtest.n_in = n_in;
                s.backtest.n_out = n_out;
                s.backtest.lambda_annual = lambda;
                s.backtest.validate()?;
                s.out_dir = base.out_dir.join(format!("{n_in}-{n_out}-{}", lambda_tag(lambda)));
                plan.push(s);
            }
        }
    }

    let data = load_dataset(&base)?;
    for s in &mut plan {
        let substituted = match validate_backtest(&data.panel, &data.members, &s.backtest) {
            Err(BacktestError::Infeasible { .. }) if s.backtest.procedure.direction == Direction::Backward => {
                s.backtest.procedure = Procedure {
                    direction: Direction::Forward,
                    ..s.backtest.procedure
                };
                validate_backtest(&data.panel, &data.members, &s.backtest)?;
                true
            }
            other => {
                other?;
                false
            }
        };
        if substituted {
            log::warn!(
                "{}/{}: estimation window too short for backward elimination, using {}",
                s.backtest.n_in,
                s.backtest.n_out,
                s.backtest.procedure
            );
        }
    }

    let mut cells = Vec::new();
    let mut by_lambda: BTreeMap<String, Vec<RunData>> = BTreeMap::new();
    let mut worst: Option<CliError> = None;
    for s in &plan {
        let out = run_to_dir(s, &data, &s.out_dir)?;
        summarize(&out);
        if let Err(e) = completion_status(&out, &s.out_dir.display().to_string()) {
            log::error!("{e}");
            if worst.as_ref().map_or(true, |w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
        cells.push(SweepCell {
            dir: s.out_dir.display().to_string(),
            procedure: s.backtest.procedure.to_string(),
            n_in: s.backtest.n_in.to_string(),
            n_out: s.backtest.n_out.to_string(),
            lambda_annual: s.backtest.lambda_annual,
            substituted_forward: s.backtest.procedure != base.backtest.procedure,
            attempted: out.completeness.attempted,
            succeeded: out.completeness.succeeded,
        });
        by_lambda
            .entry(lambda_tag(s.backtest.lambda_annual))
            .or_default()
            .push(RunData::from_output(&out));
    }
    for (tag, runs) in &by_lambda {
        let t = sensitivity_table(runs, &base.backtest.cardinalities, RANK_MIN)?;
        let path = base.out_dir.join(format!("sensitivity_{tag}.csv"));
        write_table(&path, &t)?;
        println!("wrote {}", path.display());
    }
    write_atomic(&base.out_dir.join("sweep.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &cells).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(writeln!(w)?)
    })?;
    match worst {
        Some(e) => Err(e),
        None => Ok(()),
    }
}


fn write_table(path: &Path, t: &Table) -> CliResult<()> {
    write_atomic(path, |w| Ok(t.write_csv(w)?))
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, clap::Args)]
pub struct ReportArgs {
    /// Run directories written by `backtest` or `sweep`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Where the tables go.
    #[arg(long, default_value = "report")]
    pub out_dir: PathBuf,
    /// CSV `date,rate` of annual risk-free rates in % p.a.
    #[arg(long)]
    pub risk_free: Option<PathBuf>,
    /// Cardinalities shown as columns; defaults to those common to all runs.
    #[arg(long)]
    pub cardinalities: Option<String>,
    /// Reference procedure for the power-law dummies.
    #[arg(long)]
    pub base: Option<String>,
    /// Smallest cardinality entering ranks and power-law fits.
    #[arg(long, default_value_t = RANK_MIN)]
    pub rank_min: usize,
}

pub fn load_run(dir: &Path) -> CliResult<(RunManifest, RunData)> {
    let m = RunManifest::load(dir)?;
    m.verify(dir)?;
    let open = |name: &str| {
        let p = dir.join(name);
        File::open(&p).map_err(|e| CliError::Data(format!("cannot open {}: {e}", p.display())))
    };
    let results = read_rows(open(RESULTS)?).map_err(csv_err)?;
    let returns = read_rows(open(RETURNS)?).map_err(csv_err)?;
    let mut selections = BTreeMap::new();
    for name in m.files.keys() {
        let Some(k) = name
            .strip_prefix(&format!("{DELTA_DIR}/period_"))
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        let (ids, sel) = SelectionMatrix::read_csv(open(name)?)
            .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
        let mut per_n: PeriodSelection = BTreeMap::new();
        for n in 1..=sel.n_max() {
            let mut chosen: Vec<String> = sel.row(n).iter().map(|&j| ids[j].clone()).collect();
            chosen.sort();
            per_n.insert(n, chosen);
        }
        selections.insert(k, per_n);
    }
    let run = RunData {
        procedure: m.procedure.clone(),
        n_in: m.config.n_in.to_string(),
        n_out: m.config.n_out.to_string(),
        lambda_annual: m.config.lambda_annual,
        results,
        returns,
        selections,
    };
    Ok((m, run))
}

#[derive(Debug, Serialize)]
struct ReportManifest {
    tool: String,
    version: String,
    created: String,
    dataset_sha256: String,
    runs: Vec<String>,
    tables: Vec<String>,
    skipped: Vec<String>,
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let mut manifests = Vec::new();
    let mut runs = Vec::new();
    for dir in &args.runs {
        let (m, r) = load_run(dir)?;
        manifests.push(m);
        runs.push(r);
    }
    let digests: BTreeSet<&str> = manifests.iter().map(|m| m.dataset.sha256.as_str()).collect();
    if digests.len() > 1 {
        return Err(CliError::Data(format!(
            "runs were made on different datasets ({} distinct digests)",
            digests.len()
        )));
    }
    let cards: Vec<usize> = match &args.cardinalities {
        Some(s) => parse_cardinalities(s)?,
        None => {
            let mut common: Option<BTreeSet<usize>> = None;
            for r in &runs {
                let c = r.cardinalities();
                common = Some(match common {
                    None => c,
                    Some(s) => s.intersection(&c).copied().collect(),
                });
            }
            common.unwrap_or_default().into_iter().collect()
        }
    };
    let base = args.base.clone().unwrap_or_else(|| {
        runs.iter()
            .find(|r| r.procedure == "BE-OLS(n)")
            .unwrap_or(&runs[0])
            .procedure
            .clone()
    });
    let base_run = runs.iter().find(|r| r.procedure == base).unwrap_or(&runs[0]);
    let risk_free = args
        .risk_free
        .as_ref()
        .map(|p| RiskFreeSeries::load(p))
        .transpose()?;

    let mut written = Vec::new();
    let mut skipped = Vec::new();
    let mut emit = |name: &str, t: Result<Table, AnalyticsError>| -> CliResult<()> {
        match t {
            Ok(t) => {
                let path = args.out_dir.join(name);
                write_table(&path, &t)?;
                println!("wrote {}", path.display());
                written.push(name.to_string());
            }
            Err(e) => {
                log::warn!("{name} skipped: {e}");
                skipped.push(format!("{name}: {e}"));
            }
        }
        Ok(())
    };
    emit("table1.csv", table1(&runs, &cards, args.rank_min))?;
    emit("table2.csv", table2(&runs, &cards))?;
    emit("table3.csv", table3(base_run, &cards))?;
    emit("table4.csv", table4(&runs, &base, args.rank_min))?;
    emit("sensitivity.csv", sensitivity_table(&runs, &cards, args.rank_min))?;
    emit("table7.csv", table7(&runs, &cards, risk_free.as_ref()))?;
    emit("figure_te_curves.csv", Ok(figure_te_curves(&runs)))?;
    emit("figure_enhancement.csv", Ok(figure_enhancement(&runs)))?;

    let rm = ReportManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        created: now(),
        dataset_sha256: digests.into_iter().next().unwrap_or_default().to_string(),
        runs: args.runs.iter().map(|p| p.display().to_string()).collect(),
        tables: written,
        skipped,
    };
    write_atomic(&args.out_dir.join("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &rm).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(writeln!(w)?)
    })
}

// ---------------------------------------------------------------------------
// selftest

/// Runs forward and backward OLS selection on the built-in synthetic dataset
/// and checks that the known basket is found.
pub fn selftest() -> CliResult<()> {
    let ds = synthetic();
    let floor = annualize(NOISE_SD);
    let mut failures = Vec::new();
    for tag in ["FS-OLS(n)", "BE-OLS(n)"] {
        let cfg = cardtrack::backtest::BacktestConfig {
            procedure: tag.parse().expect("valid label"),
            n_max: 10,
            cardinalities: vec![5],
            n_in: PeriodSpec::Months(36),
            n_out: PeriodSpec::Months(12),
            lambda_annual: 0.0,
            objective: Default::default(),
        };
        let out = run_backtest(&ds.panel, &ds.members, &cfg)?;
        completion_status(&out, tag)?;
        let hits: Vec<usize> = out
            .periods
            .iter()
            .filter_map(|p| p.cell(5))
            .map(|c| {
                ds.true_assets
                    .iter()
                    .filter(|a| c.portfolio.holdings.contains_key(*a))
                    .count()
            })
            .collect();
        let te = out.mean_out_sample_te().get(&5).copied().unwrap_or(f64::NAN);
        let ok = hits.iter().all(|&h| h >= 4) && te < 3.0 * floor;
        println!(
            "{} {tag}: true assets found per period {hits:?}, out-of-sample TE {te:.3} % p.a. (noise floor {floor:.3})",
            if ok { "ok  " } else { "FAIL" }
        );
        if !ok {
            failures.push(tag);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("selftest failed for {}", failures.join(", "))))
    }
}
