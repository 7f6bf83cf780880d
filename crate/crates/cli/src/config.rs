//! Run configuration: a TOML file whose keys can be overridden by flags.
//!
//! ```toml
//! dataset = "fixtures/synthetic"   # directory with panel.csv [+ membership.csv] or a panel file
//! layout = "canonical"             # canonical | long | public
//! procedure = "BE-OLS(n)"          # or any of direction / loss / intercept below
//! direction = "be"                 # fs | be
//! loss = "ols"                     # ols | lad
//! intercept = "n"                  # c | n
//! n_in = "3y"
//! n_out = "1y"
//! lambda_annual = 0.0              # % p.a.
//! n_max = 100
//! cardinalities = "1-100"          # or [5, 10, 20]
//! penalty_weight = 5.0
//! workers = 0                      # 0 = all cores
//! out_dir = "runs/be-ols-n"
//!
//! [sweep]
//! n_in = ["2y", "3y", "4y"]
//! n_out = ["3m", "6m", "1y"]
//! lambda_annual = [0.0]
//! ```
//!
//! Relative paths in the file are taken relative to the file itself.

use std::fs;
use std::path::{Path, PathBuf};

use cardtrack::backtest::BacktestConfig;
use cardtrack::market_data::{PanelFormat, PeriodSpec};
use cardtrack::preselect::{Direction, Loss, Procedure};
use cardtrack::weights::ObjectiveConfig;
use clap::Args;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Cardinalities {
    List(Vec<usize>),
    Spec(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n_in: Option<Vec<String>>,
    pub n_out: Option<Vec<String>>,
    pub lambda_annual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub layout: Option<String>,
    pub index_column: Option<String>,
    pub procedure: Option<String>,
    pub direction: Option<String>,
    pub loss: Option<String>,
    pub intercept: Option<String>,
    pub n_in: Option<String>,
    pub n_out: Option<String>,
    pub lambda_annual: Option<f64>,
    pub n_max: Option<usize>,
    pub cardinalities: Option<Cardinalities>,
    pub penalty_weight: Option<f64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub sweep: Option<SweepSection>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flags shared by `backtest` and `sweep`; each overrides the config key of
/// the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or panel file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset layout: canonical, long or public.
    #[arg(long)]
    pub layout: Option<String>,
    /// Estimation period, e.g. 3y, 6m or 754 observations.
    #[arg(long)]
    pub nin: Option<String>,
    /// Evaluation period.
    #[arg(long)]
    pub nout: Option<String>,
    /// fs or be.
    #[arg(long)]
    pub direction: Option<String>,
    /// ols or lad.
    #[arg(long)]
    pub loss: Option<String>,
    /// c (with intercept) or n (without).
    #[arg(long)]
    pub intercept: Option<String>,
    /// Annual index enhancement in % p.a.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_annual: Option<f64>,
    /// Largest cardinality in the selection matrix.
    #[arg(long)]
    pub nmax: Option<usize>,
    /// Cardinalities to optimize, e.g. "1-100" or "5,10,20".
    #[arg(long)]
    pub cardinalities: Option<String>,
    /// Weight of the mean-deviation penalty.
    #[arg(long)]
    pub penalty_weight: Option<f64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Everything needed to run one backtest.
#[derive(Debug, Clone)]
pub struct Settings {
    pub dataset: PathBuf,
    pub layout: PanelFormat,
    pub index_column: Option<String>,
    pub backtest: BacktestConfig,
    pub out_dir: PathBuf,
}

pub fn parse_direction(s: &str) -> CliResult<Direction> {
    match s.to_ascii_lowercase().as_str() {
        "fs" | "forward" => Ok(Direction::Forward),
        "be" | "backward" => Ok(Direction::Backward),
        _ => Err(CliError::Usage(format!("direction must be fs or be, got '{s}'"))),
    }
}

pub fn parse_loss(s: &str) -> CliResult<Loss> {
    match s.to_ascii_lowercase().as_str() {
        "ols" => Ok(Loss::Ols),
        "lad" => Ok(Loss::Lad),
        _ => Err(CliError::Usage(format!("loss must be ols or lad, got '{s}'"))),
    }
}

pub fn parse_intercept(s: &str) -> CliResult<bool> {
    match s.to_ascii_lowercase().as_str() {
        "c" => Ok(true),
        "n" => Ok(false),
        _ => Err(CliError::Usage(format!("intercept must be c or n, got '{s}'"))),
    }
}

pub fn parse_period(s: &str) -> CliResult<PeriodSpec> {
    s.parse().map_err(|e| CliError::Usage(format!("{e}")))
}

/// Parses `"1-100"`, `"1..100"` or `"5,10,20-25"`.
pub fn parse_cardinalities(s: &str) -> CliResult<Vec<usize>> {
    let bad = |part: &str| CliError::Usage(format!("bad cardinality '{part}' in '{s}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let range = part.split_once("..").or_else(|| part.split_once('-'));
        match range {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad(part))?;
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("empty cardinality list".into()));
    }
    Ok(out)
}

pub fn parse_layout(s: &str) -> CliResult<PanelFormat> {
    s.parse().map_err(CliError::from)
}

impl RunFlags {
    pub fn file_config(&self) -> CliResult<FileConfig> {
        match &self.config {
            Some(p) => FileConfig::load(p),
            None => Ok(FileConfig::default()),
        }
    }

    /// Merges defaults, the config file and flags, in increasing precedence.
    pub fn resolve(&self, file: &FileConfig) -> CliResult<Settings> {
        let mut procedure: Procedure = match &file.procedure {
            Some(p) => p
                .parse()
                .map_err(|e| CliError::Usage(format!("procedure '{p}': {e}")))?,
            None => Procedure::new(Direction::Backward, Loss::Ols, false),
        };
        if let Some(d) = self.direction.as_ref().or(file.direction.as_ref()) {
            procedure.direction = parse_direction(d)?;
        }
        if let Some(l) = self.loss.as_ref().or(file.loss.as_ref()) {
            procedure.loss = parse_loss(l)?;
        }
        if let Some(c) = self.intercept.as_ref().or(file.intercept.as_ref()) {
            procedure.intercept = parse_intercept(c)?;
        }
        let n_in = parse_period(self.nin.as_deref().or(file.n_in.as_deref()).unwrap_or("3y"))?;
        let n_out = parse_period(self.nout.as_deref().or(file.n_out.as_deref()).unwrap_or("1y"))?;
        let n_max = self.nmax.or(file.n_max).unwrap_or(100);
        let cardinalities = match (&self.cardinalities, &file.cardinalities) {
            (Some(s), _) => parse_cardinalities(s)?,
            (None, Some(Cardinalities::Spec(s))) => parse_cardinalities(s)?,
            (None, Some(Cardinalities::List(v))) => v.clone(),
            (None, None) => (1..=n_max).collect(),
        };
        let objective = ObjectiveConfig {
            penalty_weight: self.penalty_weight.or(file.penalty_weight).unwrap_or(5.0),
            ..ObjectiveConfig::default()
        };
        let backtest = BacktestConfig {
            procedure,
            n_max,
            cardinalities,
            n_in,
            n_out,
            lambda_annual: self.lambda_annual.or(file.lambda_annual).unwrap_or(0.0),
            objective,
        };
        backtest.validate()?;
        let dataset = self
            .dataset
            .clone()
            .or_else(|| file.dataset.clone())
            .ok_or_else(|| CliError::Usage("no dataset given (--dataset or config key)".into()))?;
        let layout = parse_layout(
            self.layout
                .as_deref()
                .or(file.layout.as_deref())
                .unwrap_or("canonical"),
        )?;
        Ok(Settings {
            dataset,
            layout,
            index_column: file.index_column.clone(),
            backtest,
            out_dir: self
                .out_dir
                .clone()
                .or_else(|| file.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}
