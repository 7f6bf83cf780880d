//! Run directories: atomic file writes, dataset digests and the manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cardtrack::backtest::{BacktestConfig, Completeness};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const RESULTS: &str = "results.csv";
pub const RETURNS: &str = "returns.csv";
pub const HOLDINGS: &str = "holdings.csv";
pub const ERRORS: &str = "errors.csv";
pub const DELTA_DIR: &str = "delta";

pub fn delta_file(k: usize) -> String {
    format!("{DELTA_DIR}/period_{k}.csv")
}

/// Writes `path` through a temporary file in the same directory, so a failed
/// write never leaves a partial file behind.
pub fn write_atomic<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> CliResult<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    let mut f = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

/// Digest of a dataset: the file itself, or every regular file of a
/// directory in name order, each prefixed by its name.
pub fn dataset_digest(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(fs::read(&p)?);
        }
    } else {
        h.update(
            fs::read(path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?,
        );
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub layout: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub dataset: DatasetRef,
    pub procedure: String,
    pub config: BacktestConfig,
    pub periods: usize,
    pub completeness: Completeness,
    /// Output file name to sha256 of its contents.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        write_atomic(&dir.join(MANIFEST), |w| {
            serde_json::to_writer_pretty(&mut *w, self).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// Checks that the files listed still match their digests.
    pub fn verify(&self, dir: &Path) -> CliResult<()> {
        for (name, digest) in &self.files {
            if sha256_file(&dir.join(name))? != *digest {
                return Err(CliError::Data(format!(
                    "{} does not match its manifest",
                    dir.join(name).display()
                )));
            }
        }
        Ok(())
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
