use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ftest_core::dgp::DesignDistribution;
use ftest_core::mc::{RunConfig, SeedTrace};
use serde::{Deserialize, Serialize};

use crate::config::{Format, OracleSettings};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    File::create(&probe)
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes `rows` to `<dir>/<stem>.<csv|json>` and returns the file name.
pub fn write_rows<T: Serialize>(dir: &Path, stem: &str, rows: &[T], format: Format) -> Result<String, CliError> {
    let name = format!("{stem}.{}", format.extension());
    let path = dir.join(&name);
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
            for row in rows {
                w.serialize(row).map_err(|e| io_err(&path, e))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
        }
        Format::Json => write_json(&path, rows)?,
    }
    Ok(name)
}

/// Writes a table with explicit header and string cells.
pub fn write_table(
    dir: &Path,
    stem: &str,
    header: &[String],
    rows: &[Vec<String>],
    format: Format,
) -> Result<String, CliError> {
    let name = format!("{stem}.{}", format.extension());
    let path = dir.join(&name);
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
            w.write_record(header).map_err(|e| io_err(&path, e))?;
            for row in rows {
                w.write_record(row).map_err(|e| io_err(&path, e))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
        }
        Format::Json => {
            let objects: Vec<serde_json::Map<String, serde_json::Value>> = rows
                .iter()
                .map(|row| {
                    header
                        .iter()
                        .zip(row)
                        .map(|(h, v)| {
                            let value = v
                                .parse::<f64>()
                                .ok()
                                .and_then(serde_json::Number::from_f64)
                                .map_or_else(|| serde_json::Value::String(v.clone()), serde_json::Value::Number);
                            (h.clone(), value)
                        })
                        .collect()
                })
                .collect();
            write_json(&path, &objects)?;
        }
    }
    Ok(name)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeed {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<SeedTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub snr: Vec<f64>,
    pub oracle: Option<OracleSettings>,
    pub format: Format,
    pub cells: Vec<CellSeed>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST);
        write_json(&path, self)?;
        Ok(path)
    }
}
