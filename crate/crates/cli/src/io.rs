use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uad_core::features::FeatureTable;
use uad_core::synthetic::LabeledFlow;
use uad_core::{Error, Flow};

use crate::config::RunConfig;
use crate::error::CliError;

pub const UNLABELED: &str = "unlabeled";

#[derive(Deserialize)]
#[serde(untagged)]
enum FlowLine {
    Labeled(LabeledFlow),
    Bare(Flow),
}

/// Reads flows written one JSON object per line, with or without labels.
pub fn read_flows(path: &Path) -> Result<Vec<LabeledFlow>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FlowLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(match parsed {
            FlowLine::Labeled(f) => f,
            FlowLine::Bare(flow) => LabeledFlow {
                flow,
                label: UNLABELED.into(),
            },
        });
    }
    Ok(out)
}

pub fn write_flows(path: &Path, flows: &[LabeledFlow]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for f in flows {
        serde_json::to_writer(&mut w, f).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

pub fn read_table(path: &Path) -> Result<FeatureTable, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(FeatureTable::read_csv(BufReader::new(file))?)
}

pub fn write_table(path: &Path, table: &FeatureTable) -> Result<(), CliError> {
    table.write_csv(create(path)?)?;
    Ok(())
}

/// Pretty JSON with object keys sorted, so equal values give equal bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v: Value = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = canonical_json(value)?;
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(Error::Schema(format!("{}: {e}", path.display()))))
}

/// `<dir>/config.json` for a directory output, `<file>.config.json` otherwise.
pub fn config_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        return output.join("config.json");
    }
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    output.with_file_name(name)
}

pub fn write_resolved_config(output: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_json(&config_path(output), cfg)
}
