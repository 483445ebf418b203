//! Checkpoint files: versioned structured text holding every head's
//! parameters, optimizer moments, RNG stream positions and progress
//! counters. Floats are written with 17 significant digits so loading
//! reproduces the saved state bit-for-bit.

use std::io::{BufRead, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;

use crate::autograd::{format_f64, parse_param_header_and_rows, write_arrays, ParamSet};

use super::{TrainError, TrainResult};

const HEADER: &str = "poselift-checkpoint v1";

/// Raw checkpoint contents: metadata lines, the config echo and named
/// sections of named arrays.
#[derive(Debug, Default)]
pub struct CheckpointFile {
    pub meta: IndexMap<String, String>,
    pub config_json: String,
    pub sections: IndexMap<String, IndexMap<String, Array2<f64>>>,
}

impl CheckpointFile {
    pub fn meta_u64(&self, key: &str) -> TrainResult<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Checkpoint(format!("missing or invalid meta '{key}'")))
    }

    pub fn meta_f64(&self, key: &str) -> TrainResult<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Checkpoint(format!("missing or invalid meta '{key}'")))
    }

    pub fn meta_opt_f64(&self, key: &str) -> TrainResult<Option<f64>> {
        match self.meta.get(key).map(|s| s.as_str()) {
            None | Some("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| TrainError::Checkpoint(format!("invalid meta '{key}'"))),
        }
    }

    pub fn section(&self, name: &str) -> TrainResult<&IndexMap<String, Array2<f64>>> {
        self.sections
            .get(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing section '{name}'")))
    }

    pub fn param_set(&self, name: &str) -> TrainResult<ParamSet> {
        let section = self.section(name)?;
        let mut set = ParamSet::new();
        for (k, v) in section {
            set.insert(k, v.clone())
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        }
        Ok(set)
    }
}

/// Write one checkpoint. `meta` values must be single-line strings;
/// float metadata should be formatted with [`format_f64`] by the caller
/// when exactness matters.
pub fn write_checkpoint(
    path: &Path,
    meta: &IndexMap<String, String>,
    config_json: &str,
    sections: &[(String, Vec<(String, Array2<f64>)>)],
) -> TrainResult<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(w, "{HEADER}")?;
        for (k, v) in meta {
            writeln!(w, "meta {k} {v}")?;
        }
        writeln!(w, "config {config_json}")?;
        for (name, arrays) in sections {
            writeln!(w, "section {name}")?;
            write_arrays(&mut w, arrays.iter().map(|(k, v)| (k.as_str(), v)))
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> TrainResult<CheckpointFile> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| TrainError::Checkpoint("empty checkpoint".into()))?;
    if first?.trim() != HEADER {
        return Err(TrainError::Checkpoint(format!(
            "bad header, expected '{HEADER}'"
        )));
    }

    let mut out = CheckpointFile::default();
    let mut current_section: Option<String> = None;
    while let Some((i, line)) = lines.next() {
        let line = line?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("meta ") {
            let mut parts = rest.splitn(2, ' ');
            let key = parts.next().unwrap_or_default().to_string();
            let value = parts.next().unwrap_or_default().to_string();
            out.meta.insert(key, value);
        } else if let Some(rest) = trimmed.strip_prefix("config ") {
            out.config_json = rest.to_string();
        } else if let Some(rest) = trimmed.strip_prefix("section ") {
            let name = rest.trim().to_string();
            out.sections.entry(name.clone()).or_default();
            current_section = Some(name);
        } else if trimmed.starts_with("param ") {
            let section = current_section.clone().ok_or_else(|| {
                TrainError::Checkpoint(format!("param block outside a section at line {}", i + 1))
            })?;
            let (name, arr) = parse_param_header_and_rows(trimmed, i + 1, &mut lines)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            out.sections
                .get_mut(&section)
                .expect("section created above")
                .insert(name, arr);
        } else {
            return Err(TrainError::Checkpoint(format!(
                "unrecognized line {} in checkpoint: '{trimmed}'",
                i + 1
            )));
        }
    }
    Ok(out)
}

/// Convenience: format an optional float as `none` or full precision.
pub fn format_opt_f64(v: Option<f64>) -> String {
    match v {
        None => "none".into(),
        Some(x) => format_f64(x),
    }
}
