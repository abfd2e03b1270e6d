//! Result-table output: CSV rows plus a JSON sidecar carrying the exact
//! configuration and library version. No timestamps, so identical runs
//! produce identical bytes.

use std::path::Path;

use robust_ope::error::{OpeError, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub fn write_csv<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| OpeError::Internal(format!("csv serialization: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| OpeError::Internal(format!("csv flush: {e}")))?;
    std::fs::write(path, bytes).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a ExperimentConfig,
    version: &'static str,
    notes: Vec<&'static str>,
}

/// Writes `<table>.json` next to a table at `<table>.csv`.
pub fn write_sidecar(cfg: &ExperimentConfig, csv_path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        config: cfg,
        version: env!("CARGO_PKG_VERSION"),
        notes: vec![
            "initial distributions are fixed by this crate: uniform over all machine states, uniform over live patient states",
            "repair rows at the repair states mirror the do-nothing rows",
            "interval corrections use the plug-in transition matrix",
        ],
    };
    let path = csv_path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| OpeError::Internal(format!("sidecar serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })
}
