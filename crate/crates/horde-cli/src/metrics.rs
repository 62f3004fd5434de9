//! JSON-lines metrics log: one record per step or eval event.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Seconds since the run started. The only nondeterministic field;
    /// determinism comparisons strip it.
    pub wall_time: f64,
    pub event: String,
    pub loss_total: f64,
    pub loss_dml: f64,
    pub loss_orders: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at: Option<BTreeMap<usize, f64>>,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics log and drop the wall-time field from every record, for
/// bitwise determinism comparisons across runs.
pub fn read_without_wall_time(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value = serde_json::from_str(line)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("wall_time");
        }
        records.push(value);
    }
    Ok(records)
}
