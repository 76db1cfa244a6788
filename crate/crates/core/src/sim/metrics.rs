//! Round metrics as CSV (one row per round and exit) or JSON lines (one
//! object per round).
//!
//! CSV columns: `round,exit,loss,accuracy,wall_time_s,bytes,contributors_l1..contributors_lD`,
//! where `bytes` is cumulative upload volume and `contributors_lN` is the
//! number of clients whose update covered layer N.

use std::fmt::Write as _;
use std::path::Path;

use super::RoundReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        }
    }
}

impl std::str::FromStr for MetricsFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            _ => Err(Error::Config(format!("unknown metrics format `{s}` (csv or jsonl)"))),
        }
    }
}

pub fn render_csv(reports: &[RoundReport], depth: usize) -> String {
    let mut out = String::from("round,exit,loss,accuracy,wall_time_s,bytes");
    for l in 1..=depth {
        let _ = write!(out, ",contributors_l{l}");
    }
    out.push('\n');
    for r in reports {
        for m in &r.exits {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.round, m.exit, m.loss, m.accuracy, r.wall_time_s, r.bytes
            );
            for l in 0..depth {
                let _ = write!(out, ",{}", r.contributors.get(l).copied().unwrap_or(0));
            }
            out.push('\n');
        }
    }
    out
}

pub fn render_jsonl(reports: &[RoundReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

pub fn emit_metrics(
    reports: &[RoundReport],
    depth: usize,
    path: &Path,
    format: MetricsFormat,
) -> Result<()> {
    let text = match format {
        MetricsFormat::Csv => render_csv(reports, depth),
        MetricsFormat::Jsonl => render_jsonl(reports),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
