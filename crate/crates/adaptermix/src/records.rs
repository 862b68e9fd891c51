//! Line-delimited loss histories and comparison reports.

use std::fmt::Write as _;
use std::path::Path;

use adaptermix_core::evaluation::ComparisonReport;
use adaptermix_core::training::LossRecord;
use serde::Serialize;

use crate::checkpoint::write_file;
use crate::Result;

pub fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        let _ = writeln!(out, "{}", serde_json::to_string(item).expect("record serializes"));
    }
    out
}

pub fn save_history(history: &[LossRecord], path: &Path) -> Result<()> {
    write_file(path, jsonl(history).as_bytes())
}

pub fn report_jsonl(report: &ComparisonReport) -> String {
    jsonl(&report.rows)
}

pub fn save_report(report: &ComparisonReport, jsonl_path: &Path, table_path: Option<&Path>) -> Result<()> {
    write_file(jsonl_path, report_jsonl(report).as_bytes())?;
    if let Some(p) = table_path {
        write_file(p, report.to_table().as_bytes())?;
    }
    Ok(())
}
