//! Report document, json/csv emitters and the comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::harness::RunOutcome;
use crate::metrics::{DeviceProfile, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub tool_version: String,
    pub config: BenchConfig,
    pub device: DeviceProfile,
    pub outcomes: Vec<RunOutcome>,
    /// Median rows per (scheme, backend, threads).
    pub aggregates: Vec<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Table => "txt",
        }
    }
}

pub fn to_json(report: &ReportDocument) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json(text: &str) -> Result<ReportDocument> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("report json: {e}")))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportDocument> {
    from_json(&fs::read_to_string(path)?)
}

/// Thread counts that get their own GFLOPS column in csv output.
fn flops_columns(report: &ReportDocument) -> Vec<usize> {
    let mut threads: Vec<usize> = report
        .aggregates
        .iter()
        .flat_map(|r| r.flops_by_threads.keys().copied())
        .chain(report.device.thread_counts.iter().copied())
        .collect();
    threads.sort_unstable();
    threads.dedup();
    threads
}

fn opt(v: Option<f64>, precision: usize) -> String {
    v.map(|x| format!("{x:.precision$}")).unwrap_or_default()
}

/// One header line plus one line per aggregate row. Skipped outcomes do not
/// appear here; they live in the json outcome list.
pub fn to_csv(report: &ReportDocument) -> Result<String> {
    let threads = flops_columns(report);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["device", "backend", "scheme", "threads"]
        .map(String::from)
        .to_vec();
    header.extend(threads.iter().map(|t| format!("gflops_t{t}")));
    header.extend(
        [
            "tok_per_s",
            "ttlm_s",
            "ttft_s",
            "tpot_s",
            "mbu",
            "mbu_flag",
            "perplexity",
            "param_bytes",
            "kv_bytes",
            "flop_count",
            "n_generated_tokens",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(csv_err)?;
    for row in sorted_rows(report) {
        let mut rec = vec![
            row.device.clone(),
            row.backend.to_string(),
            row.scheme.to_string(),
            row.threads.to_string(),
        ];
        rec.extend(threads.iter().map(|t| opt(row.flops_by_threads.get(t).copied(), 6)));
        rec.extend([
            opt(row.throughput, 6),
            format!("{:.6}", row.ttlm),
            format!("{:.6}", row.ttft),
            opt(row.tpot, 6),
            opt(row.mbu, 6),
            row.mbu_flag.clone().unwrap_or_default(),
            opt(row.perplexity, 6),
            row.param_bytes.to_string(),
            row.kv_bytes.to_string(),
            row.flop_count.to_string(),
            row.n_generated_tokens.to_string(),
        ]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn sorted_rows(report: &ReportDocument) -> Vec<&MetricsReport> {
    let mut rows: Vec<&MetricsReport> = report.aggregates.iter().collect();
    rows.sort_by(|a, b| {
        (a.scheme, a.backend, a.threads).cmp(&(b.scheme, b.backend, b.threads))
    });
    rows
}

const TABLE_HEADERS: [&str; 10] = [
    "Platform",
    "Backend",
    "Scheme",
    "GFLOPS(t4)",
    "GFLOPS(t8)",
    "Tok/S",
    "TTLM",
    "TTFT",
    "MBU",
    "PPL",
];
const TABLE_WIDTHS: [usize; 10] = [12, 11, 7, 11, 11, 9, 10, 10, 7, 9];

fn cell(v: Option<f64>, precision: usize) -> String {
    v.map(|x| format!("{x:.precision$}")).unwrap_or_else(|| "-".into())
}

/// Fixed-width comparison table, one row per aggregate, grouped by scheme.
/// Missing values render as `-`; an `*` after MBU marks a flagged value.
pub fn render_table(report: &ReportDocument) -> String {
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(TABLE_WIDTHS)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "| {} |", parts.join(" | "));
    };
    line(&mut out, &TABLE_HEADERS.map(String::from));
    let rule: Vec<String> = TABLE_WIDTHS.iter().map(|&w| "-".repeat(w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for row in sorted_rows(report) {
        let mut mbu = cell(row.mbu, 3);
        if row.mbu_flag.is_some() {
            mbu.push('*');
        }
        line(
            &mut out,
            &[
                row.device.clone(),
                format!("{}/{}", row.backend, row.threads),
                row.scheme.name().to_uppercase(),
                cell(row.flops_by_threads.get(&4).copied(), 3),
                cell(row.flops_by_threads.get(&8).copied(), 3),
                cell(row.throughput, 2),
                format!("{:.4}", row.ttlm),
                format!("{:.4}", row.ttft),
                mbu,
                cell(row.perplexity, 3),
            ],
        );
    }
    out
}

pub fn render(report: &ReportDocument, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => to_json(report),
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Table => Ok(render_table(report)),
    }
}

pub fn emit_report(report: &ReportDocument, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render(report, format)?)?;
    Ok(())
}
