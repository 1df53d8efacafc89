//! Run reports: JSON as the source of truth, CSV and plot tables as views.

use crate::bench::BenchResult;
use crate::config::ReportFormat;
use crate::engine::EngineCounters;
use crate::plugin::{DisableReason, LogRecord};
use crate::plugins::advisor::PathAdvice;
use crate::plugins::snitch::SnitchReport;
use crate::plugins::whatif::WhatIfProbe;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSummary {
    pub events: u64,
    pub app_to_net: u64,
    pub first_us: u64,
    pub last_us: u64,
    /// Virtual time at which the run stopped.
    pub end_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSummary {
    pub id: String,
    pub kind: String,
    pub permissions: Vec<String>,
    pub enabled: bool,
    pub disable_reason: Option<DisableReason>,
    pub invocations: u64,
    pub exported_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirewallSummary {
    pub id: String,
    /// Flows decided by each rule, in rule order.
    pub rule_hits: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub trace: TraceSummary,
    pub engine: EngineCounters,
    pub upstream_handles_opened: u64,
    pub plugins: Vec<PluginSummary>,
    pub snitch: Option<SnitchReport>,
    pub firewall: Option<FirewallSummary>,
    pub whatif: Vec<WhatIfProbe>,
    pub advisor: Vec<PathAdvice>,
    pub violations: Vec<LogRecord>,
    pub governor: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnyReport {
    Run(Box<RunReport>),
    Bench(BenchResult),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("not a run or bench report: {0}")]
    BadReport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn parse_report(text: &str) -> Result<AnyReport, ReportError> {
    let r: AnyReport = serde_json::from_str(text).map_err(|e| ReportError::BadReport(e.to_string()))?;
    if let AnyReport::Bench(b) = &r {
        if !b.is_consistent() {
            return Err(ReportError::BadReport("bench summary does not match its samples".into()));
        }
    }
    Ok(r)
}

pub fn load_report(path: &Path) -> Result<AnyReport, ReportError> {
    parse_report(&std::fs::read_to_string(path)?)
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Requests per organization, one row per org, most requested first.
pub fn run_csv(r: &RunReport) -> String {
    let orgs = r.snitch.as_ref().map(|s| s.orgs.as_slice()).unwrap_or_default();
    csv_string(
        &["organization", "requests", "flows"],
        orgs.iter().map(|o| vec![o.organization.clone(), o.requests.to_string(), o.flows.to_string()]),
    )
}

pub fn bench_csv(b: &BenchResult) -> String {
    csv_string(
        &["sample", "direct_connect_us", "engine_connect_us", "delta_us"],
        b.samples.iter().enumerate().map(|(i, s)| {
            vec![i.to_string(), format!("{:.3}", s.direct_connect_us), format!("{:.3}", s.engine_connect_us), format!("{:.3}", s.delta_us)]
        }),
    )
}

/// Tab-separated `x y` rows. For runs: org rank against requests, in the
/// order of the requests-per-organization chart. For benches: the CDF of
/// added connect latency.
pub fn plotdata(r: &AnyReport) -> String {
    let mut out = String::new();
    match r {
        AnyReport::Run(run) => {
            out.push_str("# requests per third-party organization\n# rank\trequests\torganization\n");
            let mut orgs: Vec<_> = run.snitch.iter().flat_map(|s| s.orgs.iter()).collect();
            // ascending so both columns rise together
            orgs.sort_by(|a, b| a.requests.cmp(&b.requests).then_with(|| b.organization.cmp(&a.organization)));
            for (i, o) in orgs.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", i + 1, o.requests, o.organization));
            }
        }
        AnyReport::Bench(b) => {
            out.push_str("# engine-added connect latency CDF\n# delta_us\tfraction\n");
            for (x, y) in b.cdf() {
                out.push_str(&format!("{x:.3}\t{y:.6}\n"));
            }
        }
    }
    out
}

pub fn format_report(r: &AnyReport, format: ReportFormat) -> String {
    match (format, r) {
        (ReportFormat::Json, AnyReport::Run(x)) => to_json(x),
        (ReportFormat::Json, AnyReport::Bench(x)) => to_json(x),
        (ReportFormat::Csv, AnyReport::Run(x)) => run_csv(x),
        (ReportFormat::Csv, AnyReport::Bench(x)) => bench_csv(x),
        (ReportFormat::Plotdata, _) => plotdata(r),
    }
}

/// File extension used when a format is written next to the JSON report.
pub fn extension(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
        ReportFormat::Plotdata => "tsv",
    }
}
