//! Plain-text summaries of run logs.

use std::fmt::Write;

use serde::Deserialize;

use super::baselines::BaselineReport;
use super::runlog::{kinds, LogRecord};
use super::{OrchestratorError, RunAbort, RunReport};

/// What a run log says about one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub global_rounds: u32,
    pub rounds_completed: usize,
    pub fl_accuracy: Option<f64>,
    pub baselines: Option<BaselineReport>,
    pub aborted: Option<RunAbort>,
    pub final_model_sha256: Option<String>,
    pub dispatched: usize,
    pub unfinished: Vec<String>,
}

impl RunSummary {
    /// Endpoint ids that did not deliver when the run aborted.
    pub fn missing_clients(&self) -> Vec<String> {
        match &self.aborted {
            Some(RunAbort::RoundTimeout { missing, .. }) => missing.clone(),
            Some(RunAbort::EndpointUnreachable { endpoint }) | Some(RunAbort::ClientFailed { endpoint, .. }) => {
                vec![endpoint.clone()]
            }
            _ => Vec::new(),
        }
    }
}

fn parse<T: for<'de> Deserialize<'de>>(record: &LogRecord) -> Result<T, OrchestratorError> {
    serde_json::from_value(record.payload.clone())
        .map_err(|e| OrchestratorError::Config(format!("bad {} record: {e}", record.kind)))
}

pub fn summarize_log(records: &[LogRecord]) -> Result<RunSummary, OrchestratorError> {
    // A run that aborts before dispatching anything has only its terminal
    // record, which carries the same name and round count.
    let header = records
        .iter()
        .find(|r| r.kind == kinds::RUN_STARTED)
        .or_else(|| {
            records
                .iter()
                .find(|r| r.kind == kinds::RUN_FINISHED || r.kind == kinds::RUN_ABORTED)
        })
        .ok_or_else(|| OrchestratorError::Config("log has no run_started record".into()))?;
    let mut summary = RunSummary {
        name: header.payload["name"].as_str().unwrap_or("experiment").to_string(),
        global_rounds: header.payload["global_rounds"].as_u64().unwrap_or(0) as u32,
        rounds_completed: records.iter().filter(|r| r.kind == kinds::ROUND_COMPLETED).count(),
        fl_accuracy: None,
        baselines: None,
        aborted: None,
        final_model_sha256: None,
        dispatched: 0,
        unfinished: Vec::new(),
    };
    let mut open = std::collections::BTreeSet::new();
    for record in records {
        match record.kind.as_str() {
            kinds::TASK_DISPATCHED => {
                summary.dispatched += 1;
                if let Some(id) = record.payload["task_id"].as_str() {
                    open.insert(id.to_string());
                }
            }
            kinds::TASK_FINISHED => {
                if let Some(id) = record.payload["task_id"].as_str() {
                    open.remove(id);
                }
            }
            kinds::RUN_FINISHED | kinds::RUN_ABORTED => {
                let report: RunReport = parse(record)?;
                summary.fl_accuracy = report.val_accuracy;
                summary.aborted = report.aborted;
                summary.final_model_sha256 = report.final_model_sha256;
            }
            kinds::BASELINES => summary.baselines = Some(parse(record)?),
            _ => {}
        }
    }
    summary.unfinished = open.into_iter().collect();
    Ok(summary)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.4}", x))
}

/// A table with one row per run: Dataset, FL, Global, LocalAvg, Local.
pub fn render_table(runs: &[RunSummary]) -> String {
    let header = ["Dataset", "FL", "Global", "LocalAvg", "Local"];
    let rows: Vec<[String; 5]> = runs
        .iter()
        .map(|r| {
            let b = r.baselines.as_ref();
            [
                r.name.clone(),
                cell(r.fl_accuracy),
                cell(b.map(|b| b.global_accuracy)),
                cell(b.map(|b| b.local_average)),
                b.map_or_else(
                    || "-".into(),
                    |b| b.local_accuracies.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" "),
                ),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).expect("write to string");
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for r in runs {
        write!(out, "\n{}: {}/{} rounds", r.name, r.rounds_completed, r.global_rounds).expect("write to string");
        if let Some(sha) = &r.final_model_sha256 {
            write!(out, ", final model sha256 {}", &sha[..16.min(sha.len())]).expect("write to string");
        }
        if let Some(abort) = &r.aborted {
            write!(out, "\n  aborted: {abort}").expect("write to string");
            let missing = r.missing_clients();
            if !missing.is_empty() {
                write!(out, "\n  missing clients: {}", missing.join(", ")).expect("write to string");
            }
        }
        if !r.unfinished.is_empty() {
            write!(out, "\n  tasks without a terminal status: {}", r.unfinished.join(", ")).expect("write to string");
        }
        out.push('\n');
    }
    out
}
