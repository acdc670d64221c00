//! Result emission: a machine-readable CSV, a human-readable table
//! with best-per-category markers, and per-episode JSONL traces. All
//! outputs are byte-deterministic for a given run (no timestamps, no
//! wall-clock values).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{EpisodeMetrics, ReplanRecord, StepRecord};
use crate::rng::fnv1a64;
use crate::{Error, Result, ARTIFACT_VERSION};

use super::eval::MethodRow;

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn parse_opt(s: &str, line: usize, column: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| parse_err(line, column, format!("bad float `{s}` in results csv")))
    }
}

pub const CSV_HEADER: &str =
    "label,category,episodes,mean_nll,std_nll,mean_rmse,std_rmse,mean_entropy,std_entropy";

/// Writes the summary rows as CSV.
pub fn write_results_csv(rows: &[MethodRow], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.category,
            r.episodes,
            fmt_opt(r.mean_nll),
            fmt_opt(r.std_nll),
            fmt_opt(r.mean_rmse),
            fmt_opt(r.std_rmse),
            fmt_opt(r.mean_entropy),
            fmt_opt(r.std_entropy),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the CSV back into summary rows (per-seed detail lives in the
/// traces, not the CSV).
pub fn read_results_csv(path: &Path) -> Result<Vec<MethodRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(parse_err(1, 1, format!("unexpected results header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(parse_err(lineno, 1, format!("expected 9 columns, got {}", cols.len())));
        }
        rows.push(MethodRow {
            label: cols[0].to_string(),
            category: cols[1].to_string(),
            episodes: cols[2]
                .parse()
                .map_err(|_| parse_err(lineno, 3, format!("bad episode count `{}`", cols[2])))?,
            per_seed: Vec::new(),
            mean_nll: parse_opt(cols[3], lineno, 4)?,
            std_nll: parse_opt(cols[4], lineno, 5)?,
            mean_rmse: parse_opt(cols[5], lineno, 6)?,
            std_rmse: parse_opt(cols[6], lineno, 7)?,
            mean_entropy: parse_opt(cols[7], lineno, 8)?,
            std_entropy: parse_opt(cols[8], lineno, 9)?,
        });
    }
    Ok(rows)
}

fn cell(mean: Option<f64>, std: Option<f64>, best: bool) -> String {
    let body = match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "-".to_string(),
    };
    if best {
        format!("{body} *")
    } else {
        body
    }
}

/// Index of the best (lowest-mean) row per metric within a category;
/// exactly one winner (first on ties), none when no row has the metric.
fn best_index(rows: &[&MethodRow], metric: impl Fn(&MethodRow) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = metric(r) {
            if best.map(|(b, _)| v < b).unwrap_or(true) {
                best = Some((v, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// Writes the human-readable report. Lower is better on every metric;
/// the best row per metric per category is starred.
pub fn write_report_txt(rows: &[MethodRow], config_text: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("active-tracking evaluation report\n");
    out.push_str(&format!("format-version: {ARTIFACT_VERSION}\n"));
    out.push_str(&format!("config-hash: {:016x}\n", fnv1a64(config_text.as_bytes())));
    let mut categories: Vec<&str> = Vec::new();
    for r in rows {
        if !categories.contains(&r.category.as_str()) {
            categories.push(&r.category);
        }
    }
    for cat in categories {
        let members: Vec<&MethodRow> = rows.iter().filter(|r| r.category == cat).collect();
        out.push_str(&format!("\n[{cat}]\n"));
        out.push_str(&format!(
            "{:<16} {:>3}  {:>20}  {:>20}  {:>20}\n",
            "method", "eps", "nll (mean±std)", "rmse (mean±std)", "entropy (mean±std)"
        ));
        let bn = best_index(&members, |r| r.mean_nll);
        let br = best_index(&members, |r| r.mean_rmse);
        let be = best_index(&members, |r| r.mean_entropy);
        for (i, r) in members.iter().enumerate() {
            out.push_str(&format!(
                "{:<16} {:>3}  {:>20}  {:>20}  {:>20}\n",
                r.label,
                r.episodes,
                cell(r.mean_nll, r.std_nll, bn == Some(i)),
                cell(r.mean_rmse, r.std_rmse, br == Some(i)),
                cell(r.mean_entropy, r.std_entropy, be == Some(i)),
            ));
        }
    }
    out.push_str("\n(* best in category; all metrics: lower is better)\n");
    fs::write(path, out)?;
    Ok(())
}

/// One line of an episode trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TraceLine {
    #[serde(rename = "replan")]
    Replan(ReplanRecord),
    #[serde(rename = "step")]
    Step(StepRecord),
}

fn trace_file_name(label: &str, seed: u64) -> String {
    format!("{label}-seed{seed}.jsonl")
}

/// Writes per-episode JSONL traces: each replan line is followed by
/// the step lines it governed. Returns the written paths.
pub fn write_traces(
    traces: &[(String, u64, EpisodeMetrics)],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (label, seed, m) in traces {
        let mut out = String::new();
        let mut step_iter = m.steps.iter().peekable();
        for (ri, r) in m.replans.iter().enumerate() {
            out.push_str(&serde_json::to_string(&TraceLine::Replan(r.clone())).unwrap());
            out.push('\n');
            let next_boundary = m
                .replans
                .get(ri + 1)
                .map(|n| n.step)
                .unwrap_or(u64::MAX);
            while let Some(s) = step_iter.peek() {
                if s.step > next_boundary {
                    break;
                }
                out.push_str(&serde_json::to_string(&TraceLine::Step((*s).clone())).unwrap());
                out.push('\n');
                step_iter.next();
            }
        }
        for s in step_iter {
            out.push_str(&serde_json::to_string(&TraceLine::Step(s.clone())).unwrap());
            out.push('\n');
        }
        let path = dir.join(trace_file_name(label, *seed));
        fs::write(&path, out)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a trace file back into its replan and step records.
pub fn read_trace(path: &Path) -> Result<(Vec<ReplanRecord>, Vec<StepRecord>)> {
    let text = fs::read_to_string(path)?;
    let mut replans = Vec::new();
    let mut steps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(line)
            .map_err(|e| parse_err(i + 1, 1, format!("bad trace line: {e}")))?
        {
            TraceLine::Replan(r) => replans.push(r),
            TraceLine::Step(s) => steps.push(s),
        }
    }
    Ok((replans, steps))
}
