use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use super::{Algorithm, EvalError, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" | "markdown_table" => Ok(ReportFormat::Markdown),
            other => Err(EvalError::Spec(format!("unknown report format {other}"))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension, csv by default.
    pub fn from_path(path: &str) -> Self {
        match path.rsplit('.').next() {
            Some("json") => ReportFormat::Json,
            Some("md") => ReportFormat::Markdown,
            _ => ReportFormat::Csv,
        }
    }
}

pub fn report(rows: &[MetricsRow], format: ReportFormat) -> Result<Vec<u8>, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| EvalError::Spec(e.to_string()))?;
            }
            w.into_inner().map_err(|e| EvalError::Spec(e.to_string()))
        }
        ReportFormat::Json => Ok(serde_json::to_vec_pretty(rows).expect("rows serialize")),
        ReportFormat::Markdown => Ok(markdown(rows).into_bytes()),
    }
}

type Key = (Algorithm, String);

fn mean_by<F: Fn(&MetricsRow) -> f64>(rows: &[MetricsRow], f: F) -> BTreeMap<(Key, u32), f64> {
    let mut acc: BTreeMap<(Key, u32), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry(((r.algorithm, r.service.clone()), r.concurrency))
            .or_insert((0.0, 0));
        e.0 += f(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn table(out: &mut String, title: &str, rows: &[MetricsRow], keep: impl Fn(Algorithm) -> bool, f: impl Fn(&MetricsRow) -> f64, digits: usize) {
    let rows: Vec<MetricsRow> = rows.iter().filter(|r| keep(r.algorithm)).cloned().collect();
    let _ = writeln!(out, "\n### {title}\n");
    if rows.is_empty() {
        let _ = writeln!(out, "_no rows_");
        return;
    }
    let levels: BTreeSet<u32> = rows.iter().map(|r| r.concurrency).collect();
    let keys: BTreeSet<Key> = rows.iter().map(|r| (r.algorithm, r.service.clone())).collect();
    let cells = mean_by(&rows, f);
    let _ = write!(out, "| algorithm | service |");
    for l in &levels {
        let _ = write!(out, " {l} |");
    }
    let _ = write!(out, "\n|---|---|");
    for _ in &levels {
        let _ = write!(out, "---|");
    }
    out.push('\n');
    for k in &keys {
        let _ = write!(out, "| {} | {} |", k.0, k.1);
        for l in &levels {
            match cells.get(&(k.clone(), *l)) {
                Some(v) => {
                    let _ = write!(out, " {v:.digits$} |");
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
}

fn markdown(rows: &[MetricsRow]) -> String {
    let is_ct = |a: Algorithm| matches!(a, Algorithm::Crosstrace);
    let mut out = String::from("# Benchmark report\n\nCells are means over seeds; columns are concurrency levels.\n");
    out.push_str("\n## fig7\n");
    table(&mut out, "span accuracy", rows, |a| a != Algorithm::CrosstraceMulti, |r| r.span_accuracy, 3);
    table(&mut out, "trace accuracy", rows, |a| a != Algorithm::CrosstraceMulti, |r| r.trace_accuracy, 3);
    out.push_str("\n## fig8\n");
    table(&mut out, "wrong with lower true PDS", rows, is_ct, |r| r.wrong_with_lower_true_pds_fraction, 3);
    table(&mut out, "ambiguity at 10% of P90", rows, is_ct, |r| r.ambiguity_ratio_10pct, 3);
    table(&mut out, "ambiguity at 15% of P90", rows, is_ct, |r| r.ambiguity_ratio_15pct, 3);
    out.push_str("\n## fig9\n");
    table(&mut out, "candidate finding (ms)", rows, |_| true, |r| r.candidate_find_ms, 1);
    table(&mut out, "correlation (ms)", rows, |_| true, |r| r.correlate_ms, 1);
    table(&mut out, "candidates per ingress", rows, is_ct, |r| r.candidates_per_ingress_mean, 2);
    out.push_str("\n## fig11\n");
    let multi = |a: Algorithm| matches!(a, Algorithm::Crosstrace | Algorithm::CrosstraceMulti);
    table(&mut out, "span accuracy", rows, multi, |r| r.span_accuracy, 3);
    table(&mut out, "span overhead rate", rows, multi, |r| r.span_overhead_rate, 3);
    out
}
