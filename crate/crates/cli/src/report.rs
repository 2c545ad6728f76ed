//! Side-by-side rendering of evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write;

use o1loom_core::metrics::{format_improvement, improvement_pct};
use o1loom_core::{EvalReport, MetricId};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub metrics: Vec<MetricId>,
    /// `values[run][metric]`.
    pub values: Vec<Vec<f64>>,
}

pub fn compare(reports: &[(String, EvalReport)]) -> Result<Comparison, CliError> {
    let Some((first_name, first)) = reports.first() else {
        return Err(CliError::usage("report needs at least one run"));
    };
    let metrics: Vec<MetricId> = first.aggregate.keys().copied().collect();
    for (name, r) in &reports[1..] {
        let other: Vec<MetricId> = r.aggregate.keys().copied().collect();
        if other != metrics {
            return Err(CliError::usage(format!(
                "metric sets differ: {first_name} has {}, {name} has {}",
                names(&metrics),
                names(&other)
            )));
        }
    }
    Ok(Comparison {
        runs: reports.iter().map(|(n, _)| n.clone()).collect(),
        values: reports.iter().map(|(_, r)| metrics.iter().map(|m| r.aggregate[m]).collect()).collect(),
        metrics,
    })
}

fn names(metrics: &[MetricId]) -> String {
    metrics.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")
}

/// Aligned text table; rows are metrics, one value column per run and one
/// delta column per run after the first.
pub fn render_table(c: &Comparison) -> String {
    let mut header = vec!["metric".to_owned()];
    header.extend(c.runs.iter().cloned());
    header.extend(c.runs.iter().skip(1).map(|r| format!("\u{394} {r}")));
    let mut rows = vec![header];
    for (j, m) in c.metrics.iter().enumerate() {
        let mut row = vec![m.as_str().to_owned()];
        row.extend(c.values.iter().map(|v| format!("{:.4}", v[j])));
        let base = c.values[0][j];
        row.extend(c.values.iter().skip(1).map(|v| format_improvement(improvement_pct(v[j], base))));
        rows.push(row);
    }
    align(&rows)
}

pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|i| rows.iter().filter_map(|r| r.get(i)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (n, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pad = widths[i] - s.chars().count();
                if i == 0 { format!("{s}{}", " ".repeat(pad)) } else { format!("{}{s}", " ".repeat(pad)) }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if n == 0 {
            let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Values are written with shortest round-trip formatting; deltas are
/// plain percentages, empty when undefined.
pub fn render_csv(c: &Comparison) -> String {
    let mut out = String::new();
    let mut header = vec!["metric".to_owned()];
    header.extend(c.runs.iter().map(|r| csv_field(r)));
    header.extend(c.runs.iter().skip(1).map(|r| csv_field(&format!("delta_pct {r}"))));
    out.push_str(&header.join(","));
    out.push('\n');
    for (j, m) in c.metrics.iter().enumerate() {
        let mut row = vec![m.as_str().to_owned()];
        row.extend(c.values.iter().map(|v| format!("{:?}", v[j])));
        let base = c.values[0][j];
        row.extend(
            c.values.iter().skip(1).map(|v| improvement_pct(v[j], base).map(|d| format!("{d:?}")).unwrap_or_default()),
        );
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Reads the value columns of [`render_csv`] output back.
pub fn parse_csv_values(text: &str, runs: usize) -> Result<BTreeMap<String, Vec<f64>>, String> {
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 1 + runs {
            return Err(format!("short row {line:?}"));
        }
        let values = fields[1..=runs].iter().map(|f| f.parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
        out.insert(fields[0].to_owned(), values);
    }
    Ok(out)
}
