//! Report aggregation: turn attack reports into the schemes-by-metrics
//! matrix, with per-row extremes marked and relative-to-black-box rows.

use anyhow::{Context, Result};
use std::path::Path;
use tsdp_core::attacks::AttackReport;
use tsdp_core::sweetspot::SweepResult;

/// Accepts a single report, a report array, or a whole sweep result.
pub fn load_reports(path: &Path) -> Result<Vec<AttackReport>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    if let Ok(r) = serde_json::from_str::<AttackReport>(&text) {
        return Ok(vec![r]);
    }
    if let Ok(v) = serde_json::from_str::<Vec<AttackReport>>(&text) {
        return Ok(v);
    }
    if let Ok(s) = serde_json::from_str::<SweepResult>(&text) {
        return Ok(s.cells.into_iter().flat_map(|c| c.reports).collect());
    }
    anyhow::bail!(
        "{}: neither an attack report, a report array, nor a sweep result",
        path.display()
    )
}

const METRICS: [(&str, fn(&AttackReport) -> f64); 8] = [
    ("ms_accuracy", |r| r.ms_accuracy),
    ("fidelity", |r| r.fidelity),
    ("asr", |r| r.asr),
    ("conf_mia_acc", |r| r.conf_mia_acc),
    ("grad_mia_acc", |r| r.grad_mia_acc),
    ("generalization_gap", |r| r.generalization_gap),
    ("confidence_gap", |r| r.confidence_gap),
    ("pct_flops_tee", |r| r.utility.pct_flops_tee),
];

/// The five attack-strength metrics that get a relative-to-black-box row.
const RELATIVE: [&str; 5] = [
    "ms_accuracy",
    "fidelity",
    "asr",
    "conf_mia_acc",
    "grad_mia_acc",
];

pub struct Rendered {
    pub text: String,
    pub csv: String,
}

/// One column per scheme/config pair, in first-seen order; cell = seed mean.
pub fn render_matrix(reports: &[AttackReport]) -> Rendered {
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        let key = column_key(r);
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let means = |metric: fn(&AttackReport) -> f64| -> Vec<f64> {
        columns
            .iter()
            .map(|col| {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter(|r| column_key(r) == *col)
                    .map(metric)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    };
    let black = columns.iter().position(|c| c == "blackbox");

    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, f) in METRICS {
        rows.push((name.to_string(), means(f)));
    }
    if let Some(bi) = black {
        for (name, f) in METRICS {
            if RELATIVE.contains(&name) {
                let vals = means(f);
                let base = vals[bi];
                let rel: Vec<f64> = vals
                    .iter()
                    .map(|v| if base.abs() < 1e-12 { f64::NAN } else { v / base })
                    .collect();
                rows.push((format!("{name}/blackbox"), rel));
            }
        }
    }

    // Plain-text table with the row minimum marked `*` and maximum `^`.
    let width = columns.iter().map(|c| c.len()).max().unwrap_or(8).max(9);
    let label_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6);
    let mut text = format!("{:label_w$}", "metric");
    for c in &columns {
        text.push_str(&format!("  {c:>width$}"));
    }
    let mut csv = String::from("metric");
    for c in &columns {
        csv.push(',');
        csv.push_str(c);
    }
    for (name, vals) in &rows {
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        text.push('\n');
        text.push_str(&format!("{name:label_w$}"));
        csv.push('\n');
        csv.push_str(name);
        for v in vals {
            let mark = if !v.is_finite() || lo == hi {
                ' '
            } else if *v == lo {
                '*'
            } else if *v == hi {
                '^'
            } else {
                ' '
            };
            text.push_str(&format!("  {:>w$.4}{mark}", v, w = width - 1));
            csv.push_str(&format!(",{v:.6}"));
        }
    }
    text.push_str("\n(* row minimum, ^ row maximum; cells are seed means)");
    csv.push('\n');
    Rendered { text, csv }
}

fn column_key(r: &AttackReport) -> String {
    let cfg = r.config.label();
    if cfg == "-" {
        r.scheme.label().to_string()
    } else {
        format!("{}:{}", r.scheme.label(), cfg)
    }
}
