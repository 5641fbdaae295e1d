use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::EvalResult;
use crate::error::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

/// Baseline dice in percent, keyed by model name.
pub type Baselines = BTreeMap<String, f64>;

struct Row {
    model: String,
    role: &'static str,
    dice_pct: String,
    dice_std: String,
    params: String,
    flops: String,
    baseline: String,
    delta: String,
}

fn rows(results: &[EvalResult], baselines: &Baselines) -> Vec<Row> {
    results
        .iter()
        .map(|r| {
            let pct = r.mean_dice * 100.0;
            let baseline = baselines.get(&r.model_name).copied();
            Row {
                model: r.model_name.clone(),
                role: r.role.as_str(),
                dice_pct: format!("{pct:.2}"),
                dice_std: format!("{:.4}", r.std_dice),
                params: r.params.to_string(),
                flops: r.flops.to_string(),
                baseline: baseline.map(|b| format!("{b:.2}")).unwrap_or_default(),
                // Delta of the displayed (2-decimal) values.
                delta: baseline
                    .map(|b| format!("{:+.2}", round2(pct) - round2(b)))
                    .unwrap_or_default(),
            }
        })
        .collect()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn render_report_csv(results: &[EvalResult], baselines: &Baselines) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "role",
        "dice_mean_pct",
        "dice_std",
        "params",
        "flops",
        "baseline",
        "delta_pct",
    ])?;
    for r in rows(results, baselines) {
        w.write_record([
            &r.model,
            r.role,
            &r.dice_pct,
            &r.dice_std,
            &r.params,
            &r.flops,
            &r.baseline,
            &r.delta,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fixed-width table: dice as `pct ± std`, params in millions, GFLOPs.
pub fn render_report_table(results: &[EvalResult], baselines: &Baselines) -> String {
    let header = [
        "model",
        "role",
        "dice (% ± std)",
        "params (M)",
        "FLOPs (G)",
        "baseline",
        "delta",
    ];
    let body: Vec<[String; 7]> = rows(results, baselines)
        .into_iter()
        .zip(results)
        .map(|(r, e)| {
            [
                r.model,
                r.role.to_string(),
                format!("{} ± {}", r.dice_pct, r.dice_std),
                format!("{:.4}", e.params as f64 / 1e6),
                format!("{:.4}", e.flops as f64 / 1e9),
                r.baseline,
                r.delta,
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    line(&mut out, &widths.map(|w| "-".repeat(w)));
    for row in &body {
        line(&mut out, row);
    }
    if let Some(shape) = results.first().map(|r| r.input_shape) {
        let _ = writeln!(
            out,
            "\nFLOPs = 2 x MACs at input {}x{}x{}; std on the 0-1 dice scale; delta in percentage points.",
            shape.0, shape.1, shape.2
        );
    }
    out
}

/// Writes `report.csv` and `report.txt` into `out_dir`.
pub fn emit_report(
    results: &[EvalResult],
    baselines: &Baselines,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    if results.is_empty() {
        return Err(Error::Empty("result list"));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let txt_path = dir.join(REPORT_TXT);
    fs::write(&csv_path, render_report_csv(results, baselines)?).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&txt_path, render_report_table(results, baselines)).map_err(|e| Error::io(&txt_path, e))?;
    Ok((csv_path, txt_path))
}
