use std::path::Path;

use crate::closed_loop::EstimatorKind;
use crate::{Error, Result};

use super::study::StudySummary;

pub fn read_summary(path: &Path) -> Result<StudySummary> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

/// Aligned text table, one row per summary.
pub fn comparison_table(rows: &[(String, StudySummary)]) -> String {
    let header = [
        "run", "preset", "mu", "trials", "done", "mse_ekf", "mse_rs", "mse_%", "med_mse_%", "cost_ekf", "cost_rs",
        "cost_%",
    ];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, s) in rows {
        let get = |k: EstimatorKind, f: fn(&super::study::EstimatorAggregate) -> Option<f64>| {
            s.aggregate(k).and_then(f)
        };
        table.push(vec![
            name.clone(),
            s.preset.to_string(),
            format!("{:e}", s.mu),
            s.trials.to_string(),
            s.completed.to_string(),
            cell(get(EstimatorKind::Ekf, |a| a.mse_mean)),
            cell(get(EstimatorKind::RsEkf, |a| a.mse_mean)),
            pct(s.mse_improvement_pct),
            pct(s.median_mse_improvement_pct),
            cell(get(EstimatorKind::Ekf, |a| a.avg_cost_mean)),
            cell(get(EstimatorKind::RsEkf, |a| a.avg_cost_mean)),
            pct(s.cost_improvement_pct),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    table
        .iter()
        .map(|r| {
            r.iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn compare(paths: &[impl AsRef<Path>]) -> Result<String> {
    let rows = paths
        .iter()
        .map(|p| Ok((p.as_ref().display().to_string(), read_summary(p.as_ref())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(comparison_table(&rows))
}
