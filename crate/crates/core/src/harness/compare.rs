use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::Metrics;
use super::{HarnessError, Result};
use crate::accountant::PrivacyReport;

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub pipeline: String,
    pub init_strategy: String,
    pub block_count: usize,
    pub sparsity: f64,
    pub eval_accuracy: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub steps: u64,
    pub seed: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("metrics.json").is_file() {
            out.push(p.clone());
            continue;
        }
        let entries = std::fs::read_dir(p)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("metrics.json").is_file())
            .collect();
        if found.is_empty() {
            return Err(HarnessError::Io(format!(
                "{}: no run directories (metrics.json) found",
                p.display()
            )));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

/// Reads each run directory, or every run directory under a runs root.
pub fn compare_runs(paths: &[PathBuf]) -> Result<Vec<RunSummary>> {
    expand(paths)?
        .into_iter()
        .map(|dir| {
            let m: Metrics = read_json(&dir.join("metrics.json"))?;
            let p: PrivacyReport = read_json(&dir.join("privacy.json"))?;
            Ok(RunSummary {
                name: m.name,
                pipeline: m.pipeline,
                init_strategy: m.init_strategy,
                block_count: m.block_count,
                sparsity: m.sparsity,
                eval_accuracy: m.eval_accuracy,
                epsilon: p.total_epsilon,
                delta: p.delta,
                steps: m.steps,
                seed: m.seed,
            })
        })
        .collect()
}

/// Fixed-width text table.
pub fn format_table(rows: &[RunSummary]) -> String {
    let header = [
        "name", "pipeline", "init", "blocks", "sparsity", "accuracy", "epsilon", "steps", "seed",
    ];
    let cells: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.pipeline.clone(),
                r.init_strategy.clone(),
                r.block_count.to_string(),
                format!("{:.1}%", 100.0 * r.sparsity),
                format!("{:.4}", r.eval_accuracy),
                if r.epsilon.is_finite() {
                    format!("{:.3}", r.epsilon)
                } else {
                    "inf".into()
                },
                r.steps.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: Vec<&str>| {
        row.iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_one_line_per_row() {
        let r = RunSummary {
            name: "a".into(),
            pipeline: "dpkd".into(),
            init_strategy: "random".into(),
            block_count: 4,
            sparsity: 0.0,
            eval_accuracy: 0.5,
            epsilon: f64::INFINITY,
            delta: 1e-5,
            steps: 10,
            seed: 1,
        };
        let t = format_table(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("inf"));
    }
}
