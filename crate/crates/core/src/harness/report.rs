use std::fs;
use std::path::{Path, PathBuf};

use super::eval::{read_eval_csv, AGGREGATE_ID};
use super::TrainError;
use crate::metrics::{aggregate_runs, AggregateRow, MetricReport};

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            csv_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Per-sample test reports from every evaluation table under `dir`, one entry
/// per file, labelled with the table's method. Files that are not evaluation
/// tables are skipped.
pub fn collect_runs(dir: &Path) -> Result<Vec<(String, Vec<MetricReport>)>, TrainError> {
    let mut files = Vec::new();
    csv_files(dir, &mut files)?;
    let mut runs = Vec::new();
    for f in files {
        let Ok(rows) = read_eval_csv(&f) else {
            log::debug!("skipping {}: not an evaluation table", f.display());
            continue;
        };
        let Some(first) = rows.first() else { continue };
        let method = first.method.clone();
        let reports = rows
            .iter()
            .filter(|r| r.sample_id != AGGREGATE_ID)
            .map(|r| MetricReport {
                dice: r.dice,
                jaccard: r.jaccard,
                asd: r.asd,
                hd95: r.hd95,
            })
            .collect();
        runs.push((method, reports));
    }
    Ok(runs)
}

/// Aggregate table over all evaluation tables under `dir`.
pub fn report_runs(dir: &Path) -> Result<Vec<AggregateRow>, TrainError> {
    let runs = collect_runs(dir)?;
    if runs.is_empty() {
        return Err(TrainError::Config(format!(
            "no evaluation tables found under {}",
            dir.display()
        )));
    }
    Ok(aggregate_runs(&runs))
}
