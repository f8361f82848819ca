use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainError};
use crate::corpus::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    /// One character per available source, `1` when it was used.
    pub subset: String,
    pub seed: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: f64,
    pub hd95: f64,
}

/// Prefix subset of `count` out of `available` sources, e.g. `11000`.
pub fn subset_bitmask(count: usize, available: usize) -> String {
    (0..available)
        .map(|i| if i < count { '1' } else { '0' })
        .collect()
}

/// Trains and evaluates once per requested annotation count, using the first
/// `count` sources of the corpus each time.
pub fn run_annotation_count_sweep(
    corpus: &Corpus,
    counts: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>, TrainError> {
    let available = corpus.num_sources();
    if let Some(&bad) = counts.iter().find(|&&c| c < 2 || c > available) {
        return Err(TrainError::Config(format!(
            "annotation count {bad} outside 2..={available}"
        )));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let subset = corpus.with_source_prefix(count)?;
        let outcome = train(&subset, cfg)?;
        let m = outcome
            .record
            .final_metrics
            .ok_or_else(|| TrainError::Config("sweep corpus has no test samples".into()))?;
        log::info!("sweep count {count}: dice {:.4}", m.dice);
        rows.push(SweepRow {
            count,
            subset: subset_bitmask(count, available),
            seed: cfg.seed,
            dice: m.dice,
            jaccard: m.jaccard,
            asd: m.asd,
            hd95: m.hd95,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
