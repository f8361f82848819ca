use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, Method, TrainError};
use crate::autodiff::Tape;
use crate::corpus::{Corpus, GrayImage, Split};
use crate::mask::Mask;
use crate::metrics::{aggregate, MetricReport, Summary};
use crate::models::{Binding, Heads, SegNet};

/// Sample id of the aggregate row in evaluation tables.
pub const AGGREGATE_ID: &str = "mean";

const THRESHOLD: f64 = 0.5;

/// Binary prediction from the backbone and the primary head.
pub fn predict(seg: &SegNet, image: &GrayImage) -> Result<Mask, TrainError> {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let x = tape.leaf(image.to_tensor());
    let out = seg.forward(&mut tape, &mut binding, x, Heads::Primary)?;
    let prob = tape.value(out.primary_prob.expect("primary head requested"));
    let (h, w) = image.shape();
    Ok(Mask::from_probabilities(h, w, prob.data(), THRESHOLD))
}

/// One evaluation table row. Standard deviations are only filled on the
/// aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub seed: u64,
    pub sample_id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: f64,
    pub hd95: f64,
    pub dice_std: Option<f64>,
    pub jaccard_std: Option<f64>,
    pub asd_std: Option<f64>,
    pub hd95_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub samples: Vec<(String, MetricReport)>,
    pub aggregate: [Summary; 4],
}

impl EvalReport {
    fn new(method: String, seed: u64, samples: Vec<(String, MetricReport)>) -> Self {
        let reports: Vec<MetricReport> = samples.iter().map(|(_, r)| *r).collect();
        Self {
            method,
            seed,
            aggregate: aggregate(&reports),
            samples,
        }
    }

    pub fn mean_dice(&self) -> f64 {
        self.aggregate[0].mean
    }

    pub fn mean_report(&self) -> MetricReport {
        MetricReport {
            dice: self.aggregate[0].mean,
            jaccard: self.aggregate[1].mean,
            asd: self.aggregate[2].mean,
            hd95: self.aggregate[3].mean,
        }
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        self.samples.iter().map(|(_, r)| *r).collect()
    }

    /// Per-sample rows followed by one aggregate row.
    pub fn rows(&self) -> Vec<EvalRow> {
        let mut rows: Vec<EvalRow> = self
            .samples
            .iter()
            .map(|(id, r)| EvalRow {
                method: self.method.clone(),
                seed: self.seed,
                sample_id: id.clone(),
                dice: r.dice,
                jaccard: r.jaccard,
                asd: r.asd,
                hd95: r.hd95,
                dice_std: None,
                jaccard_std: None,
                asd_std: None,
                hd95_std: None,
            })
            .collect();
        let a = &self.aggregate;
        rows.push(EvalRow {
            method: self.method.clone(),
            seed: self.seed,
            sample_id: AGGREGATE_ID.into(),
            dice: a[0].mean,
            jaccard: a[1].mean,
            asd: a[2].mean,
            hd95: a[3].mean,
            dice_std: Some(a[0].std),
            jaccard_std: Some(a[1].std),
            asd_std: Some(a[2].std),
            hd95_std: Some(a[3].std),
        });
        rows
    }
}

/// Scores externally supplied predictions against the clean masks of `split`.
pub fn evaluate_predictions(
    method: &str,
    seed: u64,
    corpus: &Corpus,
    split: Split,
    predictions: &BTreeMap<String, Mask>,
) -> Result<EvalReport, TrainError> {
    let mut samples = Vec::new();
    for s in corpus.split(split) {
        let pred = predictions
            .get(&s.id)
            .ok_or_else(|| TrainError::Mismatch(format!("no prediction for sample {}", s.id)))?;
        samples.push((s.id.clone(), MetricReport::compute(pred, &s.clean_mask)?));
    }
    Ok(EvalReport::new(method.to_string(), seed, samples))
}

fn check_compatible(ckpt: &Checkpoint, corpus: &Corpus) -> Result<(), TrainError> {
    if (ckpt.height, ckpt.width) != (corpus.height, corpus.width) {
        return Err(TrainError::Mismatch(format!(
            "trained on {}x{} images, corpus has {}x{}",
            ckpt.height, ckpt.width, corpus.height, corpus.width
        )));
    }
    if ckpt.method == Method::Uma && ckpt.num_sources != corpus.num_sources() {
        return Err(TrainError::Mismatch(format!(
            "trained with {} annotation sources, corpus has {}",
            ckpt.num_sources,
            corpus.num_sources()
        )));
    }
    ckpt.seg.config().check_input(corpus.height, corpus.width)?;
    Ok(())
}

/// Scores the primary head on the test split.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus) -> Result<EvalReport, TrainError> {
    check_compatible(ckpt, corpus)?;
    let mut preds = BTreeMap::new();
    for s in corpus.test() {
        preds.insert(s.id.clone(), predict(&ckpt.seg, &s.image)?);
    }
    evaluate_predictions(
        ckpt.method.name(),
        ckpt.config.seed,
        corpus,
        Split::Test,
        &preds,
    )
}

pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in report.rows() {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<EvalRow>, _>>()?;
    Ok(rows)
}
