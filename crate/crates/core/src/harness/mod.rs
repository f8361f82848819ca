//! Training, evaluation and experiment orchestration.
//!
//! Two methods share the same segmentation backbone:
//!
//! * [`Method::Uma`] trains the backbone jointly with the uncertainty
//!   estimator. Each visited sample is scored by the quality gate and its loss
//!   is applied to the primary head (high quality) or the auxiliary head (low
//!   quality). Routing is disabled during warm-up.
//! * [`Method::MajorityVote`] trains the primary head alone on the fused
//!   majority-vote mask with cross entropy plus Dice.
//!
//! Evaluation only runs the backbone and the primary head.

mod adam;
mod checkpoint;
mod eval;
mod gradcheck;
mod report;
mod sweep;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use eval::{
    evaluate, evaluate_predictions, predict, read_eval_csv, write_eval_csv, EvalReport, EvalRow,
    AGGREGATE_ID,
};
pub use gradcheck::{check_model_gradients, GradCheckCase, GradCheckReport, Objective};
pub use report::{collect_runs, report_runs};
pub use sweep::{run_annotation_count_sweep, subset_bitmask, write_sweep_csv, SweepRow};
pub use train::{
    lr_at_epoch, train, train_baseline_mv, warmup_epochs, write_epoch_log, write_routing_log,
    RouteLogEntry, StepStats, TrainOutcome, UmaTrainer,
};

use crate::corpus::CorpusError;
use crate::losses::LossError;
use crate::mask::MaskError;
use crate::metrics::MetricReport;
use crate::models::{ModelError, SegBackboneConfig};
use crate::qam::QamError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{param}` at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("gradient for `{param}` has shape {found:?}, expected {expected:?}")]
    GradientShape {
        param: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("training diverged at epoch {epoch}, sample {sample_id}: {reason}")]
    Diverged {
        epoch: usize,
        sample_id: String,
        reason: String,
        /// Model state before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error("checkpoint does not match the corpus: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Qam(#[from] QamError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "uma")]
    Uma,
    #[serde(rename = "mv-baseline")]
    MajorityVote,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Uma => "uma",
            Method::MajorityVote => "mv-baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uma" => Ok(Method::Uma),
            "mv-baseline" | "mv" => Ok(Method::MajorityVote),
            other => Err(TrainError::Config(format!(
                "unknown method {other:?} (expected uma or mv-baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub lambda: f64,
    /// Plateau of the consistency-weight ramp.
    pub alpha_max: f64,
    /// Fraction of epochs, from the start, with routing disabled.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Route low-quality samples to the auxiliary head after warm-up.
    pub routing: bool,
    /// Include the consistency term; when off its weight is zero throughout.
    pub consistency: bool,
    pub seg: SegBackboneConfig,
    pub auem_width: usize,
    pub auem_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1,
            lr0: 1e-3,
            lr_decay: 0.96,
            tau_a: 0.2,
            tau_b: 0.2,
            lambda: 1.0,
            alpha_max: 1.0,
            warmup_fraction: 0.2,
            seed: 0,
            routing: true,
            consistency: true,
            seg: SegBackboneConfig::default(),
            auem_width: 8,
            auem_depth: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(self.lambda >= 0.0 && self.alpha_max >= 0.0) {
            return fail("lambda and alpha_max must be nonnegative".into());
        }
        crate::qam::Thresholds {
            tau_a: self.tau_a,
            tau_b: self.tau_b,
        }
        .validate()?;
        self.seg.validate()?;
        Ok(())
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Consistency weight at the last step of the epoch.
    pub alpha: f64,
    pub mean_total: f64,
    pub mean_weighted_ce: f64,
    pub mean_weighted_dice: f64,
    pub mean_consistency: f64,
    /// Share of visits routed to the auxiliary head; 0 during warm-up.
    pub low_quality_fraction: f64,
    pub routing_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub routing_log: Vec<RouteLogEntry>,
    /// Test-set means from the primary head; `None` without test samples.
    pub final_metrics: Option<MetricReport>,
}

#[cfg(test)]
mod tests;
