use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{check_gradients, Adam, AdamConfig};
use super::eval::evaluate;
use super::{Checkpoint, EpochRecord, Method, RunRecord, TrainConfig, TrainError};
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::corpus::{derive_seed, majority_vote, Corpus, Sample};
use crate::losses::{fused_target_loss, total_loss, CalibrationSet, LossError, LossWeights};
use crate::models::{Auem, AuemConfig, Binding, Heads, ModelError, ParamGrads, SegNet};
use crate::qam::{route_sample, QualityVerdict, Route, Thresholds};

const PURPOSE_SEG_INIT: u64 = 101;
const PURPOSE_AUEM_INIT: u64 = 102;
const PURPOSE_SHUFFLE: u64 = 103;

/// `lr0 · decay^epoch`, by repeated multiplication. `powi` may round
/// differently when the compiler folds it, which would make the value depend
/// on the call site.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    (0..epoch).fold(cfg.lr0, |lr, _| lr * cfg.lr_decay)
}

/// Number of leading epochs with routing disabled.
pub fn warmup_epochs(cfg: &TrainConfig) -> usize {
    ((cfg.warmup_fraction * cfg.epochs as f64) - 1e-9)
        .ceil()
        .max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteLogEntry {
    pub epoch: usize,
    pub sample_id: String,
    pub u_a: f64,
    pub u_b: f64,
    pub route: Route,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub weighted_ce: f64,
    pub weighted_dice: f64,
    pub consistency: f64,
    pub alpha: f64,
    pub route: Route,
    /// `None` while routing is disabled.
    pub verdict: Option<QualityVerdict>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
}

fn train_order(corpus: &Corpus) -> Vec<&Sample> {
    corpus.train().collect()
}

fn check_corpus(corpus: &Corpus, cfg: &TrainConfig) -> Result<(), TrainError> {
    if corpus.train().next().is_none() {
        return Err(TrainError::Config("corpus has no training samples".into()));
    }
    cfg.seg.check_input(corpus.height, corpus.width)?;
    Ok(())
}

fn shuffled<'a>(samples: &[&'a Sample], seed: u64, epoch: usize) -> Vec<&'a Sample> {
    let mut order = samples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PURPOSE_SHUFFLE, epoch as u64, 0));
    order.shuffle(&mut rng);
    order
}

/// Joint trainer for the backbone, both heads and the uncertainty estimator.
#[derive(Debug, Clone)]
pub struct UmaTrainer {
    cfg: TrainConfig,
    seg: SegNet,
    auem: Auem,
    seg_opt: Adam,
    auem_opt: Adam,
}

impl UmaTrainer {
    pub fn new(cfg: TrainConfig, num_sources: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let seg = SegNet::new(cfg.seg, derive_seed(cfg.seed, PURPOSE_SEG_INIT, 0, 0))?;
        let auem_cfg = AuemConfig {
            num_sources,
            base_width: cfg.auem_width,
            depth: cfg.auem_depth,
        };
        let auem = Auem::new(auem_cfg, derive_seed(cfg.seed, PURPOSE_AUEM_INIT, 0, 0))?;
        Ok(Self {
            cfg,
            seg,
            auem,
            seg_opt: Adam::new(AdamConfig::default()),
            auem_opt: Adam::new(AdamConfig::default()),
        })
    }

    pub fn seg(&self) -> &SegNet {
        &self.seg
    }

    pub fn auem(&self) -> &Auem {
        &self.auem
    }

    #[cfg(test)]
    pub(crate) fn seg_mut(&mut self) -> &mut SegNet {
        &mut self.seg
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.cfg.lambda,
            alpha_max: if self.cfg.consistency {
                self.cfg.alpha_max
            } else {
                0.0
            },
        }
    }

    /// Forward and backward pass for one sample without updating anything.
    pub fn sample_gradients(
        &self,
        sample: &Sample,
        step_fraction: f64,
        routing: bool,
    ) -> Result<(ParamGrads, ParamGrads, StepStats), TrainError> {
        let mut tape = Tape::new();
        let mut seg_binding = Binding::new();
        let mut auem_binding = Binding::new();
        let ann = sample.annotation_tensor();
        let x = tape.leaf(sample.image.to_tensor());
        let y = tape.leaf(ann.clone());
        let sigma = self.auem.forward(&mut tape, &mut auem_binding, x, y)?;
        let verdict = if routing {
            let calib = CalibrationSet::from_uncertainty(&ann, tape.value(sigma))?;
            let thresholds = Thresholds {
                tau_a: self.cfg.tau_a,
                tau_b: self.cfg.tau_b,
            };
            Some(route_sample(&calib, thresholds)?)
        } else {
            None
        };
        let route = verdict.map_or(Route::HighQuality, |v| v.route);
        let heads = match route {
            Route::HighQuality => Heads::Primary,
            Route::LowQuality => Heads::Auxiliary,
        };
        let out = self.seg.forward(&mut tape, &mut seg_binding, x, heads)?;
        let pred = out
            .primary_prob
            .or(out.auxiliary_prob)
            .expect("one head requested");
        let terms = total_loss(&mut tape, pred, y, sigma, &self.weights(), step_fraction)?;
        let stats = StepStats {
            total: tape.value(terms.total).item(),
            weighted_ce: tape.value(terms.weighted_ce).item(),
            weighted_dice: tape.value(terms.weighted_dice).item(),
            consistency: tape.value(terms.consistency).item(),
            alpha: terms.alpha,
            route,
            verdict,
        };
        let grads = tape.backward(terms.total).map_err(LossError::from)?;
        Ok((
            seg_binding.gradients(self.seg.params(), &grads),
            auem_binding.gradients(self.auem.params(), &grads),
            stats,
        ))
    }

    fn checkpoint(&self, epochs_completed: usize, height: usize, width: usize) -> Checkpoint {
        Checkpoint {
            method: Method::Uma,
            config: self.cfg,
            num_sources: self.auem.config().num_sources,
            height,
            width,
            epochs_completed,
            seg: self.seg.clone(),
            auem: Some(self.auem.clone()),
        }
    }

    /// One optimizer step over `batch`; samples' gradients are averaged.
    pub fn step(
        &mut self,
        batch: &[&Sample],
        step_fraction: f64,
        routing: bool,
        lr: f64,
        epoch: usize,
    ) -> Result<Vec<StepStats>, TrainError> {
        let mut seg_acc: Option<ParamGrads> = None;
        let mut auem_acc: Option<ParamGrads> = None;
        let mut stats = Vec::with_capacity(batch.len());
        for sample in batch {
            let diverged = |reason: String, me: &Self| TrainError::Diverged {
                epoch,
                sample_id: sample.id.clone(),
                reason,
                last_good: Box::new(me.checkpoint(
                    epoch,
                    sample.image.shape().0,
                    sample.image.shape().1,
                )),
            };
            let (gs, ga, s) = match self.sample_gradients(sample, step_fraction, routing) {
                Ok(v) => v,
                Err(e) if is_numeric_failure(&e) => return Err(diverged(e.to_string(), self)),
                Err(e) => return Err(e),
            };
            if !s.total.is_finite() {
                return Err(diverged(format!("loss is {}", s.total), self));
            }
            stats.push(s);
            match &mut seg_acc {
                Some(acc) => acc.accumulate(&gs),
                None => seg_acc = Some(gs),
            }
            match &mut auem_acc {
                Some(acc) => acc.accumulate(&ga),
                None => auem_acc = Some(ga),
            }
        }
        let (Some(mut gs), Some(mut ga)) = (seg_acc, auem_acc) else {
            return Ok(stats);
        };
        if batch.len() > 1 {
            gs.scale(1.0 / batch.len() as f64);
            ga.scale(1.0 / batch.len() as f64);
        }
        let checked = check_gradients(self.seg.params(), &gs)
            .and_then(|_| check_gradients(self.auem.params(), &ga));
        if let Err(e) = checked {
            let s = batch[0];
            return Err(TrainError::Diverged {
                epoch,
                sample_id: s.id.clone(),
                reason: e.to_string(),
                last_good: Box::new(self.checkpoint(epoch, s.image.shape().0, s.image.shape().1)),
            });
        }
        self.seg_opt.step(self.seg.params_mut(), &gs, lr)?;
        self.auem_opt.step(self.auem.params_mut(), &ga, lr)?;
        Ok(stats)
    }
}

/// Errors caused by non-finite values reaching a guarded operation.
fn is_numeric_failure(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Loss(LossError::Autodiff(AutodiffError::Domain { .. }))
            | TrainError::Model(ModelError::Autodiff(AutodiffError::Domain { .. }))
    )
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    wce: f64,
    wdice: f64,
    consistency: f64,
    low: usize,
    n: usize,
    alpha: f64,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepStats) {
        self.total += s.total;
        self.wce += s.weighted_ce;
        self.wdice += s.weighted_dice;
        self.consistency += s.consistency;
        self.low += usize::from(s.route == Route::LowQuality);
        self.n += 1;
        self.alpha = s.alpha;
    }

    fn finish(&self, epoch: usize, lr: f64, routing_active: bool) -> EpochRecord {
        let n = self.n.max(1) as f64;
        EpochRecord {
            epoch,
            lr,
            alpha: self.alpha,
            mean_total: self.total / n,
            mean_weighted_ce: self.wce / n,
            mean_weighted_dice: self.wdice / n,
            mean_consistency: self.consistency / n,
            low_quality_fraction: self.low as f64 / n,
            routing_active,
        }
    }
}

fn step_fraction(step: usize, total: usize) -> f64 {
    if total <= 1 {
        1.0
    } else {
        (step as f64 / (total - 1) as f64).min(1.0)
    }
}

fn final_metrics(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
) -> Result<Option<crate::metrics::MetricReport>, TrainError> {
    if corpus.test().next().is_none() {
        return Ok(None);
    }
    Ok(Some(evaluate(checkpoint, corpus)?.mean_report()))
}

/// Trains the full model on the training split and evaluates the primary head
/// on the test split.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    check_corpus(corpus, cfg)?;
    let mut trainer = UmaTrainer::new(*cfg, corpus.num_sources())?;
    let samples = train_order(corpus);
    let warmup = warmup_epochs(cfg);
    let total_steps = cfg.epochs * samples.len();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut routing_log = Vec::new();
    let mut visited = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let routing = cfg.routing && epoch >= warmup;
        let order = shuffled(&samples, cfg.seed, epoch);
        let mut acc = EpochAccumulator::default();
        for batch in order.chunks(cfg.batch_size) {
            let t = step_fraction(visited, total_steps);
            let stats = trainer.step(batch, t, routing, lr, epoch)?;
            for (sample, s) in batch.iter().zip(&stats) {
                acc.add(s);
                if let Some(v) = s.verdict {
                    routing_log.push(RouteLogEntry {
                        epoch,
                        sample_id: sample.id.clone(),
                        u_a: v.u_a,
                        u_b: v.u_b,
                        route: v.route,
                    });
                }
            }
            visited += batch.len();
        }
        let rec = acc.finish(epoch, lr, routing);
        log::info!(
            "uma epoch {epoch}: loss {:.4} low-quality {:.3} lr {:.2e}",
            rec.mean_total,
            rec.low_quality_fraction,
            lr
        );
        epochs.push(rec);
    }
    let checkpoint = trainer.checkpoint(cfg.epochs, corpus.height, corpus.width);
    let final_metrics = final_metrics(&checkpoint, corpus)?;
    Ok(TrainOutcome {
        record: RunRecord {
            method: Method::Uma,
            seed: cfg.seed,
            epochs,
            routing_log,
            final_metrics,
        },
        checkpoint,
    })
}

/// Trains backbone and primary head on majority-vote masks with CE + λ·Dice.
pub fn train_baseline_mv(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_corpus(corpus, cfg)?;
    let mut seg = SegNet::new(cfg.seg, derive_seed(cfg.seed, PURPOSE_SEG_INIT, 0, 0))?;
    let mut opt = Adam::new(AdamConfig::default());
    let samples = train_order(corpus);
    let fused: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let mv = majority_vote(&s.annotations)?;
            let (h, w) = mv.shape();
            Ok(Tensor::new(vec![1, h, w], mv.to_f64()).expect("mask shape"))
        })
        .collect::<Result<_, TrainError>>()?;
    let index_of: std::collections::HashMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let checkpoint_of = |seg: &SegNet, epochs_completed| Checkpoint {
        method: Method::MajorityVote,
        config: *cfg,
        num_sources: corpus.num_sources(),
        height: corpus.height,
        width: corpus.width,
        epochs_completed,
        seg: seg.clone(),
        auem: None,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let order = shuffled(&samples, cfg.seed, epoch);
        let mut acc = EpochAccumulator::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<ParamGrads> = None;
            for sample in batch {
                let mut tape = Tape::new();
                let mut binding = Binding::new();
                let x = tape.leaf(sample.image.to_tensor());
                let y = tape.leaf(fused[index_of[sample.id.as_str()]].clone());
                let forward = seg
                    .forward(&mut tape, &mut binding, x, Heads::Primary)
                    .map_err(TrainError::from)
                    .and_then(|out| {
                        let pred = out.primary_prob.expect("primary head requested");
                        Ok(fused_target_loss(&mut tape, pred, y, cfg.lambda)?)
                    });
                let (total, ce, dice) = match forward {
                    Ok(v) => v,
                    Err(e) if is_numeric_failure(&e) => {
                        return Err(TrainError::Diverged {
                            epoch,
                            sample_id: sample.id.clone(),
                            reason: e.to_string(),
                            last_good: Box::new(checkpoint_of(&seg, epoch)),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let loss = tape.value(total).item();
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        sample_id: sample.id.clone(),
                        reason: format!("loss is {loss}"),
                        last_good: Box::new(checkpoint_of(&seg, epoch)),
                    });
                }
                acc.add(&StepStats {
                    total: loss,
                    weighted_ce: tape.value(ce).item(),
                    weighted_dice: tape.value(dice).item(),
                    consistency: 0.0,
                    alpha: 0.0,
                    route: Route::HighQuality,
                    verdict: None,
                });
                let g = tape.backward(total).map_err(LossError::from)?;
                let g = binding.gradients(seg.params(), &g);
                match &mut grads {
                    Some(a) => a.accumulate(&g),
                    None => grads = Some(g),
                }
            }
            let Some(mut g) = grads else { continue };
            if batch.len() > 1 {
                g.scale(1.0 / batch.len() as f64);
            }
            if let Err(e) = check_gradients(seg.params(), &g) {
                return Err(TrainError::Diverged {
                    epoch,
                    sample_id: batch[0].id.clone(),
                    reason: e.to_string(),
                    last_good: Box::new(checkpoint_of(&seg, epoch)),
                });
            }
            opt.step(seg.params_mut(), &g, lr)?;
        }
        let rec = acc.finish(epoch, lr, false);
        log::info!("mv epoch {epoch}: loss {:.4} lr {:.2e}", rec.mean_total, lr);
        epochs.push(rec);
    }
    let checkpoint = checkpoint_of(&seg, cfg.epochs);
    let final_metrics = final_metrics(&checkpoint, corpus)?;
    Ok(TrainOutcome {
        record: RunRecord {
            method: Method::MajorityVote,
            seed: cfg.seed,
            epochs,
            routing_log: Vec::new(),
            final_metrics,
        },
        checkpoint,
    })
}

pub fn write_routing_log(entries: &[RouteLogEntry], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "sample_id", "u_a", "u_b", "route"])?;
    for e in entries {
        w.write_record([
            e.epoch.to_string(),
            e.sample_id.clone(),
            e.u_a.to_string(),
            e.u_b.to_string(),
            e.route.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_epoch_log(epochs: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
