use std::collections::BTreeMap;

use super::*;
use crate::autodiff::Tensor;
use crate::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use crate::losses::LossWeights;
use crate::models::{Auem, AuemConfig, Heads, SegNet, AUXILIARY_HEAD, PRIMARY_HEAD};

fn tiny_corpus(sources: usize, seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig {
        n: 10,
        test_count: 3,
        height: 16,
        width: 16,
        num_sources: sources,
        target_dice: 0.8,
        tol: 0.05,
        seed,
    })
    .unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seg: SegBackboneConfig {
            in_channels: 1,
            base_width: 4,
            depth: 2,
        },
        auem_width: 4,
        auem_depth: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { lr0: 0.0, ..ok },
        TrainConfig {
            lr_decay: 1.5,
            ..ok
        },
        TrainConfig {
            lr_decay: 0.0,
            ..ok
        },
        TrainConfig {
            warmup_fraction: 1.0,
            ..ok
        },
        TrainConfig { epochs: 0, ..ok },
        TrainConfig {
            batch_size: 0,
            ..ok
        },
        TrainConfig { tau_a: 0.0, ..ok },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert_eq!("uma".parse::<Method>().unwrap(), Method::Uma);
    assert_eq!(
        "mv-baseline".parse::<Method>().unwrap(),
        Method::MajorityVote
    );
    assert!("staple".parse::<Method>().is_err());
}

#[test]
fn learning_rate_schedule_matches_closed_form() {
    let cfg = tiny_config(5);
    for e in 0..5 {
        let expected = 0.001 * 0.96f64.powf(e as f64);
        assert!((lr_at_epoch(&cfg, e) - expected).abs() <= 1e-15 * expected);
    }
    assert_eq!(lr_at_epoch(&cfg, 2), 0.001 * 0.96 * 0.96);
    assert_eq!(lr_at_epoch(&cfg, 0), 0.001);
    assert_eq!(warmup_epochs(&TrainConfig { epochs: 20, ..cfg }), 4);
    assert_eq!(warmup_epochs(&TrainConfig { epochs: 5, ..cfg }), 1);
    assert_eq!(
        warmup_epochs(&TrainConfig {
            warmup_fraction: 0.0,
            ..cfg
        }),
        0
    );
}

#[test]
fn warmup_disables_routing_and_logs_afterwards() {
    let corpus = tiny_corpus(2, 1);
    let cfg = TrainConfig {
        tau_a: 0.01,
        tau_b: 0.01,
        ..tiny_config(5)
    };
    let out = train(&corpus, &cfg).unwrap();
    let rec = &out.record;
    assert_eq!(rec.epochs.len(), 5);
    let n_train = corpus.train().count();
    assert!(!rec.epochs[0].routing_active);
    assert_eq!(rec.epochs[0].low_quality_fraction, 0.0);
    for (e, epoch) in rec.epochs.iter().enumerate() {
        assert_eq!(epoch.lr, lr_at_epoch(&cfg, e));
        assert_eq!(epoch.routing_active, e >= 1);
    }
    assert_eq!(rec.routing_log.len(), 4 * n_train);
    assert!(rec.routing_log.iter().all(|l| l.epoch >= 1));
    // thresholds this strict send every sample to the auxiliary head
    assert_eq!(rec.epochs[4].low_quality_fraction, 1.0);
    assert!(rec.final_metrics.is_some());
}

#[test]
fn one_step_updates_exactly_one_head() {
    let corpus = tiny_corpus(2, 2);
    let sample = corpus.train().next().unwrap();
    for (tau, touched, untouched) in [
        (1.0, PRIMARY_HEAD, AUXILIARY_HEAD),
        (1e-6, AUXILIARY_HEAD, PRIMARY_HEAD),
    ] {
        let cfg = TrainConfig {
            tau_a: tau,
            tau_b: tau,
            ..tiny_config(1)
        };
        let mut trainer = UmaTrainer::new(cfg, 2).unwrap();
        let before_seg = trainer.seg().params().clone();
        let before_auem = trainer.auem().params().clone();
        trainer.step(&[sample], 0.5, true, 1e-3, 0).unwrap();
        let after = trainer.seg().params();
        for (name, t) in before_seg.iter() {
            let changed = t != after.get(name).unwrap();
            if name.starts_with(untouched) {
                let bits = |x: &crate::autodiff::Tensor| {
                    x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                };
                assert_eq!(bits(t), bits(after.get(name).unwrap()), "{name}");
            } else if name.starts_with(touched) || name.contains("dec0.conv2") {
                assert!(changed, "{name} should have been updated");
            }
        }
        assert_ne!(&before_auem, trainer.auem().params());
    }
}

#[test]
fn inference_touches_only_backbone_and_primary_head() {
    let corpus = tiny_corpus(2, 3);
    let out = train(&corpus, &tiny_config(1)).unwrap();
    let seg = &out.checkpoint.seg;
    seg.params().start_trace();
    let auem = out.checkpoint.auem.as_ref().unwrap();
    auem.params().start_trace();
    for s in corpus.test() {
        predict(seg, &s.image).unwrap();
    }
    let used = seg.params().take_trace();
    assert!(auem.params().take_trace().is_empty());
    assert!(used.iter().all(|n| !n.starts_with(AUXILIARY_HEAD)));
    assert!(used.iter().any(|n| n.starts_with(PRIMARY_HEAD)));
    assert_eq!(used.len(), seg.params().len() - 2);
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus(2, 4);
    let cfg = tiny_config(2);
    let a = train(&corpus, &cfg).unwrap();
    let b = train(&corpus, &cfg).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.record, b.record);
    let m1 = train_baseline_mv(&corpus, &cfg).unwrap();
    let m2 = train_baseline_mv(&corpus, &cfg).unwrap();
    assert_eq!(m1.record, m2.record);
    assert!(m1.checkpoint.auem.is_none());
    let other = train(&corpus, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(other.checkpoint, a.checkpoint);
}

#[test]
fn batches_average_gradients() {
    let corpus = tiny_corpus(2, 5);
    let cfg = TrainConfig {
        batch_size: 3,
        ..tiny_config(1)
    };
    let out = train(&corpus, &cfg).unwrap();
    assert_eq!(out.record.epochs.len(), 1);
    assert!(out.record.epochs[0].mean_total.is_finite());
}

#[test]
fn evaluation_oracle_injection() {
    let corpus = tiny_corpus(2, 6);
    let preds: BTreeMap<String, Mask> = corpus
        .train()
        .map(|s| (s.id.clone(), s.clean_mask.clone()))
        .collect();
    let report = evaluate_predictions("oracle", 0, &corpus, Split::Train, &preds).unwrap();
    assert_eq!(report.mean_dice(), 1.0);
    assert_eq!(report.aggregate[2].mean, 0.0);

    let out = train_baseline_mv(&corpus, &tiny_config(1)).unwrap();
    let report = evaluate(&out.checkpoint, &corpus).unwrap();
    let rows = report.rows();
    assert_eq!(rows.len(), corpus.test().count() + 1);
    let hand = rows[..rows.len() - 1].iter().map(|r| r.dice).sum::<f64>() / (rows.len() - 1) as f64;
    let agg = rows.last().unwrap();
    assert_eq!(agg.sample_id, AGGREGATE_ID);
    assert!((agg.dice - hand).abs() <= 1e-12);
    assert!(agg.dice_std.is_some() && rows[0].dice_std.is_none());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.csv");
    write_eval_csv(&report, &path).unwrap();
    let back = read_eval_csv(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    assert_eq!(back[0].sample_id, rows[0].sample_id);
    assert_eq!(back.last().unwrap().dice, agg.dice);
}

use crate::mask::Mask;

#[test]
fn evaluation_rejects_mismatched_corpus() {
    let corpus = tiny_corpus(2, 7);
    let out = train(&corpus, &tiny_config(1)).unwrap();
    assert!(matches!(
        evaluate(&out.checkpoint, &tiny_corpus(3, 7)),
        Err(TrainError::Mismatch(_))
    ));
    let bigger = generate_corpus(&CorpusConfig {
        n: 6,
        test_count: 2,
        height: 32,
        width: 32,
        num_sources: 2,
        target_dice: 0.8,
        tol: 0.05,
        seed: 1,
    })
    .unwrap();
    assert!(matches!(
        evaluate(&out.checkpoint, &bigger),
        Err(TrainError::Mismatch(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let corpus = tiny_corpus(2, 8);
    let out = train(&corpus, &tiny_config(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(
        evaluate(&back, &corpus).unwrap(),
        evaluate(&out.checkpoint, &corpus).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], "cut").is_err());
    assert!(matches!(
        Checkpoint::from_bytes(b"not a checkpoint", "junk"),
        Err(CheckpointError::Magic { .. })
    ));
}

#[test]
fn divergence_keeps_last_good_state() {
    let corpus = tiny_corpus(2, 9);
    let mut trainer = UmaTrainer::new(tiny_config(1), 2).unwrap();
    let name = format!("{PRIMARY_HEAD}.bias");
    trainer
        .seg_mut()
        .params_mut()
        .get_mut(&name)
        .unwrap()
        .data_mut()[0] = f64::NAN;
    let snapshot = trainer.seg().clone();
    let sample = corpus.train().next().unwrap();
    let err = trainer.step(&[sample], 0.0, false, 1e-3, 0).unwrap_err();
    match err {
        TrainError::Diverged {
            sample_id,
            last_good,
            ..
        } => {
            assert_eq!(sample_id, sample.id);
            assert_eq!(last_good.seg.params().names(), snapshot.params().names());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn sweep_rows_and_determinism() {
    let corpus = tiny_corpus(3, 10);
    let cfg = tiny_config(1);
    let rows = run_annotation_count_sweep(&corpus, &[3, 3, 2], &cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[0].subset, "111");
    assert_eq!(rows[2].subset, "110");
    assert!(run_annotation_count_sweep(&corpus, &[1], &cfg).is_err());
    assert!(run_annotation_count_sweep(&corpus, &[4], &cfg).is_err());
    assert_eq!(subset_bitmask(2, 5), "11000");
}

#[test]
fn report_aggregates_evaluation_tables() {
    let corpus = tiny_corpus(2, 11);
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..2 {
        let cfg = TrainConfig {
            seed,
            ..tiny_config(1)
        };
        let uma = train(&corpus, &cfg).unwrap();
        let mv = train_baseline_mv(&corpus, &cfg).unwrap();
        let run = dir.path().join(format!("run{seed}"));
        std::fs::create_dir_all(&run).unwrap();
        write_eval_csv(
            &evaluate(&uma.checkpoint, &corpus).unwrap(),
            &run.join("uma.csv"),
        )
        .unwrap();
        write_eval_csv(
            &evaluate(&mv.checkpoint, &corpus).unwrap(),
            &run.join("mv.csv"),
        )
        .unwrap();
        write_routing_log(&uma.record.routing_log, &run.join("routing.csv")).unwrap();
    }
    let rows = report_runs(dir.path()).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.runs == 2));
    let methods: std::collections::BTreeSet<_> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["mv-baseline", "uma"].into_iter().collect());
    assert!(report_runs(tempfile::tempdir().unwrap().path()).is_err());
}

fn gradcheck_instance(seed: u64) -> (SegNet, Auem, Tensor, Tensor) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(1);
    let mut seg = SegNet::new(cfg.seg, seed).unwrap();
    let mut auem = Auem::new(
        AuemConfig {
            num_sources: 2,
            base_width: 4,
            depth: 2,
        },
        seed + 1,
    )
    .unwrap();
    // Zero biases put dead channels exactly on a ReLU kink.
    for store in [seg.params_mut(), auem.params_mut()] {
        for p in 0..store.len() {
            for v in store.tensor_at_mut(p).data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let image = Tensor::from_fn(&[1, 8, 8], |_| rng.random::<f64>());
    let ann = Tensor::from_fn(&[2, 8, 8], |_| f64::from(rng.random_bool(0.4)));
    (seg, auem, image, ann)
}

#[test]
fn model_gradients_match_finite_differences() {
    let (seg, auem, image, ann) = gradcheck_instance(3);
    let case = GradCheckCase {
        seg: &seg,
        auem: &auem,
        image: &image,
        annotations: &ann,
        head: Heads::Auxiliary,
        weights: LossWeights::default(),
        step_fraction: 0.6,
    };
    let reports = check_model_gradients(&case, 1e-6).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert_eq!(
            r.checked,
            seg.params().num_scalars() + auem.params().num_scalars()
        );
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }
    let both = GradCheckCase {
        head: Heads::Both,
        ..case
    };
    assert!(check_model_gradients(&both, 1e-6).is_err());
}
