//! End-to-end runs through the public API: corpus files on disk, training,
//! checkpoints, evaluation tables and the aggregate report.

use umanet::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusConfig};
use umanet::harness::{
    evaluate, read_eval_csv, report_runs, train, train_baseline_mv, write_eval_csv, Checkpoint,
    Method, TrainConfig, AGGREGATE_ID,
};
use umanet::models::SegBackboneConfig;

fn corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig {
        n: 12,
        test_count: 4,
        height: 16,
        width: 16,
        num_sources: 3,
        target_dice: 0.8,
        tol: 0.05,
        seed,
    })
    .unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        seed,
        tau_a: 1.0,
        tau_b: 1.0,
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
fn disk_round_trip_then_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let original = corpus(3);
    save_corpus(&original, &dir.path().join("corpus")).unwrap();
    let c = load_corpus(&dir.path().join("corpus")).unwrap();
    assert_eq!(c, original);

    let runs = dir.path().join("runs");
    std::fs::create_dir_all(&runs).unwrap();
    for (method, seed) in [
        (Method::Uma, 0),
        (Method::Uma, 1),
        (Method::MajorityVote, 0),
    ] {
        let cfg = config(seed);
        let outcome = match method {
            Method::Uma => train(&c, &cfg),
            Method::MajorityVote => train_baseline_mv(&c, &cfg),
        }
        .unwrap();
        assert_eq!(outcome.record.epochs.len(), 3);
        let path = runs.join(format!("{method}-{seed}.ckpt"));
        outcome.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let report = evaluate(&loaded, &c).unwrap();
        assert_eq!(
            report.mean_report(),
            outcome.record.final_metrics.unwrap(),
            "reloaded checkpoint must score identically"
        );
        let csv = runs.join(format!("{method}-{seed}.csv"));
        write_eval_csv(&report, &csv).unwrap();
        let rows = read_eval_csv(&csv).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4].sample_id, AGGREGATE_ID);
        assert!(rows
            .iter()
            .all(|r| r.method == method.name() && r.seed == seed));
    }
    std::fs::write(runs.join("notes.csv"), "a,b\n1,2\n").unwrap();

    let table = report_runs(&runs).unwrap();
    assert_eq!(table.len(), 8);
    let uma_dice = table
        .iter()
        .find(|r| r.method == "uma" && r.metric == "dice")
        .unwrap();
    assert_eq!(uma_dice.runs, 2);
    let mv_dice = table
        .iter()
        .find(|r| r.method == "mv-baseline" && r.metric == "dice")
        .unwrap();
    assert_eq!(mv_dice.runs, 1);
    assert_eq!(mv_dice.seed_std, 0.0);
}

#[test]
fn same_seed_same_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for run in 0..2 {
        let c = corpus(8);
        let outcome = train(&c, &config(5)).unwrap();
        let csv = dir.path().join(format!("{run}.csv"));
        write_eval_csv(&evaluate(&outcome.checkpoint, &c).unwrap(), &csv).unwrap();
        tables.push((
            outcome.checkpoint.to_bytes(),
            std::fs::read(&csv).unwrap(),
            outcome.record.routing_log,
        ));
    }
    assert!(tables[0] == tables[1]);
}

#[test]
fn different_seeds_differ() {
    let c = corpus(8);
    let a = train(&c, &config(1)).unwrap();
    let b = train(&c, &config(2)).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_ne!(corpus(1), corpus(2));
}

#[test]
fn evaluation_rejects_mismatched_corpus() {
    let c = corpus(3);
    let outcome = train(&c, &config(0)).unwrap();
    let fewer = c.with_source_prefix(2).unwrap();
    assert!(evaluate(&outcome.checkpoint, &fewer).is_err());
    let mv = train_baseline_mv(&c, &config(0)).unwrap();
    assert!(evaluate(&mv.checkpoint, &fewer).is_ok());
}
