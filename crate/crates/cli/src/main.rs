mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use umanet::corpus::{generate_corpus, load_corpus, save_corpus};
use umanet::harness::{
    evaluate, report_runs, run_annotation_count_sweep, train, train_baseline_mv, write_epoch_log,
    write_eval_csv, write_routing_log, write_sweep_csv, Checkpoint, Method, TrainConfig,
    TrainError,
};
use umanet::metrics::write_aggregate_csv;

use config::{parse_size, set, FileConfig};

#[derive(Parser)]
#[command(
    name = "umanet",
    version,
    about = "Segmentation from multiple noisy annotation sources"
)]
struct Cli {
    /// TOML file with `[corpus]` and `[train]` tables; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with calibrated annotation noise.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write a checkpoint plus routing and epoch logs.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a corpus.
    Eval(EvalArgs),
    /// Train and evaluate with different numbers of annotation sources.
    Sweep(SweepArgs),
    /// Aggregate every evaluation table under a directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Total number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Number of samples in the test split.
    #[arg(long)]
    test_count: Option<usize>,
    /// Image extent, `32` or `HxW`.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Number of annotation sources.
    #[arg(long)]
    sources: Option<usize>,
    /// Target mean Dice of the annotations against the clean masks.
    #[arg(long)]
    target_dice: Option<f64>,
    /// Accepted deviation from the target.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameters shared by `train` and `sweep`.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch learning-rate decay factor.
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Confidence threshold of the quality gate.
    #[arg(long)]
    tau_a: Option<f64>,
    /// Agreement threshold of the quality gate.
    #[arg(long)]
    tau_b: Option<f64>,
    /// Weight of the Dice term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Plateau of the consistency weight ramp.
    #[arg(long)]
    alpha_max: Option<f64>,
    /// Fraction of epochs trained before routing starts.
    #[arg(long)]
    warmup: Option<f64>,
    /// Send every sample to the primary head.
    #[arg(long)]
    no_routing: bool,
    /// Drop the consistency term.
    #[arg(long)]
    no_consistency: bool,
    #[arg(long)]
    seg_width: Option<usize>,
    #[arg(long)]
    seg_depth: Option<usize>,
    #[arg(long)]
    auem_width: Option<usize>,
    #[arg(long)]
    auem_depth: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.lr0, self.lr);
        set(&mut cfg.lr_decay, self.lr_decay);
        set(&mut cfg.tau_a, self.tau_a);
        set(&mut cfg.tau_b, self.tau_b);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.alpha_max, self.alpha_max);
        set(&mut cfg.warmup_fraction, self.warmup);
        set(&mut cfg.seg.base_width, self.seg_width);
        set(&mut cfg.seg.depth, self.seg_depth);
        set(&mut cfg.auem_width, self.auem_width);
        set(&mut cfg.auem_depth, self.auem_depth);
        if self.no_routing {
            cfg.routing = false;
        }
        if self.no_consistency {
            cfg.consistency = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "uma")]
    method: Method,
    #[command(flatten)]
    flags: TrainFlags,
    /// Checkpoint path; logs are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Source counts to train with, each using the first sources.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    counts: Vec<usize>,
    /// Seeds to repeat the sweep with; defaults to the training seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(file, a),
        Command::Train(a) => train_cmd(file, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(file, a),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_corpus(file: FileConfig, a: GenCorpusArgs) -> Result<()> {
    let mut cfg = file.corpus;
    set(&mut cfg.n, a.n);
    set(&mut cfg.test_count, a.test_count);
    if let Some((h, w)) = a.size {
        cfg.height = h;
        cfg.width = w;
    }
    set(&mut cfg.num_sources, a.sources);
    set(&mut cfg.target_dice, a.target_dice);
    set(&mut cfg.tol, a.tol);
    set(&mut cfg.seed, a.seed);
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&corpus, &a.out)?;
    info!(
        "wrote {} samples to {} (mean annotation dice {:.4})",
        corpus.samples.len(),
        a.out.display(),
        corpus.mean_annotation_dice()
    );
    Ok(())
}

/// `ckpt.bin` becomes `ckpt.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn train_cmd(file: FileConfig, a: TrainArgs) -> Result<()> {
    let mut cfg = file.train;
    a.flags.apply(&mut cfg);
    let corpus = load_corpus(&a.corpus)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let result = match a.method {
        Method::Uma => train(&corpus, &cfg),
        Method::MajorityVote => train_baseline_mv(&corpus, &cfg),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            sample_id,
            reason,
            last_good,
        }) => {
            let path = sibling(&a.out, "last-good.ckpt");
            last_good.save(&path)?;
            bail!(
                "training diverged at epoch {epoch}, sample {sample_id}: {reason}; \
                 last good state saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(&a.out)?;
    write_epoch_log(&outcome.record.epochs, &sibling(&a.out, "epochs.csv"))?;
    if a.method == Method::Uma {
        write_routing_log(&outcome.record.routing_log, &sibling(&a.out, "routing.csv"))?;
    }
    if let Some(m) = outcome.record.final_metrics {
        info!(
            "test dice {:.4} jaccard {:.4} asd {:.3} hd95 {:.3}",
            m.dice, m.jaccard, m.asd, m.hd95
        );
    }
    info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = evaluate(&ckpt, &corpus)?;
    write_eval_csv(&report, &a.out)?;
    info!(
        "{} seed {}: mean test dice {:.4} over {} samples",
        report.method,
        report.seed,
        report.mean_dice(),
        report.samples.len()
    );
    Ok(())
}

fn sweep_cmd(file: FileConfig, a: SweepArgs) -> Result<()> {
    let mut cfg = file.train;
    a.flags.apply(&mut cfg);
    let corpus = load_corpus(&a.corpus)?;
    let seeds = if a.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        a.seeds.clone()
    };
    let mut rows = Vec::new();
    for seed in seeds {
        let run = TrainConfig { seed, ..cfg };
        rows.extend(run_annotation_count_sweep(&corpus, &a.counts, &run)?);
    }
    write_sweep_csv(&rows, &a.out)?;
    info!("wrote {} sweep rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let rows = report_runs(&a.runs)?;
    write_aggregate_csv(&rows, &a.out)?;
    for r in rows.iter().filter(|r| r.metric == "dice") {
        info!(
            "{}: dice {:.4} ± {:.4} over {} runs",
            r.method, r.mean, r.std, r.runs
        );
    }
    Ok(())
}
