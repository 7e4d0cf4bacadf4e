use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dtm_core::config::Config;
use dtm_core::longmem::{self, GruParams};
use dtm_core::metrics::{self, BoundaryTolerance};
use dtm_core::numerics::Tensor;
use dtm_core::stgraph::{self, GraphConfig};
use dtm_core::train::{self, LOG_HEADER};
use dtm_core::{checkpoint, data, segnet, Error};

#[derive(Parser)]
#[command(
    name = "dtm",
    version,
    about = "Dual temporal memory video object segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Segment every sequence of a dataset from its first-frame mask.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Check reverse-mode gradients of the full loss on a toy model.
    Gradcheck(GradcheckArgs),
    /// Measure throughput of graph filtering and the recurrent update.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblationArgs {
    /// Replace graph-filtered features with raw query features.
    #[arg(long)]
    disable_short: bool,
    /// Replace the attention map with ones and keep the initial state.
    #[arg(long)]
    disable_long: bool,
    /// Use edge weights σ(x_iᵀ x_j) without learned projections.
    #[arg(long)]
    unweighted_adjacency: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the epoch log CSV here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Contour tolerance in pixels, or `diagonal` for 0.8% of the diagonal.
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 200)]
    iters: usize,
}

enum Failure {
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::MissingFiles(_)
        | Error::Input(_)
        | Error::Shape(_) => 3,
        Error::Numeric(_) => 4,
        Error::CheckpointMismatch(_) => 5,
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config, Error> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn apply_ablation(cfg: &mut Config, a: &AblationArgs) {
    let ab = &mut cfg.model.ablation;
    ab.disable_short |= a.disable_short;
    ab.disable_long |= a.disable_long;
    ab.unweighted_adjacency |= a.unweighted_adjacency;
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let script = data::synth_generate(&cfg.synth, &args.out)?;
    println!(
        "{} sequences written to {}",
        script.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    apply_ablation(&mut cfg, &args.ablation);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let seqs = data::load_dataset(&args.data)?;
    println!("{LOG_HEADER}");
    let outcome = train::train(&cfg.model, &cfg.train, &seqs, |log| {
        println!("{}", log.csv_row())
    })?;
    if let Some(path) = &args.log {
        let mut text = format!("{LOG_HEADER}\n");
        for log in &outcome.logs {
            text.push_str(&log.csv_row());
            text.push('\n');
        }
        data::write_atomic(path, text.as_bytes())?;
    }
    checkpoint::save(&args.out, &outcome.params)?;
    eprintln!(
        "{} optimizer steps; checkpoint written to {}",
        outcome.steps,
        args.out.display()
    );
    Ok(())
}

fn infer_cmd(args: &InferArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    apply_ablation(&mut cfg, &args.ablation);
    cfg.model.validate()?;
    let params = checkpoint::load(&args.ckpt)?;
    segnet::check_params(&cfg.model, &params)?;
    let n = train::infer_dataset(&cfg.model, &params, &args.data, &args.out)?;
    println!("{n} sequences segmented into {}", args.out.display());
    Ok(())
}

fn parse_tol(s: &str) -> Result<BoundaryTolerance, Error> {
    if s == "diagonal" {
        return Ok(BoundaryTolerance::Diagonal);
    }
    s.parse()
        .map(BoundaryTolerance::Pixels)
        .map_err(|_| Error::Config(format!("invalid tolerance {s:?}")))
}

fn eval_cmd(args: &EvalArgs) -> Result<(), Failure> {
    let tol = match &args.tol {
        Some(t) => parse_tol(t)?,
        None => Config::default().boundary_tol,
    };
    let report = metrics::evaluate(&args.pred, &args.gt, tol)?;
    data::write_atomic(&args.report, report.to_csv().as_bytes())?;
    println!("{}", metrics::REPORT_HEADER);
    println!("{}", report.global_row());
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), Failure> {
    let report = train::run_gradcheck(args.seed, args.eps)?;
    println!(
        "max relative error {:.3e} over {} entries (loss {:.6})",
        report.max_rel_error, report.entries_checked, report.loss
    );
    if report.max_rel_error <= args.tol {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:.3e} exceeds tolerance {:.3e}",
            report.max_rel_error, args.tol
        )))
    }
}

fn rate(iters: usize, start: Instant) -> f64 {
    iters as f64 / start.elapsed().as_secs_f64()
}

fn bench_cmd(args: &BenchArgs) -> Result<(), Failure> {
    let iters = args.iters.max(1);
    let gcfg = GraphConfig::new(2, 16, 16);
    let graph = Arc::new(stgraph::build_graph(&gcfg)?);
    let d = 32;
    let x = Tensor::from_fn(&[graph.node_count(), d], |i| {
        ((i * 7919) % 101) as f64 / 101.0
    });
    let values: Vec<f64> = (0..graph.edge_count())
        .map(|e| 0.25 + (e % 7) as f64 / 10.0)
        .collect();
    let norm = stgraph::normalize(&graph, &values)?;
    let start = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        sink += stgraph::gcf(&graph, &norm, &x)?.data()[0];
    }
    println!(
        "gcf: {:.1} ops/sec ({} nodes, {} edges, d = {d})",
        rate(iters, start),
        graph.node_count(),
        graph.edge_count()
    );

    let params = GruParams {
        w: Tensor::from_fn(&[d, 2 * d], |i| ((i % 13) as f64 - 6.0) / 20.0),
    };
    let xin = Tensor::from_fn(&[d], |i| (i as f64 / d as f64) - 0.5);
    let mut h = Tensor::zeros(&[d]);
    let n = iters * 1000;
    let start = Instant::now();
    for _ in 0..n {
        h = longmem::sgru_step(&xin, &h, &params)?;
    }
    sink += h.data()[0];
    println!("sgru_step: {:.1} ops/sec (d = {d})", rate(n, start));
    std::hint::black_box(sink);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("dtm: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("dtm: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
