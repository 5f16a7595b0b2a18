use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sparrow::dataio::{
    ingest, read_libsvm, write_libsvm, Dataset, IngestOptions, MemoryDataset, Record, RecordSource,
};
use sparrow::eval::evaluate;
use sparrow::synth::blob_benchmark;
use sparrow::train::{train, TrainOptions, TransportKind};
use sparrow::{Error, Features, StrongModel};

#[derive(Parser)]
#[command(name = "sparrow", version, about = "Asynchronous boosting with certified early stopping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a LIBSVM file into the binary cache used for training.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep file order (for holdout sets).
        #[arg(long)]
        no_shuffle: bool,
    },
    /// Train one worker, several simulated workers, or one TCP cluster member.
    Train(TrainArgs),
    /// Train through the deterministic round-robin simulator.
    Simulate(TrainArgs),
    /// Print exponential loss and AUPRC of a model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Binary cache or LIBSVM text.
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the two-Gaussian-blob benchmark as LIBSVM text.
    Synth {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_train: usize,
        #[arg(long, default_value_t = 2_000)]
        n_test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Inproc,
    Tcp,
}

#[derive(Args)]
struct TrainArgs {
    /// Ingested training cache.
    #[arg(long)]
    data: PathBuf,
    /// Ingested holdout cache.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 2000)]
    sample_size: usize,
    #[arg(long, default_value_t = 0.25)]
    neff_threshold: f64,
    #[arg(long, default_value_t = 0.25)]
    gamma0: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    stop_const: f64,
    #[arg(long, default_value_t = 16)]
    bins: usize,
    /// Rules to add before stopping.
    #[arg(long, default_value_t = 100)]
    rules: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    epsilon_rel: f64,
    #[arg(long, value_enum, default_value_t = Transport::Inproc)]
    transport: Transport,
    /// Comma-separated host:port list, one per worker, in worker-id order.
    #[arg(long, value_delimiter = ',', value_parser = parse_peer)]
    peers: Vec<SocketAddr>,
    #[arg(long, default_value_t = 0)]
    worker_id: usize,
    /// JSON fault plan for the in-process bus.
    #[arg(long)]
    fault_plan: Option<PathBuf>,
    /// Metrics CSV output.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Evaluate holdout metrics on every E-th CSV row.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Final model JSON output.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Examples per worker per simulation round.
    #[arg(long, default_value_t = 100)]
    quantum: u64,
    /// Per-worker cap on scanned examples.
    #[arg(long)]
    max_scanned: Option<u64>,
}

fn parse_peer(s: &str) -> Result<SocketAddr, String> {
    s.to_socket_addrs()
        .map_err(|e| format!("{s}: {e}"))?
        .next()
        .ok_or_else(|| format!("{s}: no address"))
}

impl TrainArgs {
    fn options(&self, simulate: bool) -> TrainOptions {
        TrainOptions {
            data: self.data.clone(),
            test: self.test.clone(),
            workers: self.workers,
            sample_size: self.sample_size,
            neff_threshold: self.neff_threshold,
            gamma0: self.gamma0,
            delta: self.delta,
            stop_const: self.stop_const,
            bins: self.bins,
            rules: self.rules,
            seed: self.seed,
            epsilon_rel: self.epsilon_rel,
            transport: match self.transport {
                Transport::Inproc => TransportKind::InProc,
                Transport::Tcp => TransportKind::Tcp,
            },
            peers: self.peers.clone(),
            worker_id: self.worker_id,
            fault_plan: self.fault_plan.clone(),
            metrics: self.metrics.clone(),
            eval_every: self.eval_every,
            model_out: self.model.clone(),
            quantum: self.quantum,
            max_scanned: self.max_scanned,
            simulate,
        }
    }
}

/// A binary cache if the file has the cache header, LIBSVM text otherwise.
/// Text is widened to `min_dim` so models trained on wider data still apply.
fn load_dataset(path: &Path, min_dim: usize) -> Result<MemoryDataset> {
    match Dataset::open(path) {
        Ok(ds) => Ok(ds.load()?),
        Err(Error::Format(_)) => {
            let (dim, rows) = read_libsvm(path)?;
            let dim = dim.max(min_dim);
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (y, entries))| Record {
                    index: i as u64,
                    x: Features::Sparse { dim, entries },
                    y,
                })
                .collect();
            Ok(MemoryDataset::new(dim, records))
        }
        Err(e) => Err(e.into()),
    }
}

fn run_train(args: &TrainArgs, simulate: bool) -> Result<ExitCode> {
    let opts = args.options(simulate);
    if let Err(e) = opts.validate() {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(2));
    }
    if !opts.data.exists() {
        bail!("training data {} not found", opts.data.display());
    }
    if let Some(t) = opts.test.as_ref().filter(|t| !t.exists()) {
        bail!("test data {} not found", t.display());
    }
    let summary = train(&opts).with_context(|| format!("training on {}", opts.data.display()))?;
    println!("rules {}", summary.model.len());
    println!("bound {:.6}", summary.bound);
    println!("scanned {}", summary.scanned);
    if let Some(m) = summary.test {
        println!("test_exp_loss {:.6}", m.exp_loss);
        println!("test_auprc {:.6}", m.auprc);
        println!("test_error {:.6}", m.error_rate);
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest {
            input,
            output,
            seed,
            no_shuffle,
        } => {
            let ds = ingest(&input, &output, IngestOptions { seed, shuffle: !no_shuffle })
                .with_context(|| format!("ingesting {}", input.display()))?;
            println!(
                "{} records, {} features, {:?} layout -> {}",
                ds.len(),
                ds.dim(),
                ds.layout(),
                output.display()
            );
        }
        Command::Train(args) => return run_train(&args, false),
        Command::Simulate(args) => return run_train(&args, true),
        Command::Evaluate { model, data } => {
            let model = StrongModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            let min_dim = model.max_feature().map_or(0, |f| f + 1);
            let ds = load_dataset(&data, min_dim).with_context(|| format!("loading {}", data.display()))?;
            let m = evaluate(&model, &ds)?;
            println!("exp_loss {:.6}", m.exp_loss);
            println!("auprc {:.6}", m.auprc);
        }
        Command::Synth {
            train,
            test,
            n_train,
            n_test,
            seed,
        } => {
            let (tr, te) = blob_benchmark(n_train, n_test, seed)?;
            for (path, rows) in [(&train, tr), (&test, te)] {
                let rows: Vec<(Features, i8)> = rows.into_iter().map(|(x, y)| (Features::Dense(x), y)).collect();
                write_libsvm(path, rows.iter().map(|(x, y)| (x, *y)))?;
            }
            println!("wrote {n_train} train rows to {} and {n_test} test rows to {}", train.display(), test.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
