use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pmemprims::bench::{self, BenchBackend, BenchSpec, Experiment, Flavor, FlushAlgo};
use pmemprims::error::Error;
use pmemprims::wal::LogAlgorithm;

#[derive(Parser)]
#[command(name = "pmemprims", version, about = "Persistent-memory storage primitives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark experiment and emit CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// bandwidth | latency | log | flush | ycsb
    experiment: String,

    /// real | sim
    #[arg(long, default_value = "sim")]
    backend: String,

    #[arg(long, default_value_t = 1)]
    threads: u32,

    /// Bandwidth sweeps 1..=K adjacent cache lines.
    #[arg(long = "adjacent-lines", value_name = "K", default_value_t = 12)]
    adjacent_lines: u32,

    /// plain | plain+writeback | streaming | load (load: bandwidth only)
    #[arg(long, default_value = "streaming")]
    flavor: String,

    /// Log algorithm (classic|header|header-dance|zero) or flush technique
    /// (cow|mulog|hybrid), depending on the experiment.
    #[arg(long)]
    algo: Option<String>,

    /// Payload bytes for log/ycsb entries; omits to sweep the default sizes.
    #[arg(long = "entry-size", value_name = "B")]
    entry_size: Option<u32>,

    /// Pad log entries to cache-line boundaries.
    #[arg(long)]
    aligned: bool,

    /// Dirty cache lines per flush; omit to sweep the default counts.
    #[arg(long, value_name = "D")]
    dirty: Option<u32>,

    /// Operations per sweep point (split across threads).
    #[arg(long, default_value_t = 1000)]
    ops: u64,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Write CSV here instead of stdout.
    #[arg(long, value_name = "FILE.csv")]
    out: Option<PathBuf>,

    /// Bandwidth/latency working set in bytes.
    #[arg(long = "working-set", default_value_t = 10u64 << 30)]
    working_set: u64,

    /// Backing file for the real backend (default: a temp file, removed
    /// afterwards).
    #[arg(long)]
    path: Option<PathBuf>,
}

fn build_spec(args: &BenchArgs) -> Result<BenchSpec, Error> {
    let invalid = |msg: String| Error::InvalidSpec(msg);
    let experiment: Experiment = args.experiment.parse().map_err(invalid)?;
    let backend: BenchBackend = args.backend.parse().map_err(invalid)?;
    let flavor: Flavor = args.flavor.parse().map_err(invalid)?;

    let mut algo = LogAlgorithm::Zero;
    let mut flush_algo = FlushAlgo::Cow;
    if let Some(name) = &args.algo {
        match experiment {
            Experiment::Flush => flush_algo = name.parse().map_err(invalid)?,
            _ => algo = name.parse().map_err(invalid)?,
        }
    }

    Ok(BenchSpec {
        experiment,
        backend,
        threads: args.threads,
        adjacent_lines: args.adjacent_lines,
        flavor,
        entry_size: args.entry_size,
        aligned: args.aligned,
        algo,
        flush_algo,
        dirty: args.dirty,
        ops: args.ops,
        seed: args.seed,
        working_set: args.working_set,
        path: args.path.clone(),
    })
}

fn run_bench(args: &BenchArgs) -> Result<(), Error> {
    let spec = build_spec(args)?;
    let rows = bench::run(&spec)?;
    match &args.out {
        Some(path) => {
            let mut file = std::fs::File::create(path)?;
            bench::write_csv(&rows, &mut file)?;
        }
        None => {
            let stdout = std::io::stdout();
            bench::write_csv(&rows, &mut stdout.lock())?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench(args) => run_bench(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = if matches!(e, Error::InvalidSpec(_)) { 2 } else { 1 };
        std::process::exit(code);
    }
}
