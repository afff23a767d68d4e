use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use parafront::cli::{self, Mode, OutFormat, RunSpec};
use parafront::fixture::{gen_fixture, FixtureKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliMode {
    Frontier,
    MiniTime,
    MiniParallelism,
    Profile,
    OracleCheck,
    Bench,
    GenFixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliKind {
    Chain,
    Residual,
    SharedInput,
}

/// Memory/time trade-off frontiers for operator-level parallelization of
/// computation graphs.
#[derive(Parser, Debug)]
#[command(name = "parafront", version, about)]
struct Args {
    #[arg(long, value_enum)]
    mode: CliMode,
    /// Computation graph JSON.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Device graph JSON with bandwidth profiles.
    #[arg(long)]
    devices: Option<PathBuf>,
    /// Cost-table JSON; omitted tables come from the synthetic model.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Memory budget in bytes (mini-time, mini-parallelism, profile).
    #[arg(long)]
    memory_limit: Option<f64>,
    /// Candidate device counts (parallelism modes) or configuration counts
    /// (bench), comma separated.
    #[arg(long, value_delimiter = ',')]
    counts: Vec<u64>,
    /// Worker threads; the output is identical for any value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seed for fixture generation and benchmarks.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format for the frontier mode.
    #[arg(long, value_enum)]
    format: Option<CliFormat>,
    /// Also emit the elimination log as JSON.
    #[arg(long)]
    trace: bool,
    /// Maximum device-mesh rank when enumerating configurations.
    #[arg(long, default_value_t = 2)]
    max_rank: usize,
    /// Randomize the first-operator tie-break of backbone marking.
    #[arg(long)]
    marking_seed: Option<u64>,
    /// Strategy-count cap for oracle-check brute force.
    #[arg(long, default_value_t = 10_000_000)]
    brute_limit: u64,
    /// Fixture shape (gen-fixture).
    #[arg(long, value_enum)]
    kind: Option<CliKind>,
    /// Fixture size (gen-fixture).
    #[arg(long)]
    n: Option<usize>,
    /// Configurations per operator (gen-fixture).
    #[arg(long)]
    k: Option<usize>,
}

fn run(args: Args) -> parafront::Result<i32> {
    if args.mode == CliMode::GenFixture {
        let kind = match args.kind {
            Some(CliKind::Chain) => FixtureKind::Chain,
            Some(CliKind::Residual) => FixtureKind::Residual,
            Some(CliKind::SharedInput) => FixtureKind::SharedInput,
            None => {
                return Err(parafront::Error::Validation("gen-fixture requires --kind".into()))
            }
        };
        let n = args.n.ok_or_else(|| parafront::Error::Validation("gen-fixture requires --n".into()))?;
        let k = args.k.ok_or_else(|| parafront::Error::Validation("gen-fixture requires --k".into()))?;
        let dir = args
            .out
            .ok_or_else(|| parafront::Error::Validation("gen-fixture requires --out DIR".into()))?;
        let fixture = gen_fixture(kind, n, k, args.seed)?;
        let paths = cli::write_fixture(&fixture, &dir)?;
        for p in paths {
            println!("{}", p.display());
        }
        return Ok(cli::EXIT_OK);
    }

    let mode = match args.mode {
        CliMode::Frontier => Mode::Frontier,
        CliMode::MiniTime => Mode::MiniTime,
        CliMode::MiniParallelism => Mode::MiniParallelism,
        CliMode::Profile => Mode::Profile,
        CliMode::OracleCheck => Mode::OracleCheck,
        CliMode::Bench => Mode::Bench,
        CliMode::GenFixture => unreachable!("handled above"),
    };
    let mut spec = RunSpec::new(mode);
    spec.graph = args.graph;
    spec.devices = args.devices;
    spec.costs = args.costs;
    spec.memory_limit = args.memory_limit;
    spec.counts = args.counts;
    spec.threads = args.threads;
    spec.seed = args.seed;
    spec.out = args.out;
    spec.format = args.format.map(|f| match f {
        CliFormat::Json => OutFormat::Json,
        CliFormat::Csv => OutFormat::Csv,
    });
    spec.trace = args.trace;
    spec.max_rank = args.max_rank;
    spec.marking_seed = args.marking_seed;
    spec.brute_limit = args.brute_limit;
    cli::run(&spec)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
