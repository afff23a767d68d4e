//! Mode dispatch behind the command-line binary: file ingestion, solver
//! invocation, and CSV/JSON emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::costmodel::CostFile;
use crate::eliminate::{ElimOptions, ElimRecord, ElimState};
use crate::error::{Error, Result};
use crate::fixture::{gen_fixture, Fixture, FixtureKind};
use crate::frontier::{Frontier, StrategyTuple};
use crate::graph::{ComputationGraph, DeviceGraph};
use crate::solver::{
    brute_force, ft, ft_elimination, ldp, mini_parallelism, profile, Problem, SolveOptions,
    Workers,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Frontier,
    MiniTime,
    MiniParallelism,
    Profile,
    OracleCheck,
    Bench,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutFormat {
    Json,
    Csv,
}

/// One solver invocation as described by command-line flags.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub mode: Mode,
    pub graph: Option<PathBuf>,
    pub devices: Option<PathBuf>,
    pub costs: Option<PathBuf>,
    pub memory_limit: Option<f64>,
    pub counts: Vec<u64>,
    pub threads: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Option<OutFormat>,
    pub trace: bool,
    pub max_rank: usize,
    pub marking_seed: Option<u64>,
    pub brute_limit: u64,
}

impl RunSpec {
    pub fn new(mode: Mode) -> Self {
        RunSpec {
            mode,
            graph: None,
            devices: None,
            costs: None,
            memory_limit: None,
            counts: Vec::new(),
            threads: 1,
            seed: 42,
            out: None,
            format: None,
            trace: false,
            max_rank: 2,
            marking_seed: None,
            brute_limit: 10_000_000,
        }
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            threads: self.threads.max(1),
            elim: ElimOptions { marking_seed: self.marking_seed, ..ElimOptions::default() },
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

fn required<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::Validation(format!("this mode requires {what}")))
}

fn load_problem(spec: &RunSpec) -> Result<Problem> {
    let graph: ComputationGraph = read_json(required(&spec.graph, "--graph")?)?;
    let devices: DeviceGraph = read_json(required(&spec.devices, "--devices")?)?;
    let costs: Option<CostFile> = match &spec.costs {
        Some(path) => Some(read_json(path)?),
        None => None,
    };
    Problem::assemble(graph, devices, costs.as_ref(), spec.max_rank)
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        }),
        None => {
            let mut stdout = std::io::stdout();
            stdout.write_all(content.as_bytes()).and_then(|_| stdout.flush()).map_err(
                |source| Error::Io { path: "<stdout>".into(), source },
            )
        }
    }
}

#[derive(Serialize)]
struct StrategyEntryJson {
    op: u64,
    mesh: Vec<u64>,
    tensor_maps: Vec<Vec<i32>>,
}

#[derive(Serialize)]
struct PointJson {
    memory_bytes: f64,
    time_s: f64,
    strategy: Vec<StrategyEntryJson>,
}

fn strategy_json(problem: &Problem, tuple: &StrategyTuple) -> PointJson {
    let pos_of: std::collections::BTreeMap<u64, usize> =
        problem.graph.operators.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let strategy = tuple
        .strategy
        .iter()
        .map(|&(op, cfg)| {
            let c = &problem.space.per_op[pos_of[&op]][cfg as usize];
            StrategyEntryJson {
                op,
                mesh: c.mesh.dims.clone(),
                tensor_maps: c.tensor_maps.iter().map(|m| m.map.clone()).collect(),
            }
        })
        .collect();
    PointJson { memory_bytes: tuple.memory, time_s: tuple.time, strategy }
}

fn trace_json(log: &[ElimRecord]) -> String {
    #[derive(Serialize)]
    struct TraceEntry<'a> {
        kind: &'a crate::eliminate::ElimKind,
        eliminated: &'a [u64],
        new_entity: Option<u64>,
        records_count: usize,
    }
    let entries: Vec<TraceEntry<'_>> = log
        .iter()
        .map(|r| TraceEntry {
            kind: &r.kind,
            eliminated: &r.eliminated,
            new_entity: r.new_entity,
            records_count: r.records,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("trace serializes")
}

fn emit_trace(spec: &RunSpec, log: &[ElimRecord]) -> Result<()> {
    if !spec.trace {
        return Ok(());
    }
    let text = trace_json(log);
    match &spec.out {
        Some(path) => {
            let mut trace_path = path.as_os_str().to_owned();
            trace_path.push(".trace.json");
            fs::write(&trace_path, text).map_err(|source| Error::Io {
                path: PathBuf::from(trace_path).display().to_string(),
                source,
            })
        }
        None => {
            eprintln!("{text}");
            Ok(())
        }
    }
}

/// Dispatches one run; returns the process exit code (0 success,
/// 2 infeasible).
pub fn run(spec: &RunSpec) -> Result<i32> {
    match spec.mode {
        Mode::Frontier => run_frontier(spec),
        Mode::MiniTime => run_mini_time(spec),
        Mode::MiniParallelism => run_mini_parallelism(spec),
        Mode::Profile => run_profile(spec),
        Mode::OracleCheck => run_oracle_check(spec),
        Mode::Bench => run_bench(spec),
    }
}

fn run_frontier(spec: &RunSpec) -> Result<i32> {
    let problem = load_problem(spec)?;
    let result = ft(&problem, &spec.solve_options())?;
    emit_trace(spec, &result.log)?;
    match spec.format.unwrap_or(OutFormat::Json) {
        OutFormat::Csv => {
            let mut buf = Vec::new();
            result.frontier.write_csv(&mut buf).expect("vec write");
            emit(&spec.out, &String::from_utf8(buf).expect("ascii csv"))?;
        }
        OutFormat::Json => {
            #[derive(Serialize)]
            struct ResultJson {
                frontier: Vec<PointJson>,
                stats: crate::solver::RunStats,
            }
            let body = ResultJson {
                frontier: result
                    .frontier
                    .tuples()
                    .iter()
                    .map(|t| strategy_json(&problem, t))
                    .collect(),
                stats: result.stats,
            };
            emit(&spec.out, &serde_json::to_string_pretty(&body).expect("serializes"))?;
        }
    }
    Ok(EXIT_OK)
}

fn run_mini_time(spec: &RunSpec) -> Result<i32> {
    let problem = load_problem(spec)?;
    let limit = *required(&spec.memory_limit, "--memory-limit")?;
    let result = ft(&problem, &spec.solve_options())?;
    emit_trace(spec, &result.log)?;
    match result.frontier.best_time_within(limit) {
        Some(t) => {
            let body = strategy_json(&problem, t);
            emit(&spec.out, &serde_json::to_string_pretty(&body).expect("serializes"))?;
            Ok(EXIT_OK)
        }
        None => {
            emit(&spec.out, "{\"infeasible\":true}\n")?;
            Ok(EXIT_INFEASIBLE)
        }
    }
}

/// The per-count device family used by the parallelism modes: uniform
/// synthetic schemes for every divisor group size.
fn device_family(count: u64) -> DeviceGraph {
    DeviceGraph::synthetic(count, 5e-6, 12.0e9)
}

fn parallelism_builder(spec: &RunSpec) -> Result<impl Fn(u64) -> Result<Problem>> {
    if spec.costs.is_some() {
        return Err(Error::Validation(
            "parallelism modes rebuild cost tables per device count; omit --costs".into(),
        ));
    }
    if spec.devices.is_some() {
        return Err(Error::Validation(
            "parallelism modes synthesize a device family per count; omit --devices".into(),
        ));
    }
    let graph: ComputationGraph = read_json(required(&spec.graph, "--graph")?)?;
    let max_rank = spec.max_rank;
    Ok(move |count: u64| Problem::assemble(graph.clone(), device_family(count), None, max_rank))
}

fn run_mini_parallelism(spec: &RunSpec) -> Result<i32> {
    let limit = *required(&spec.memory_limit, "--memory-limit")?;
    if spec.counts.is_empty() {
        return Err(Error::Validation("this mode requires --counts".into()));
    }
    let build = parallelism_builder(spec)?;
    match mini_parallelism(&build, limit, &spec.counts, &spec.solve_options()) {
        Ok(choice) => {
            let problem = build(choice.device_count)?;
            #[derive(Serialize)]
            struct ChoiceJson {
                device_count: u64,
                #[serde(flatten)]
                point: PointJson,
            }
            let body = ChoiceJson {
                device_count: choice.device_count,
                point: strategy_json(&problem, &choice.tuple),
            };
            emit(&spec.out, &serde_json::to_string_pretty(&body).expect("serializes"))?;
            Ok(EXIT_OK)
        }
        Err(Error::NoFeasibleCount) => {
            emit(&spec.out, "{\"infeasible\":true}\n")?;
            Ok(EXIT_INFEASIBLE)
        }
        Err(e) => Err(e),
    }
}

fn run_profile(spec: &RunSpec) -> Result<i32> {
    let limit = *required(&spec.memory_limit, "--memory-limit")?;
    if spec.counts.is_empty() {
        return Err(Error::Validation("this mode requires --counts".into()));
    }
    let build = parallelism_builder(spec)?;
    let rows = profile(build, limit, &spec.counts, &spec.solve_options())?;
    let mut text = String::from("device_count,min_time_s\n");
    for row in rows {
        match row.min_time {
            Some(t) => text.push_str(&format!("{},{t}\n", row.device_count)),
            None => text.push_str(&format!("{},infeasible\n", row.device_count)),
        }
    }
    emit(&spec.out, &text)?;
    Ok(EXIT_OK)
}

fn run_oracle_check(spec: &RunSpec) -> Result<i32> {
    let problem = load_problem(spec)?;
    let result = ft(&problem, &spec.solve_options())?;
    let oracle = brute_force(&problem, u128::from(spec.brute_limit))?;
    let got: Vec<(f64, f64)> =
        result.frontier.tuples().iter().map(|t| (t.memory, t.time)).collect();
    let want: Vec<(f64, f64)> = oracle.tuples().iter().map(|t| (t.memory, t.time)).collect();
    let mut text = String::new();
    let code = if got == want {
        text.push_str(&format!("MATCH ({} frontier points)\n", got.len()));
        EXIT_OK
    } else {
        text.push_str("MISMATCH\n");
        let missing: Vec<_> = want.iter().filter(|c| !got.contains(c)).take(5).collect();
        let extra: Vec<_> = got.iter().filter(|c| !want.contains(c)).take(5).collect();
        text.push_str(&format!("missing from search: {missing:?}\n"));
        text.push_str(&format!("not on oracle frontier: {extra:?}\n"));
        1
    };
    emit(&spec.out, &text)?;
    Ok(code)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub ldp_seconds: f64,
    pub ft_elimination_seconds: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.ft_elimination_seconds / self.ldp_seconds
    }
}

/// Milliseconds-scale timer: short runs are repeated until the sample is
/// meaningful and averaged.
fn time_secs(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    let first = start.elapsed().as_secs_f64();
    if first >= 0.05 {
        return Ok(first);
    }
    let reps = (0.05 / first.max(1e-6)).ceil().min(200.0) as usize;
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// Times the dynamic program against the elimination baseline on seeded
/// linear graphs of `n` operators with `k` configurations each.
pub fn bench_linear(ks: &[usize], n: usize, seed: u64, threads: usize) -> Result<Vec<BenchRow>> {
    let workers = Workers::new(threads.max(1))?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let problem = gen_fixture(FixtureKind::Chain, n, k, seed)?.into_problem()?;
        let lg = ElimState::new(
            &problem.graph,
            &problem.k_per_op(),
            &problem.tables,
            ElimOptions::default(),
        )?
        .into_linear()?;
        let ldp_seconds = time_secs(|| ldp(&lg, &workers).map(|_| ()))?;
        let ft_elimination_seconds = time_secs(|| ft_elimination(&lg, &workers).map(|_| ()))?;
        rows.push(BenchRow { k, ldp_seconds, ft_elimination_seconds });
    }
    Ok(rows)
}

fn run_bench(spec: &RunSpec) -> Result<i32> {
    let ks: Vec<usize> = if spec.counts.is_empty() {
        vec![8, 16, 32]
    } else {
        spec.counts.iter().map(|&c| c as usize).collect()
    };
    let rows = bench_linear(&ks, 16, spec.seed, spec.threads)?;
    let mut text = String::from("k,ldp_seconds,ft_elimination_seconds,ratio\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.2}\n",
            r.k,
            r.ldp_seconds,
            r.ft_elimination_seconds,
            r.ratio()
        ));
    }
    emit(&spec.out, &text)?;
    Ok(EXIT_OK)
}

/// Writes `graph.json`, `devices.json` and `costs.json` into a directory.
pub fn write_fixture(fixture: &Fixture, dir: &Path) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let paths = [dir.join("graph.json"), dir.join("devices.json"), dir.join("costs.json")];
    let payloads = [
        serde_json::to_string_pretty(&fixture.graph).expect("serializes"),
        serde_json::to_string_pretty(&fixture.devices).expect("serializes"),
        serde_json::to_string_pretty(&fixture.costs).expect("serializes"),
    ];
    for (path, payload) in paths.iter().zip(payloads) {
        fs::write(path, payload).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(paths)
}

/// Frontier staircase check used by the emission tests and the acceptance
/// suite: memory strictly increases, time strictly decreases.
pub fn is_staircase(frontier: &Frontier) -> bool {
    frontier
        .tuples()
        .windows(2)
        .all(|w| w[0].memory < w[1].memory && w[0].time > w[1].time)
}
