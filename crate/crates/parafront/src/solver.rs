//! Frontier computation: the linear dynamic program over cumulative
//! frontiers, the node-elimination baseline, the end-to-end driver, strategy
//! unrolling, the brute-force oracle, and the strategy-search options built
//! on top of the frontier.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::ConfigSpace;
use crate::costmodel::{build_cost_tables, CostFile, CostSource, CostTables, SyntheticOpModel};
use crate::eliminate::{ElimKind, ElimOptions, ElimRecord, ElimState, LinearGraph};
pub use crate::eliminate::Workers;
use crate::error::{Error, Result};
use crate::frontier::{combine3, product_tuples, reduce, Assignment, CombineGroup, Frontier, StrategyTuple};
use crate::graph::{ComputationGraph, DeviceGraph, OpId};

/// A fully assembled search problem: graph, devices, configuration space and
/// complete cost tables over it.
pub struct Problem {
    pub graph: ComputationGraph,
    pub devices: DeviceGraph,
    pub space: ConfigSpace,
    pub tables: CostTables,
}

impl Problem {
    /// Builds the configuration space and cost tables. With a cost file, each
    /// operator's space is truncated to the file's configuration count and
    /// the file must cover every key; without one, the synthetic model fills
    /// the tables.
    pub fn assemble(
        graph: ComputationGraph,
        devices: DeviceGraph,
        costs: Option<&CostFile>,
        max_rank: usize,
    ) -> Result<Problem> {
        graph.validate()?;
        devices.validate()?;
        let mut space = ConfigSpace::build(&graph.operators, devices.device_count, max_rank);
        let tables = match costs {
            Some(file) => {
                let k_map = file.k_per_op();
                for (pos, op) in graph.operators.iter().enumerate() {
                    let k = *k_map
                        .get(&op.id)
                        .ok_or_else(|| Error::MissingCost(format!("op {}", op.id)))?;
                    if k > space.per_op[pos].len() {
                        return Err(Error::Validation(format!(
                            "cost file lists {k} configs for operator {} but only {} are valid",
                            op.id,
                            space.per_op[pos].len()
                        )));
                    }
                    space.per_op[pos].truncate(k);
                }
                build_cost_tables(&graph, &space, &devices, &CostSource::File(file))?
            }
            None => build_cost_tables(
                &graph,
                &space,
                &devices,
                &CostSource::Synthetic(SyntheticOpModel::default()),
            )?,
        };
        Ok(Problem { graph, devices, space, tables })
    }

    pub fn k_per_op(&self) -> Vec<usize> {
        self.space.per_op.iter().map(Vec::len).collect()
    }

    pub fn strategy_count(&self) -> u128 {
        self.space.per_op.iter().map(|c| c.len() as u128).product()
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub threads: usize,
    pub elim: ElimOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { threads: 1, elim: ElimOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ElimCounts {
    pub node: usize,
    pub edge: usize,
    pub branch: usize,
    pub heuristic: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct RunStats {
    pub eliminations: ElimCounts,
    pub ldp_steps: usize,
    pub heuristic_count: usize,
}

/// The frontier of full strategies over the original graph. Every tuple's
/// strategy assigns exactly one configuration to every operator.
pub struct FrontierResult {
    pub frontier: Frontier,
    pub stats: RunStats,
    pub log: Vec<ElimRecord>,
}

/// Cumulative-frontier dynamic program over a linear graph.
///
/// `CF(o_1, k)` starts as the operator frontier; step `i` unions, over the
/// predecessor's configurations, the product of the connecting edge frontier,
/// the predecessor's cumulative frontier and the operator frontier, reduced
/// per configuration. The answer reduces the union of the last operator's
/// cumulative frontiers.
pub fn ldp(lg: &LinearGraph, workers: &Workers) -> Result<Frontier> {
    Ok(ldp_with_cumulative(lg, workers)?.0)
}

pub(crate) fn ldp_with_cumulative(
    lg: &LinearGraph,
    workers: &Workers,
) -> Result<(Frontier, Vec<Vec<Frontier>>)> {
    let n = lg.n();
    if n == 0 {
        return Ok((Frontier::empty(), Vec::new()));
    }
    let mut steps: Vec<Vec<Frontier>> = Vec::with_capacity(n);
    steps.push(lg.op_frontiers[0].clone());
    for i in 1..n {
        let prev = &steps[i - 1];
        let edge = &lg.edge_frontiers[i - 1];
        let ops = &lg.op_frontiers[i];
        let k_prev = prev.len();
        let cf = workers.map(lg.k(i), |p| {
            let groups: Vec<CombineGroup<'_>> = (0..k_prev)
                .map(|k| CombineGroup { tag: k as u32, a: &edge[k][p], b: &prev[k], c: &ops[p] })
                .collect();
            Ok(combine3(&groups)?.0)
        })?;
        steps.push(cf);
    }
    let mut all = Vec::new();
    for f in steps.last().expect("n >= 1") {
        all.extend(f.tuples().iter().cloned());
    }
    Ok((reduce(all), steps))
}

/// Same recurrence without the intermediate reduces; exponential, test-only.
#[cfg(test)]
pub(crate) fn ldp_unpruned(lg: &LinearGraph) -> Result<Frontier> {
    let n = lg.n();
    if n == 0 {
        return Ok(Frontier::empty());
    }
    let mut prev: Vec<Vec<StrategyTuple>> =
        lg.op_frontiers[0].iter().map(|f| f.tuples().to_vec()).collect();
    for i in 1..n {
        let mut next = Vec::with_capacity(lg.k(i));
        for p in 0..lg.k(i) {
            let mut acc = Vec::new();
            for (k, prev_tuples) in prev.iter().enumerate() {
                let lhs = product_tuples(lg.edge_frontiers[i - 1][k][p].tuples(), prev_tuples)?;
                acc.extend(product_tuples(&lhs, lg.op_frontiers[i][p].tuples())?);
            }
            next.push(acc);
        }
        prev = next;
    }
    Ok(reduce(prev.into_iter().flatten().collect()))
}

/// Baseline that node-eliminates the second operator until two remain, then
/// brute-forces the configuration pairs. Same (memory, time) frontier as
/// [`ldp`], higher complexity; kept for benchmarking against it.
pub fn ft_elimination(lg: &LinearGraph, workers: &Workers) -> Result<Frontier> {
    let n = lg.n();
    if n < 2 {
        return Err(Error::NotLinear);
    }
    let mut ops: Vec<Vec<Frontier>> = lg.op_frontiers.clone();
    let mut edges: Vec<Vec<Vec<Frontier>>> = lg.edge_frontiers.clone();
    while ops.len() > 2 {
        let left = &edges[0];
        let mid = &ops[1];
        let right = &edges[1];
        let (k_h, k_i, k_j) = (ops[0].len(), ops[1].len(), ops[2].len());
        let cells = workers.map(k_h * k_j, |cell| {
            let (w, p) = (cell / k_j, cell % k_j);
            let groups: Vec<CombineGroup<'_>> = (0..k_i)
                .map(|k| CombineGroup { tag: k as u32, a: &left[w][k], b: &mid[k], c: &right[k][p] })
                .collect();
            Ok(combine3(&groups)?.0)
        })?;
        let mut grid = Vec::with_capacity(k_h);
        let mut iter = cells.into_iter();
        for _ in 0..k_h {
            grid.push((0..k_j).map(|_| iter.next().expect("cell count")).collect());
        }
        ops.remove(1);
        edges.remove(0);
        edges[0] = grid;
    }
    let mut all = Vec::new();
    for (w, left) in ops[0].iter().enumerate() {
        for (p, right) in ops[1].iter().enumerate() {
            let lhs = product_tuples(left.tuples(), edges[0][w][p].tuples())?;
            all.extend(product_tuples(&lhs, right.tuples())?);
        }
    }
    Ok(reduce(all))
}

/// Checks that every frontier tuple assigns exactly one configuration to
/// every operator of the graph, and returns the strategies.
pub fn unroll(frontier: &Frontier, g: &ComputationGraph) -> Result<Vec<Vec<Assignment>>> {
    let expected: BTreeSet<OpId> = g.operators.iter().map(|o| o.id).collect();
    let mut out = Vec::with_capacity(frontier.len());
    for t in frontier.tuples() {
        if t.strategy.len() != expected.len()
            || !t.strategy.iter().map(|&(op, _)| op).eq(expected.iter().copied())
        {
            return Err(Error::BrokenProvenance(format!(
                "strategy covers {} of {} operators",
                t.strategy.len(),
                expected.len()
            )));
        }
        out.push(t.strategy.clone());
    }
    Ok(out)
}

/// End-to-end frontier tracking: initialize per-entity frontiers, eliminate
/// down to the linear backbone, run the dynamic program and unroll.
pub fn ft(problem: &Problem, opts: &SolveOptions) -> Result<FrontierResult> {
    let workers = Workers::new(opts.threads.max(1))?;
    let k_per_op = problem.k_per_op();
    let mut st = ElimState::new(&problem.graph, &k_per_op, &problem.tables, opts.elim.clone())?;
    st.run_eliminations(&workers)?;

    let counts = st.elimination_counts();
    let stats_counts = ElimCounts {
        node: counts[&ElimKind::Node],
        edge: counts[&ElimKind::Edge],
        branch: counts[&ElimKind::Branch],
        heuristic: counts[&ElimKind::Heuristic],
    };
    let heuristic_count = st.heuristic_count();
    let log = st.log.clone();
    let lg = st.into_linear()?;
    let stats = RunStats { eliminations: stats_counts, ldp_steps: lg.n(), heuristic_count };
    let frontier = ldp(&lg, &workers)?;
    unroll(&frontier, &problem.graph)?;
    Ok(FrontierResult { frontier, stats, log })
}

/// Enumerates every full strategy, evaluates the additive totals, and keeps
/// the non-dominated set. The dominance sweep here is written independently
/// of the frontier algebra so the two paths can check each other.
pub fn brute_force(problem: &Problem, limit: u128) -> Result<Frontier> {
    let g = &problem.graph;
    let k_per_op = problem.k_per_op();
    let total: u128 = k_per_op.iter().map(|&k| k as u128).product();
    if total > limit {
        return Err(Error::TooLarge { strategies: total, limit });
    }
    let n = g.operators.len();
    let mem: Vec<Vec<f64>> = problem
        .tables
        .op_costs
        .iter()
        .map(|row| row.iter().map(|c| c.memory()).collect())
        .collect();
    let time: Vec<Vec<f64>> = problem
        .tables
        .op_costs
        .iter()
        .map(|row| row.iter().map(|c| c.time()).collect())
        .collect();
    let pos_of: BTreeMap<OpId, usize> =
        g.operators.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let edges: Vec<(usize, usize, &Vec<Vec<f64>>)> = g
        .edges
        .iter()
        .map(|e| (pos_of[&e.src], pos_of[&e.dst], &problem.tables.edge_costs[&e.id]))
        .collect();

    let decode = |idx: u128, digits: &mut Vec<u32>| {
        digits.clear();
        let mut rest = idx;
        for &k in k_per_op.iter().rev() {
            digits.push((rest % k as u128) as u32);
            rest /= k as u128;
        }
        digits.reverse();
    };

    // Running frontier of (memory, time, enumeration index); strategies are
    // only materialized for the survivors at the end.
    let mut running: Vec<(f64, f64, u128)> = Vec::new();
    let mut chunk: Vec<(f64, f64, u128)> = Vec::new();
    let mut digits = Vec::with_capacity(n);
    const CHUNK: u128 = 1 << 16;
    let mut idx = 0u128;
    while idx < total {
        chunk.clear();
        let end = (idx + CHUNK).min(total);
        while idx < end {
            decode(idx, &mut digits);
            let mut m = 0.0;
            let mut t = 0.0;
            for (pos, &cfg) in digits.iter().enumerate() {
                m += mem[pos][cfg as usize];
                t += time[pos][cfg as usize];
            }
            for &(src, dst, grid) in &edges {
                t += grid[digits[src] as usize][digits[dst] as usize];
            }
            chunk.push((m, t, idx));
            idx += 1;
        }
        running.extend_from_slice(&chunk);
        running.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let mut kept = Vec::new();
        let mut best = f64::INFINITY;
        for &c in &running {
            if c.1 < best {
                best = c.1;
                kept.push(c);
            }
        }
        running = kept;
    }

    let mut tuples = Vec::with_capacity(running.len());
    for (m, t, idx) in running {
        decode(idx, &mut digits);
        let mut strategy: Vec<Assignment> = g
            .operators
            .iter()
            .enumerate()
            .map(|(pos, o)| (o.id, digits[pos]))
            .collect();
        strategy.sort_by_key(|&(op, _)| op);
        tuples.push(StrategyTuple::new(strategy, m, t));
    }
    Ok(reduce(tuples))
}

/// Outcome of the time-minimizing search under a memory budget. Infeasible is
/// a result, not an error: schedulers consume it.
#[derive(Clone, Debug)]
pub enum MiniTime {
    Feasible(StrategyTuple),
    Infeasible,
}

/// Smallest-time frontier point whose memory fits the budget.
pub fn mini_time(problem: &Problem, opts: &SolveOptions, memory_limit: f64) -> Result<MiniTime> {
    let result = ft(problem, opts)?;
    Ok(match result.frontier.best_time_within(memory_limit) {
        Some(t) => MiniTime::Feasible(t.clone()),
        None => MiniTime::Infeasible,
    })
}

pub struct ParallelismChoice {
    pub device_count: u64,
    pub tuple: StrategyTuple,
    pub result: FrontierResult,
}

/// Smallest candidate device count whose minimum-memory strategy fits the
/// per-device budget. The problem is rebuilt per count: the configuration
/// space changes with the device count.
pub fn mini_parallelism(
    build: impl Fn(u64) -> Result<Problem>,
    per_device_memory: f64,
    counts: &[u64],
    opts: &SolveOptions,
) -> Result<ParallelismChoice> {
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    for count in counts {
        let problem = build(count)?;
        let result = ft(&problem, opts)?;
        if let Some(t) = result.frontier.min_memory() {
            if t.memory <= per_device_memory {
                return Ok(ParallelismChoice { device_count: count, tuple: t.clone(), result });
            }
        }
    }
    Err(Error::NoFeasibleCount)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub device_count: u64,
    /// Minimum per-iteration time under the memory budget; `None` when no
    /// strategy fits.
    pub min_time: Option<f64>,
}

/// The parallelism/time curve: minimum feasible time per candidate count.
pub fn profile(
    build: impl Fn(u64) -> Result<Problem>,
    per_device_memory: f64,
    counts: &[u64],
    opts: &SolveOptions,
) -> Result<Vec<ProfileRow>> {
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    let mut rows = Vec::with_capacity(counts.len());
    for count in counts {
        let problem = build(count)?;
        let result = ft(&problem, opts)?;
        let min_time = result.frontier.best_time_within(per_device_memory).map(|t| t.time);
        rows.push(ProfileRow { device_count: count, min_time });
    }
    Ok(rows)
}
