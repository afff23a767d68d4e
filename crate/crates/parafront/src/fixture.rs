//! Deterministic synthetic problems: desk-scale graph shapes (chains,
//! residual blocks, shared-input fans) with seeded integer cost tables.
//! These drive the CLI demo modes, the oracle checks and the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{CostFile, EdgeCostEntry, OpCostEntry};
use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, DeviceGraph, Edge, EdgeId, OpId, Operator};
use crate::solver::Problem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    /// A plain operator chain of length `n`.
    Chain,
    /// `n` residual blocks: body plus skip edge; reducible by node and edge
    /// eliminations alone.
    Residual,
    /// A chain of `max(n, 2)` blocks that all read one shared source, which
    /// only heuristic elimination can remove.
    SharedInput,
}

/// A generated problem: graph, devices and a complete integer cost table.
pub struct Fixture {
    pub graph: ComputationGraph,
    pub devices: DeviceGraph,
    pub costs: CostFile,
}

impl Fixture {
    pub fn into_problem(self) -> Result<Problem> {
        Problem::assemble(self.graph, self.devices, Some(&self.costs), 2)
    }
}

const FIXTURE_DEVICES: u64 = 4;

fn op(id: OpId, name: &str) -> Operator {
    // Two 16x16 tensors give 58 valid configurations on 4 devices, enough
    // headroom for every truncated space the fixtures ask for.
    Operator::new(id, name, vec![vec![16, 16], vec![16, 16]])
}

fn edge(id: EdgeId, src: OpId, dst: OpId) -> Edge {
    Edge { id, src, dst, tensor_shape: vec![16, 16] }
}

/// Deterministic synthetic graph plus seeded integer costs: operator costs in
/// [0, 50] per component, edge transfer times in [0, 100]. Same inputs, same
/// fixture, byte for byte.
pub fn gen_fixture(kind: FixtureKind, n: usize, k: usize, seed: u64) -> Result<Fixture> {
    if n < 1 || k < 1 {
        return Err(Error::Validation("fixture needs n >= 1 and k >= 1".into()));
    }
    let (mut operators, edges) = match kind {
        FixtureKind::Chain => {
            let ops: Vec<Operator> = (0..n as OpId).map(|i| op(i, &format!("op{i}"))).collect();
            let edges = (1..n as OpId).map(|i| edge(i - 1, i - 1, i)).collect();
            (ops, edges)
        }
        FixtureKind::Residual => {
            // x0, then per block i: body f_i and join x_{i+1}, with a skip
            // edge x_i -> x_{i+1}.
            let mut ops = vec![op(0, "x0")];
            let mut edges = Vec::new();
            let mut eid = 0;
            for i in 0..n as OpId {
                let x = 2 * i;
                let f = 2 * i + 1;
                let x_next = 2 * i + 2;
                ops.push(op(f, &format!("f{i}")));
                ops.push(op(x_next, &format!("x{}", i + 1)));
                edges.push(edge(eid, x, f));
                edges.push(edge(eid + 1, f, x_next));
                edges.push(edge(eid + 2, x, x_next));
                eid += 3;
            }
            (ops, edges)
        }
        FixtureKind::SharedInput => {
            // A single consumer would be branch-eliminable; two or more force
            // the heuristic step this fixture exists to exercise.
            let blocks = n.max(2) as OpId;
            let shared = blocks + 1;
            let mut ops = vec![op(0, "start")];
            let mut edges = vec![edge(0, 0, 1)];
            for b in 1..=blocks {
                ops.push(op(b, &format!("block{b}")));
                if b >= 2 {
                    edges.push(edge(b - 1, b - 1, b));
                }
            }
            ops.push(op(shared, "shared"));
            for b in 1..=blocks {
                edges.push(edge(blocks + b - 1, shared, b));
            }
            (ops, edges)
        }
    };
    for o in &mut operators {
        // Sources and sinks double as the model input and output.
        let id = o.id;
        if !edges.iter().any(|e: &Edge| e.dst == id) {
            *o = o.clone().input();
        }
        if !edges.iter().any(|e: &Edge| e.src == id) {
            *o = o.clone().output();
        }
    }
    let graph = ComputationGraph::new(operators, edges)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut costs = CostFile::default();
    for o in &graph.operators {
        for cfg in 0..k as u32 {
            costs.op_costs.push(OpCostEntry {
                op: o.id,
                cfg,
                m_p: f64::from(rng.gen_range(0..=50u32)),
                m_t: f64::from(rng.gen_range(0..=50u32)),
                t_c: f64::from(rng.gen_range(0..=50u32)),
                t_s: f64::from(rng.gen_range(0..=50u32)),
            });
        }
    }
    for e in &graph.edges {
        for src_cfg in 0..k as u32 {
            for dst_cfg in 0..k as u32 {
                costs.edge_costs.push(EdgeCostEntry {
                    edge: e.id,
                    src_cfg,
                    dst_cfg,
                    t_x: f64::from(rng.gen_range(0..=100u32)),
                });
            }
        }
    }

    let devices = DeviceGraph::synthetic(FIXTURE_DEVICES, 5e-6, 12.0e9);
    Ok(Fixture { graph, devices, costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{brute_force, ft, SolveOptions};

    #[test]
    fn same_seed_same_fixture() {
        let a = gen_fixture(FixtureKind::Chain, 3, 2, 7).unwrap();
        let b = gen_fixture(FixtureKind::Chain, 3, 2, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a.graph).unwrap(),
            serde_json::to_string(&b.graph).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.costs).unwrap(),
            serde_json::to_string(&b.costs).unwrap()
        );
        let c = gen_fixture(FixtureKind::Chain, 3, 2, 8).unwrap();
        assert_ne!(
            serde_json::to_string(&a.costs).unwrap(),
            serde_json::to_string(&c.costs).unwrap()
        );
    }

    #[test]
    fn residual_fixture_solves_without_heuristics() {
        let problem = gen_fixture(FixtureKind::Residual, 2, 3, 11).unwrap().into_problem().unwrap();
        let result = ft(&problem, &SolveOptions::default()).unwrap();
        assert_eq!(result.stats.heuristic_count, 0);
        let oracle = brute_force(&problem, 1 << 24).unwrap();
        let costs = |f: &crate::frontier::Frontier| -> Vec<(f64, f64)> {
            f.tuples().iter().map(|t| (t.memory, t.time)).collect()
        };
        assert_eq!(costs(&result.frontier), costs(&oracle));
    }

    #[test]
    fn shared_input_fixture_needs_exactly_one_heuristic() {
        for n in [1usize, 2, 3] {
            let problem =
                gen_fixture(FixtureKind::SharedInput, n, 2, 13).unwrap().into_problem().unwrap();
            let result = ft(&problem, &SolveOptions::default()).unwrap();
            assert_eq!(result.stats.heuristic_count, 1, "n={n}");
        }
    }

    #[test]
    fn fixture_rejects_oversized_k() {
        // 58 valid configurations exist for the fixture operators.
        assert!(gen_fixture(FixtureKind::Chain, 2, 58, 0).unwrap().into_problem().is_ok());
        assert!(gen_fixture(FixtureKind::Chain, 2, 59, 0).unwrap().into_problem().is_err());
    }
}
