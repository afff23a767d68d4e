//! Graph-simplification procedures that reduce an arbitrary DAG to the marked
//! linear backbone while maintaining per-operator and per-edge cost frontiers:
//! node, edge and branch elimination preserve the exact frontier; heuristic
//! elimination fixes one operator's configuration and loses exactness.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::Serialize;

use crate::costmodel::CostTables;
use crate::error::{Error, Result};
use crate::frontier::{combine3, product_tuples, reduce, CombineGroup, Frontier, StrategyTuple};
use crate::graph::{ComputationGraph, EdgeId, OpId};

/// Worker pool shared by eliminations and the dynamic program. Results are
/// merged in index order, so the output does not depend on the thread count.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Validation(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Workers { pool })
    }

    pub fn map<T: Send>(
        &self,
        n: usize,
        f: impl Fn(usize) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

/// How heuristic elimination picks the configuration it fixes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeuristicPolicy {
    /// Smallest achievable memory for the operator.
    MinMemory,
    /// `alpha * normalized memory + (1 - alpha) * normalized time`.
    Weighted(f64),
}

#[derive(Clone, Debug)]
pub struct ElimOptions {
    pub policy: HeuristicPolicy,
    /// Hard cap on a composite configuration space created by branch
    /// elimination; exceeding it is an error rather than a silent blowup.
    pub composite_cap: usize,
    /// Randomizes the first-operator tie-break of backbone marking.
    pub marking_seed: Option<u64>,
}

impl Default for ElimOptions {
    fn default() -> Self {
        ElimOptions { policy: HeuristicPolicy::MinMemory, composite_cap: 4096, marking_seed: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ElimKind {
    Node,
    Edge,
    Branch,
    Heuristic,
}

/// One elimination event. `choices` records, per produced frontier tuple (in
/// deterministic key-then-tuple order), the configuration the eliminated
/// operator took to generate it; edge elimination removes no operator and
/// records none.
#[derive(Clone, Debug)]
pub struct ElimRecord {
    pub kind: ElimKind,
    pub eliminated: Vec<u64>,
    pub new_entity: Option<u64>,
    pub choices: Vec<u32>,
    pub records: usize,
}

#[derive(Clone, Debug)]
struct WorkEdge {
    src: usize,
    dst: usize,
}

/// Mutable elimination state: the working graph plus the per-entity frontiers
/// and the elimination log.
pub struct ElimState {
    op_ids: Vec<OpId>,
    alive: Vec<bool>,
    k: Vec<usize>,
    edges: BTreeMap<EdgeId, WorkEdge>,
    in_edges: Vec<BTreeSet<EdgeId>>,
    out_edges: Vec<BTreeSet<EdgeId>>,
    op_frontiers: Vec<Vec<Frontier>>,
    edge_frontiers: BTreeMap<EdgeId, Vec<Vec<Frontier>>>,
    marked: BTreeSet<usize>,
    pinned_first: usize,
    next_edge_id: EdgeId,
    pub log: Vec<ElimRecord>,
    /// Operators folded into each surviving operator by branch elimination.
    pub composite_spaces: BTreeMap<OpId, Vec<OpId>>,
    options: ElimOptions,
}

impl ElimState {
    /// Initializes singleton frontiers from the cost tables: one tuple per
    /// (operator, configuration) and per (edge, configuration pair).
    pub fn new(
        g: &ComputationGraph,
        k_per_op: &[usize],
        tables: &CostTables,
        options: ElimOptions,
    ) -> Result<ElimState> {
        assert_eq!(k_per_op.len(), g.operators.len());
        let op_ids: Vec<OpId> = g.operators.iter().map(|o| o.id).collect();
        let pos_of: BTreeMap<OpId, usize> =
            op_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let mut op_frontiers = Vec::with_capacity(op_ids.len());
        for (pos, &id) in op_ids.iter().enumerate() {
            let mut per_cfg = Vec::with_capacity(k_per_op[pos]);
            for cfg in 0..k_per_op[pos] {
                let c = tables.op_cost(pos, cfg);
                per_cfg.push(Frontier::singleton(StrategyTuple::new(
                    vec![(id, cfg as u32)],
                    c.memory(),
                    c.time(),
                )));
            }
            op_frontiers.push(per_cfg);
        }

        let mut edges = BTreeMap::new();
        let mut edge_frontiers = BTreeMap::new();
        let mut in_edges = vec![BTreeSet::new(); op_ids.len()];
        let mut out_edges = vec![BTreeSet::new(); op_ids.len()];
        let mut next_edge_id = 0;
        for e in &g.edges {
            let (src, dst) = (pos_of[&e.src], pos_of[&e.dst]);
            let mut grid = Vec::with_capacity(k_per_op[src]);
            for k in 0..k_per_op[src] {
                let mut row = Vec::with_capacity(k_per_op[dst]);
                for p in 0..k_per_op[dst] {
                    let t = tables.transfer(e.id, k, p)?.time_transfer;
                    row.push(Frontier::singleton(StrategyTuple::empty(0.0, t)));
                }
                grid.push(row);
            }
            edges.insert(e.id, WorkEdge { src, dst });
            edge_frontiers.insert(e.id, grid);
            in_edges[dst].insert(e.id);
            out_edges[src].insert(e.id);
            next_edge_id = next_edge_id.max(e.id + 1);
        }

        let backbone = match options.marking_seed {
            Some(seed) => crate::graph::mark_backbone_seeded(g, seed)?,
            None => crate::graph::mark_backbone(g)?,
        };
        let pinned_first = pos_of[backbone
            .marked
            .first()
            .ok_or_else(|| Error::Validation("cannot solve an empty graph".into()))?];

        let mut st = ElimState {
            op_ids,
            alive: vec![true; g.operators.len()],
            k: k_per_op.to_vec(),
            edges,
            in_edges,
            out_edges,
            op_frontiers,
            edge_frontiers,
            marked: BTreeSet::new(),
            pinned_first,
            next_edge_id,
            log: Vec::new(),
            composite_spaces: BTreeMap::new(),
            options,
        };
        st.refresh_marking();
        Ok(st)
    }

    pub fn heuristic_count(&self) -> usize {
        self.log.iter().filter(|r| r.kind == ElimKind::Heuristic).count()
    }

    pub fn elimination_counts(&self) -> BTreeMap<ElimKind, usize> {
        let mut counts = BTreeMap::new();
        for kind in [ElimKind::Node, ElimKind::Edge, ElimKind::Branch, ElimKind::Heuristic] {
            counts.insert(kind, 0);
        }
        for r in &self.log {
            *counts.get_mut(&r.kind).expect("all kinds present") += 1;
        }
        counts
    }

    fn entity_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count() + self.edges.len()
    }

    fn distinct_succs(&self, pos: usize) -> BTreeSet<usize> {
        self.out_edges[pos].iter().map(|e| self.edges[e].dst).collect()
    }

    /// Extends the mark from the pinned first operator along the
    /// unique-downstream chain of the working graph.
    fn refresh_marking(&mut self) {
        let mut marked = vec![self.pinned_first];
        let mut seen: BTreeSet<usize> = marked.iter().copied().collect();
        loop {
            let last = *marked.last().expect("non-empty");
            let down = self.distinct_succs(last);
            if down.len() != 1 {
                break;
            }
            let next = *down.iter().next().expect("len checked");
            if !seen.insert(next) {
                break;
            }
            marked.push(next);
        }
        self.marked = marked.into_iter().collect();
    }

    /// Topological order of alive operators, ties by ascending operator id.
    fn work_topo_order(&self) -> Vec<usize> {
        let mut indegree: BTreeMap<usize, usize> = self
            .alive
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(pos, _)| (pos, self.in_edges[pos].len()))
            .collect();
        let mut ready: BinaryHeap<Reverse<(OpId, usize)>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&pos, _)| Reverse((self.op_ids[pos], pos)))
            .collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(Reverse((_, pos))) = ready.pop() {
            order.push(pos);
            for e in &self.out_edges[pos] {
                let dst = self.edges[e].dst;
                let d = indegree.get_mut(&dst).expect("alive dst");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse((self.op_ids[dst], dst)));
                }
            }
        }
        debug_assert_eq!(order.len(), indegree.len(), "working graph stays acyclic");
        order
    }

    fn remove_edge(&mut self, id: EdgeId) {
        let e = self.edges.remove(&id).expect("edge exists");
        self.in_edges[e.dst].remove(&id);
        self.out_edges[e.src].remove(&id);
        self.edge_frontiers.remove(&id);
    }

    fn insert_edge(&mut self, src: usize, dst: usize, grid: Vec<Vec<Frontier>>) -> EdgeId {
        let id = self.next_edge_id;
        self.next_edge_id += 1;
        self.edges.insert(id, WorkEdge { src, dst });
        self.in_edges[dst].insert(id);
        self.out_edges[src].insert(id);
        self.edge_frontiers.insert(id, grid);
        id
    }

    fn remove_op(&mut self, pos: usize) {
        debug_assert!(self.in_edges[pos].is_empty() && self.out_edges[pos].is_empty());
        self.alive[pos] = false;
    }

    fn pos_of_id(&self, id: OpId) -> Result<usize> {
        self.op_ids
            .iter()
            .position(|&x| x == id)
            .filter(|&p| self.alive[p])
            .ok_or_else(|| Error::PreconditionViolated(format!("operator {id} is not alive")))
    }

    /// Folds an operator with one input edge and one output edge into a fresh
    /// edge connecting its neighbors. For every neighbor configuration pair,
    /// the new frontier unions over the eliminated operator's configurations
    /// the product of the two edge frontiers and the operator frontier.
    pub fn node_eliminate(&mut self, op: OpId, workers: &Workers) -> Result<()> {
        let i = self.pos_of_id(op)?;
        if self.marked.contains(&i) {
            return Err(Error::PreconditionViolated(format!("operator {op} is marked")));
        }
        if self.in_edges[i].len() != 1 || self.out_edges[i].len() != 1 {
            return Err(Error::PreconditionViolated(format!(
                "operator {op} needs exactly one input and one output edge"
            )));
        }
        let e_in = *self.in_edges[i].iter().next().expect("len checked");
        let e_out = *self.out_edges[i].iter().next().expect("len checked");
        let h = self.edges[&e_in].src;
        let j = self.edges[&e_out].dst;
        let (k_h, k_i, k_j) = (self.k[h], self.k[i], self.k[j]);

        let before = self.entity_count();
        let in_grid = &self.edge_frontiers[&e_in];
        let out_grid = &self.edge_frontiers[&e_out];
        let op_fr = &self.op_frontiers[i];
        let cells = workers.map(k_h * k_j, |cell| {
            let (w, p) = (cell / k_j, cell % k_j);
            let groups: Vec<CombineGroup<'_>> = (0..k_i)
                .map(|k| CombineGroup {
                    tag: k as u32,
                    a: &in_grid[w][k],
                    b: &op_fr[k],
                    c: &out_grid[k][p],
                })
                .collect();
            combine3(&groups)
        })?;

        let mut grid = Vec::with_capacity(k_h);
        let mut choices = Vec::new();
        let mut records = 0;
        let mut iter = cells.into_iter();
        for _ in 0..k_h {
            let mut row = Vec::with_capacity(k_j);
            for _ in 0..k_j {
                let (f, tags) = iter.next().expect("cell count");
                records += f.len();
                choices.extend(tags);
                row.push(f);
            }
            grid.push(row);
        }

        self.remove_edge(e_in);
        self.remove_edge(e_out);
        self.remove_op(i);
        let new_edge = self.insert_edge(h, j, grid);
        self.log.push(ElimRecord {
            kind: ElimKind::Node,
            eliminated: vec![op],
            new_entity: Some(new_edge),
            choices,
            records,
        });
        debug_assert!(self.entity_count() < before);
        Ok(())
    }

    /// Merges all parallel edges between one operator pair into a fresh edge
    /// whose frontier is the product of the member frontiers per
    /// configuration pair.
    pub fn edge_eliminate(&mut self, edge_ids: &[EdgeId], workers: &Workers) -> Result<()> {
        if edge_ids.len() < 2 {
            return Err(Error::PreconditionViolated(
                "edge elimination needs at least two parallel edges".into(),
            ));
        }
        let mut ids = edge_ids.to_vec();
        ids.sort_unstable();
        let first = self
            .edges
            .get(&ids[0])
            .ok_or_else(|| Error::PreconditionViolated(format!("edge {} is not alive", ids[0])))?;
        let (src, dst) = (first.src, first.dst);
        for id in &ids {
            let e = self
                .edges
                .get(id)
                .ok_or_else(|| Error::PreconditionViolated(format!("edge {id} is not alive")))?;
            if (e.src, e.dst) != (src, dst) {
                return Err(Error::PreconditionViolated(
                    "parallel edges must share source and destination".into(),
                ));
            }
        }
        let (k_s, k_d) = (self.k[src], self.k[dst]);

        let before = self.entity_count();
        let grids: Vec<&Vec<Vec<Frontier>>> =
            ids.iter().map(|id| &self.edge_frontiers[id]).collect();
        let cells = workers.map(k_s * k_d, |cell| {
            let (k, p) = (cell / k_d, cell % k_d);
            let mut acc = grids[0][k][p].tuples().to_vec();
            for g in &grids[1..] {
                acc = product_tuples(&acc, g[k][p].tuples())?;
            }
            Ok(reduce(acc))
        })?;

        let mut grid = Vec::with_capacity(k_s);
        let mut iter = cells.into_iter();
        let mut records = 0;
        for _ in 0..k_s {
            let mut row = Vec::with_capacity(k_d);
            for _ in 0..k_d {
                let f = iter.next().expect("cell count");
                records += f.len();
                row.push(f);
            }
            grid.push(row);
        }

        for id in &ids {
            self.remove_edge(*id);
        }
        let new_edge = self.insert_edge(src, dst, grid);
        self.log.push(ElimRecord {
            kind: ElimKind::Edge,
            eliminated: ids,
            new_entity: Some(new_edge),
            choices: Vec::new(),
            records,
        });
        debug_assert!(self.entity_count() < before);
        Ok(())
    }

    /// Merges an operator whose only connection is a single edge into that
    /// edge's other endpoint. The receiver's configuration space becomes the
    /// composite space of the pair; composite index `p * k_merged + k`.
    pub fn branch_eliminate(&mut self, op: OpId, into: OpId, workers: &Workers) -> Result<()> {
        let i = self.pos_of_id(op)?;
        let h = self.pos_of_id(into)?;
        if self.marked.contains(&i) {
            return Err(Error::PreconditionViolated(format!("operator {op} is marked")));
        }
        if !self.in_edges[i].is_empty() || self.out_edges[i].len() != 1 {
            return Err(Error::PreconditionViolated(format!(
                "operator {op} must have a single outgoing edge and nothing else"
            )));
        }
        let e_ih = *self.out_edges[i].iter().next().expect("len checked");
        if self.edges[&e_ih].dst != h {
            return Err(Error::PreconditionViolated(format!(
                "operator {op} does not feed operator {into}"
            )));
        }
        let (k_h, k_i) = (self.k[h], self.k[i]);
        let composite = k_h
            .checked_mul(k_i)
            .ok_or(Error::SpaceExplosion { size: usize::MAX, cap: self.options.composite_cap })?;
        if composite > self.options.composite_cap {
            return Err(Error::SpaceExplosion { size: composite, cap: self.options.composite_cap });
        }

        let before = self.entity_count();
        let host_fr = &self.op_frontiers[h];
        let merged_fr = &self.op_frontiers[i];
        let edge_grid = &self.edge_frontiers[&e_ih];
        let cells = workers.map(composite, |c| {
            let (p, k) = (c / k_i, c % k_i);
            let group = CombineGroup {
                tag: k as u32,
                a: &host_fr[p],
                b: &merged_fr[k],
                c: &edge_grid[k][p],
            };
            combine3(std::slice::from_ref(&group))
        })?;
        let mut new_frontiers = Vec::with_capacity(composite);
        let mut choices = Vec::new();
        let mut records = 0;
        for (f, tags) in cells {
            records += f.len();
            choices.extend(tags);
            new_frontiers.push(f);
        }

        // Re-index every other edge touching the receiver to the composite
        // space: frontiers only depend on the host part of the composite.
        let touching: Vec<EdgeId> = self.in_edges[h]
            .iter()
            .chain(self.out_edges[h].iter())
            .copied()
            .filter(|id| *id != e_ih)
            .collect();
        for id in touching {
            let is_incoming = self.edges[&id].dst == h;
            let grid = self.edge_frontiers.get_mut(&id).expect("alive edge");
            if is_incoming {
                for row in grid.iter_mut() {
                    let mut new_row = Vec::with_capacity(composite);
                    for p in 0..k_h {
                        for _ in 0..k_i {
                            new_row.push(row[p].clone());
                        }
                    }
                    *row = new_row;
                }
            } else {
                let mut new_grid = Vec::with_capacity(composite);
                for p in 0..k_h {
                    for _ in 0..k_i {
                        new_grid.push(grid[p].clone());
                    }
                }
                *grid = new_grid;
            }
        }

        self.op_frontiers[h] = new_frontiers;
        self.k[h] = composite;
        self.remove_edge(e_ih);
        self.remove_op(i);

        let mut merged_ops = self.composite_spaces.remove(&op).unwrap_or_default();
        merged_ops.push(op);
        self.composite_spaces.entry(into).or_default().extend(merged_ops);
        self.log.push(ElimRecord {
            kind: ElimKind::Branch,
            eliminated: vec![op],
            new_entity: Some(into),
            choices,
            records,
        });
        debug_assert!(self.entity_count() < before);
        Ok(())
    }

    /// Picks a configuration for `op` by the policy, removes the operator
    /// with its outgoing edges, and folds the fixed edge rows into the
    /// downstream operator frontiers. The operator's own frontier is folded
    /// into its topologically first downstream operator exactly once, so
    /// strategy totals are conserved. Exactness is not.
    pub fn heuristic_eliminate(&mut self, op: OpId, workers: &Workers) -> Result<()> {
        let i = self.pos_of_id(op)?;
        if self.marked.contains(&i) {
            return Err(Error::PreconditionViolated(format!("operator {op} is marked")));
        }
        if !self.in_edges[i].is_empty() {
            return Err(Error::PreconditionViolated(format!(
                "operator {op} still has incoming edges"
            )));
        }
        if self.out_edges[i].is_empty() {
            return Err(Error::PreconditionViolated(format!(
                "operator {op} has no downstream operator to absorb its cost"
            )));
        }

        let chosen = self.pick_config(i);
        let before = self.entity_count();

        // Downstream operators in topological order; the first absorbs the
        // eliminated operator's own frontier.
        let topo = self.work_topo_order();
        let mut downstream: Vec<usize> = Vec::new();
        for e in &self.out_edges[i] {
            let dst = self.edges[e].dst;
            if !downstream.contains(&dst) {
                downstream.push(dst);
            }
        }
        downstream.sort_by_key(|pos| topo.iter().position(|x| x == pos).expect("alive"));

        let mut records = 0;
        let mut choices = Vec::new();
        for (idx, &j) in downstream.iter().enumerate() {
            let mut edge_ids: Vec<EdgeId> = self.out_edges[i]
                .iter()
                .copied()
                .filter(|e| self.edges[e].dst == j)
                .collect();
            edge_ids.sort_unstable();
            let own = &self.op_frontiers[i];
            let target = &self.op_frontiers[j];
            let grids: Vec<&Vec<Vec<Frontier>>> =
                edge_ids.iter().map(|e| &self.edge_frontiers[e]).collect();
            let fold_own = idx == 0;
            let updated = workers.map(self.k[j], |p| {
                let mut acc = target[p].tuples().to_vec();
                for g in &grids {
                    acc = product_tuples(&acc, g[chosen as usize][p].tuples())?;
                }
                if fold_own {
                    acc = product_tuples(&acc, own[chosen as usize].tuples())?;
                }
                Ok(reduce(acc))
            })?;
            for f in &updated {
                records += f.len();
                choices.extend(std::iter::repeat(chosen).take(f.len()));
            }
            self.op_frontiers[j] = updated;
        }

        let out: Vec<EdgeId> = self.out_edges[i].iter().copied().collect();
        for e in out {
            self.remove_edge(e);
        }
        self.remove_op(i);
        self.log.push(ElimRecord {
            kind: ElimKind::Heuristic,
            eliminated: vec![op],
            new_entity: None,
            choices,
            records,
        });
        debug_assert!(self.entity_count() < before);
        Ok(())
    }

    /// Policy objective over the operator's per-configuration frontiers,
    /// smallest configuration index on ties.
    fn pick_config(&self, pos: usize) -> u32 {
        let frontiers = &self.op_frontiers[pos];
        let objective = |f: &Frontier| -> f64 {
            match self.options.policy {
                HeuristicPolicy::MinMemory => {
                    f.min_memory().map(|t| t.memory).unwrap_or(f64::INFINITY)
                }
                HeuristicPolicy::Weighted(alpha) => {
                    let max_m = frontiers
                        .iter()
                        .flat_map(|f| f.tuples())
                        .map(|t| t.memory)
                        .fold(0.0, f64::max);
                    let max_t = frontiers
                        .iter()
                        .flat_map(|f| f.tuples())
                        .map(|t| t.time)
                        .fold(0.0, f64::max);
                    let norm = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
                    f.tuples()
                        .iter()
                        .map(|t| alpha * norm(t.memory, max_m) + (1.0 - alpha) * norm(t.time, max_t))
                        .fold(f64::INFINITY, f64::min)
                }
            }
        };
        let mut best = 0u32;
        let mut best_obj = f64::INFINITY;
        for (k, f) in frontiers.iter().enumerate() {
            let obj = objective(f);
            if obj < best_obj {
                best_obj = obj;
                best = k as u32;
            }
        }
        best
    }

    fn find_node_candidate(&self) -> Option<OpId> {
        self.work_topo_order().into_iter().find_map(|pos| {
            (!self.marked.contains(&pos)
                && self.in_edges[pos].len() == 1
                && self.out_edges[pos].len() == 1)
                .then(|| self.op_ids[pos])
        })
    }

    fn find_parallel_edges(&self) -> Option<Vec<EdgeId>> {
        let topo = self.work_topo_order();
        let rank: BTreeMap<usize, usize> = topo.iter().enumerate().map(|(r, &p)| (p, r)).collect();
        let mut groups: BTreeMap<(usize, usize), Vec<EdgeId>> = BTreeMap::new();
        for (&id, e) in &self.edges {
            groups.entry((rank[&e.src], rank[&e.dst])).or_default().push(id);
        }
        groups.into_values().find(|ids| ids.len() >= 2)
    }

    /// Receivers in topological order; among a receiver's mergeable inputs,
    /// the smallest configuration space wins to bound the composite blowup.
    fn find_branch_candidate(&self) -> Option<(OpId, OpId)> {
        for h in self.work_topo_order() {
            let mut candidates: Vec<usize> = self.in_edges[h]
                .iter()
                .map(|e| self.edges[e].src)
                .filter(|&i| {
                    !self.marked.contains(&i)
                        && self.in_edges[i].is_empty()
                        && self.out_edges[i].len() == 1
                })
                .collect();
            candidates.sort_by_key(|&i| (self.k[i], self.op_ids[i]));
            candidates.dedup();
            if let Some(&i) = candidates.first() {
                return Some((self.op_ids[i], self.op_ids[h]));
            }
        }
        None
    }

    /// Unmarked source with the most outgoing edges, ties by operator id.
    /// Sources only: an eliminated operator with incoming edges would strand
    /// their transfer costs.
    fn find_heuristic_candidate(&self) -> Option<OpId> {
        let mut best: Option<(usize, OpId)> = None;
        for pos in 0..self.op_ids.len() {
            if !self.alive[pos]
                || self.marked.contains(&pos)
                || !self.in_edges[pos].is_empty()
                || self.out_edges[pos].is_empty()
            {
                continue;
            }
            let fan_out = self.out_edges[pos].len();
            let id = self.op_ids[pos];
            let better = match best {
                Some((f, b)) => fan_out > f || (fan_out == f && id < b),
                None => true,
            };
            if better {
                best = Some((fan_out, id));
            }
        }
        best.map(|(_, id)| id)
    }

    /// Drives eliminations to a fixed point: marking is refreshed after every
    /// step, exact eliminations take priority (node, then edge, then branch),
    /// and at most one heuristic elimination fires per round. Fails unless
    /// the surviving graph is a single chain.
    pub fn run_eliminations(&mut self, workers: &Workers) -> Result<()> {
        loop {
            self.refresh_marking();
            if let Some(op) = self.find_node_candidate() {
                self.node_eliminate(op, workers)?;
                continue;
            }
            if let Some(edges) = self.find_parallel_edges() {
                self.edge_eliminate(&edges, workers)?;
                continue;
            }
            if let Some((op, into)) = self.find_branch_candidate() {
                self.branch_eliminate(op, into, workers)?;
                continue;
            }
            if let Some(op) = self.find_heuristic_candidate() {
                self.heuristic_eliminate(op, workers)?;
                continue;
            }
            break;
        }
        self.refresh_marking();
        if self.linear_chain().is_none() {
            return Err(Error::NotLinearizable);
        }
        Ok(())
    }

    /// The chain order of the working graph if it is linear.
    pub(crate) fn linear_chain(&self) -> Option<Vec<usize>> {
        let alive: Vec<usize> = (0..self.op_ids.len()).filter(|&p| self.alive[p]).collect();
        if alive.is_empty() {
            return Some(Vec::new());
        }
        let sources: Vec<usize> =
            alive.iter().copied().filter(|&p| self.in_edges[p].is_empty()).collect();
        if sources.len() != 1 {
            return None;
        }
        let mut order = vec![sources[0]];
        loop {
            let last = *order.last().expect("non-empty");
            let down = self.distinct_succs(last);
            match down.len() {
                0 => break,
                1 => {
                    let next = *down.iter().next().expect("len checked");
                    if order.contains(&next) {
                        return None;
                    }
                    order.push(next);
                }
                _ => return None,
            }
        }
        (order.len() == alive.len()).then_some(order)
    }

    /// Consumes the state into the inputs of the linear dynamic program:
    /// chain-ordered operator frontiers and one merged edge grid per
    /// consecutive pair.
    pub fn into_linear(mut self) -> Result<LinearGraph> {
        let chain = self.linear_chain().ok_or(Error::NotLinear)?;
        let mut ops = Vec::with_capacity(chain.len());
        let mut op_frontiers = Vec::with_capacity(chain.len());
        let mut edge_frontiers = Vec::with_capacity(chain.len().saturating_sub(1));
        for (step, &pos) in chain.iter().enumerate() {
            ops.push(self.op_ids[pos]);
            op_frontiers.push(std::mem::take(&mut self.op_frontiers[pos]));
            if step + 1 < chain.len() {
                let next = chain[step + 1];
                let ids: Vec<EdgeId> = self.out_edges[pos]
                    .iter()
                    .copied()
                    .filter(|e| self.edges[e].dst == next)
                    .collect();
                debug_assert_eq!(ids.len(), 1, "parallel edges are merged before the DP");
                let id = *ids.first().ok_or(Error::NotLinear)?;
                edge_frontiers.push(self.edge_frontiers.remove(&id).expect("alive edge"));
            }
        }
        Ok(LinearGraph { ops, op_frontiers, edge_frontiers })
    }
}

/// A linear graph ready for the dynamic program: operators in chain order
/// with their per-configuration frontiers and one edge grid per consecutive
/// pair.
pub struct LinearGraph {
    pub ops: Vec<OpId>,
    pub op_frontiers: Vec<Vec<Frontier>>,
    pub edge_frontiers: Vec<Vec<Vec<Frontier>>>,
}

impl LinearGraph {
    pub fn n(&self) -> usize {
        self.ops.len()
    }

    pub fn k(&self, step: usize) -> usize {
        self.op_frontiers[step].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{total_cost, OperatorCost};
    use crate::graph::{Edge, Operator};

    fn workers() -> Workers {
        Workers::new(1).unwrap()
    }

    fn graph(op_ids: &[OpId], edges: &[(OpId, OpId)]) -> ComputationGraph {
        let mut has_in: BTreeSet<OpId> = BTreeSet::new();
        for &(_, dst) in edges {
            has_in.insert(dst);
        }
        let ops = op_ids
            .iter()
            .map(|&id| {
                let o = Operator::new(id, format!("op{id}"), vec![vec![4]]);
                if has_in.contains(&id) {
                    o
                } else {
                    o.input()
                }
            })
            .collect();
        let es = edges
            .iter()
            .enumerate()
            .map(|(i, &(src, dst))| Edge { id: i as EdgeId, src, dst, tensor_shape: vec![4] })
            .collect();
        ComputationGraph::new(ops, es).unwrap()
    }

    /// Cost tables from explicit (memory, time) per (op position, cfg) and a
    /// transfer grid per edge (in edge-id order).
    fn tables(op_costs: &[Vec<(f64, f64)>], edge_grids: &[Vec<Vec<f64>>]) -> CostTables {
        CostTables {
            op_costs: op_costs
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&(m, t)| OperatorCost {
                            mem_param: m,
                            mem_temp: 0.0,
                            time_compute: t,
                            time_sync: 0.0,
                        })
                        .collect()
                })
                .collect(),
            edge_costs: edge_grids
                .iter()
                .enumerate()
                .map(|(id, grid)| (id as EdgeId, grid.clone()))
                .collect(),
        }
    }

    fn costs(f: &Frontier) -> Vec<(f64, f64)> {
        f.tuples().iter().map(|t| (t.memory, t.time)).collect()
    }

    #[test]
    fn node_elimination_sums_singletons() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2)]);
        let t = tables(
            &[vec![(1.0, 1.0)], vec![(2.0, 3.0)], vec![(4.0, 5.0)]],
            &[vec![vec![0.25]], vec![vec![0.5]]],
        );
        let mut st = ElimState::new(&g, &[1, 1, 1], &t, ElimOptions::default()).unwrap();
        // Unmark everything so the middle operator is eliminable.
        st.marked.clear();
        st.node_eliminate(1, &workers()).unwrap();
        let grid = st.edge_frontiers.values().next().unwrap();
        assert_eq!(costs(&grid[0][0]), vec![(2.0, 3.75)]);
        assert_eq!(grid[0][0].tuples()[0].strategy, vec![(1, 0)]);
        assert_eq!(st.log[0].choices, vec![0]);
    }

    #[test]
    fn node_elimination_keeps_both_staircase_paths() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2)]);
        // Middle configs cost (1,4) and (2,1): neither dominates.
        let t = tables(
            &[vec![(0.0, 0.0)], vec![(1.0, 4.0), (2.0, 1.0)], vec![(0.0, 0.0)]],
            &[vec![vec![0.0, 0.0]], vec![vec![0.0], vec![0.0]]],
        );
        let mut st = ElimState::new(&g, &[1, 2, 1], &t, ElimOptions::default()).unwrap();
        st.marked.clear();
        st.node_eliminate(1, &workers()).unwrap();
        let grid = st.edge_frontiers.values().next().unwrap();
        assert_eq!(costs(&grid[0][0]), vec![(1.0, 4.0), (2.0, 1.0)]);
        assert_eq!(st.log[0].choices, vec![0, 1]);
    }

    #[test]
    fn three_op_chain_matches_brute_force_over_eight_strategies() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2)]);
        let op_costs = vec![
            vec![(3.0, 7.0), (5.0, 2.0)],
            vec![(1.0, 9.0), (6.0, 1.0)],
            vec![(2.0, 2.0), (4.0, 1.0)],
        ];
        let e01 = vec![vec![0.0, 2.0], vec![3.0, 0.0]];
        let e12 = vec![vec![1.0, 0.0], vec![0.0, 5.0]];
        let t = tables(&op_costs, &[e01, e12]);

        let mut st = ElimState::new(&g, &[2, 2, 2], &t, ElimOptions::default()).unwrap();
        st.marked.clear();
        st.node_eliminate(1, &workers()).unwrap();

        // Fold the remaining two operators and the merged edge by hand.
        let grid = st.edge_frontiers.values().next().unwrap();
        let mut all = Vec::new();
        for w in 0..2 {
            for p in 0..2 {
                let lhs =
                    product_tuples(st.op_frontiers[0][w].tuples(), grid[w][p].tuples()).unwrap();
                all.extend(product_tuples(&lhs, st.op_frontiers[2][p].tuples()).unwrap());
            }
        }
        let ft_frontier = reduce(all);

        // Independent oracle: all 8 strategies through the cost tables.
        let mut brute = Vec::new();
        for a in 0..2u32 {
            for b in 0..2u32 {
                for c in 0..2u32 {
                    let s = vec![(0, a), (1, b), (2, c)];
                    let tc = total_cost(&s, &g, &t).unwrap();
                    brute.push(StrategyTuple::new(s, tc.memory, tc.time));
                }
            }
        }
        let oracle = reduce(brute);
        assert_eq!(costs(&ft_frontier), costs(&oracle));
        // Reconstructed strategies recompute to their stored costs.
        for tup in ft_frontier.tuples() {
            let tc = total_cost(&tup.strategy, &g, &t).unwrap();
            assert_eq!((tc.memory, tc.time), (tup.memory, tup.time));
        }
    }

    #[test]
    fn edge_elimination_sums_parallel_singletons() {
        let g = graph(&[0, 1], &[(0, 1), (0, 1)]);
        let t = tables(
            &[vec![(0.0, 0.0)], vec![(0.0, 0.0)]],
            &[vec![vec![0.125]], vec![vec![0.25]]],
        );
        let mut st = ElimState::new(&g, &[1, 1], &t, ElimOptions::default()).unwrap();
        st.edge_eliminate(&[0, 1], &workers()).unwrap();
        let grid = st.edge_frontiers.values().next().unwrap();
        assert_eq!(costs(&grid[0][0]), vec![(0.0, 0.375)]);
        assert_eq!(st.edges.len(), 1);
    }

    #[test]
    fn edge_elimination_of_zero_cost_edges_is_zero() {
        let g = graph(&[0, 1], &[(0, 1), (0, 1), (0, 1)]);
        let zero = vec![vec![0.0]];
        let t = tables(
            &[vec![(0.0, 0.0)], vec![(0.0, 0.0)]],
            &[zero.clone(), zero.clone(), zero],
        );
        let mut st = ElimState::new(&g, &[1, 1], &t, ElimOptions::default()).unwrap();
        st.edge_eliminate(&[0, 1, 2], &workers()).unwrap();
        let grid = st.edge_frontiers.values().next().unwrap();
        assert_eq!(costs(&grid[0][0]), vec![(0.0, 0.0)]);
    }

    #[test]
    fn edge_elimination_reduces_pairwise_sums() {
        // Both edges carry 2-tuple frontiers, as if earlier node eliminations
        // had filled them; fabricate that state directly.
        let g = graph(&[0, 1], &[(0, 1), (0, 1)]);
        let t = tables(&[vec![(0.0, 0.0)], vec![(0.0, 0.0)]], &[vec![vec![0.0]], vec![vec![0.0]]]);
        let mut st = ElimState::new(&g, &[1, 1], &t, ElimOptions::default()).unwrap();
        let f1 = reduce(vec![
            StrategyTuple::new(vec![(10, 0)], 1.0, 4.0),
            StrategyTuple::new(vec![(10, 1)], 2.0, 1.0),
        ]);
        let f2 = reduce(vec![
            StrategyTuple::new(vec![(11, 0)], 1.0, 2.0),
            StrategyTuple::new(vec![(11, 1)], 3.0, 1.0),
        ]);
        st.edge_frontiers.insert(0, vec![vec![f1]]);
        st.edge_frontiers.insert(1, vec![vec![f2]]);
        st.edge_eliminate(&[0, 1], &workers()).unwrap();
        let grid = st.edge_frontiers.values().next().unwrap();
        // Pairwise sums (2,6) (4,5) (3,3) (5,2): (4,5) is dominated by (3,3).
        assert_eq!(costs(&grid[0][0]), vec![(2.0, 6.0), (3.0, 3.0), (5.0, 2.0)]);
    }

    #[test]
    fn branch_elimination_with_singleton_merge_shifts_costs() {
        // Source 2 feeds 1; 0 -> 1 is the backbone.
        let g = graph(&[0, 1, 2], &[(0, 1), (2, 1)]);
        let t = tables(
            &[vec![(1.0, 1.0), (2.0, 2.0)], vec![(5.0, 5.0), (7.0, 7.0)], vec![(10.0, 20.0)]],
            &[vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![vec![1.0, 2.0]]],
        );
        let mut st = ElimState::new(&g, &[2, 2, 1], &t, ElimOptions::default()).unwrap();
        st.branch_eliminate(2, 1, &workers()).unwrap();
        assert_eq!(st.k[1], 2);
        // Composite (p, k=0): host cost + merged op + edge(0, p).
        assert_eq!(costs(&st.op_frontiers[1][0]), vec![(15.0, 26.0)]);
        assert_eq!(costs(&st.op_frontiers[1][1]), vec![(17.0, 29.0)]);
        let tup = &st.op_frontiers[1][0].tuples()[0];
        assert_eq!(tup.strategy, vec![(1, 0), (2, 0)]);
        // The backbone edge grew composite columns that repeat per merged cfg.
        assert_eq!(st.edge_frontiers[&0][0].len(), 2);
    }

    #[test]
    fn branch_elimination_builds_composite_space() {
        let g = graph(&[0, 1, 2], &[(0, 1), (2, 1)]);
        let t = tables(
            &[vec![(0.0, 0.0)], vec![(1.0, 10.0), (2.0, 20.0)], vec![(0.1, 0.3), (0.2, 0.6)]],
            &[vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![0.0, 0.0]]],
        );
        let mut st = ElimState::new(&g, &[1, 2, 2], &t, ElimOptions::default()).unwrap();
        st.branch_eliminate(2, 1, &workers()).unwrap();
        assert_eq!(st.k[1], 4);
        let got: Vec<Vec<(f64, f64)>> = (0..4).map(|c| costs(&st.op_frontiers[1][c])).collect();
        assert_eq!(
            got,
            vec![vec![(1.1, 10.3)], vec![(1.2, 10.6)], vec![(2.1, 20.3)], vec![(2.2, 20.6)]]
        );
        assert_eq!(st.composite_spaces[&1], vec![2]);
    }

    #[test]
    fn branch_elimination_respects_the_composite_cap() {
        let g = graph(&[0, 1, 2], &[(0, 1), (2, 1)]);
        let t = tables(
            &[vec![(0.0, 0.0)], vec![(0.0, 0.0); 3], vec![(0.0, 0.0); 2]],
            &[vec![vec![0.0; 3]], vec![vec![0.0; 3], vec![0.0; 3]]],
        );
        let opts = ElimOptions { composite_cap: 5, ..ElimOptions::default() };
        let mut st = ElimState::new(&g, &[1, 3, 2], &t, opts).unwrap();
        assert!(matches!(
            st.branch_eliminate(2, 1, &workers()),
            Err(Error::SpaceExplosion { size: 6, cap: 5 })
        ));
    }

    #[test]
    fn branch_then_node_turns_side_source_into_chain() {
        // 0 -> 1 -> 3 with a side source 2 -> 3.
        let g = graph(&[0, 1, 3, 2], &[(0, 1), (1, 3), (2, 3)]);
        let t = tables(
            &vec![vec![(1.0, 1.0)]; 4],
            &[vec![vec![0.0]], vec![vec![0.0]], vec![vec![0.0]]],
        );
        let mut st = ElimState::new(&g, &[1, 1, 1, 1], &t, ElimOptions::default()).unwrap();
        assert!(st.linear_chain().is_none());
        st.branch_eliminate(2, 3, &workers()).unwrap();
        assert!(st.linear_chain().is_some());
    }

    #[test]
    fn heuristic_min_memory_picks_the_smallest_memory_config() {
        let g = graph(&[0, 1, 9], &[(0, 1), (9, 1)]);
        let t = tables(
            &[vec![(0.0, 0.0)], vec![(0.0, 0.0)], vec![(5.0, 1.0), (3.0, 9.0), (7.0, 0.5)]],
            &[vec![vec![0.0]], vec![vec![0.0], vec![0.0], vec![0.0]]],
        );
        let st = ElimState::new(&g, &[1, 1, 3], &t, ElimOptions::default()).unwrap();
        assert_eq!(st.pick_config(2), 1);
        let weighted = ElimOptions { policy: HeuristicPolicy::Weighted(0.0), ..Default::default() };
        let st = ElimState::new(&g, &[1, 1, 3], &t, weighted).unwrap();
        assert_eq!(st.pick_config(2), 2); // pure time objective
    }

    #[test]
    fn heuristic_elimination_with_single_downstream_keeps_the_forced_choice() {
        let g = graph(&[0, 1, 9], &[(0, 1), (9, 1)]);
        let t = tables(
            &[vec![(1.0, 1.0)], vec![(2.0, 2.0)], vec![(4.0, 8.0)]],
            &[vec![vec![0.0]], vec![vec![0.5]]],
        );
        let mut st = ElimState::new(&g, &[1, 1, 1], &t, ElimOptions::default()).unwrap();
        st.heuristic_eliminate(9, &workers()).unwrap();
        // Operator 1 absorbed the edge and operator 9's own cost.
        assert_eq!(costs(&st.op_frontiers[1][0]), vec![(6.0, 10.5)]);
        assert_eq!(st.op_frontiers[1][0].tuples()[0].strategy, vec![(1, 0), (9, 0)]);
    }

    fn shared_input_fixture() -> (ComputationGraph, CostTables) {
        // 0 -> 1 -> 2 -> 3 with a shared source 9 feeding 1, 2 and 3.
        let g = graph(&[0, 1, 2, 3, 9], &[(0, 1), (1, 2), (2, 3), (9, 1), (9, 2), (9, 3)]);
        let ops = vec![
            vec![(1.0, 1.0)],
            vec![(1.0, 1.0)],
            vec![(1.0, 1.0)],
            vec![(1.0, 1.0)],
            vec![(2.0, 4.0), (4.0, 2.0)],
        ];
        let one = vec![vec![0.0]];
        let from9 = vec![vec![0.25], vec![0.75]];
        let t = tables(
            &ops,
            &[one.clone(), one.clone(), one, from9.clone(), from9.clone(), from9],
        );
        (g, t)
    }

    #[test]
    fn shared_mask_goes_linear_after_one_heuristic_elimination() {
        let (g, t) = shared_input_fixture();
        let mut st = ElimState::new(&g, &[1, 1, 1, 1, 2], &t, ElimOptions::default()).unwrap();
        let w = workers();
        st.run_eliminations(&w).unwrap();
        assert_eq!(st.heuristic_count(), 1);
        assert!(st.linear_chain().is_some());
        // Totals are conserved: the only remaining strategy fixes op 9 at the
        // min-memory cfg 0 and sums every edge row for that choice.
        let lg = st.into_linear().unwrap();
        let mut acc = lg.op_frontiers[0][0].tuples().to_vec();
        for step in 1..lg.n() {
            acc = product_tuples(&acc, lg.edge_frontiers[step - 1][0][0].tuples()).unwrap();
            acc = product_tuples(&acc, lg.op_frontiers[step][0].tuples()).unwrap();
        }
        assert_eq!(acc.len(), 1);
        let tc = total_cost(&acc[0].strategy, &g, &t).unwrap();
        assert_eq!((tc.memory, tc.time), (acc[0].memory, acc[0].time));
        assert_eq!(acc[0].strategy.iter().find(|(op, _)| *op == 9).unwrap().1, 0);
    }

    #[test]
    fn already_linear_graph_needs_no_eliminations() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2)]);
        let t = tables(&vec![vec![(1.0, 1.0)]; 3], &[vec![vec![0.0]], vec![vec![0.0]]]);
        let mut st = ElimState::new(&g, &[1, 1, 1], &t, ElimOptions::default()).unwrap();
        st.run_eliminations(&workers()).unwrap();
        assert!(st.log.is_empty());
    }

    #[test]
    fn residual_blocks_need_no_heuristics() {
        // Two chained residual blocks: 0 -> 1 -> 2 -> 3 -> 4 with skip edges
        // 0 -> 2 and 2 -> 4.
        let g = graph(&[0, 1, 2, 3, 4], &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (2, 4)]);
        let one = vec![vec![0.0]];
        let t = tables(&vec![vec![(1.0, 1.0)]; 5], &vec![one; 6]);
        let mut st = ElimState::new(&g, &[1; 5], &t, ElimOptions::default()).unwrap();
        st.run_eliminations(&workers()).unwrap();
        assert_eq!(st.heuristic_count(), 0);
        assert!(st.linear_chain().is_some());
        let counts = st.elimination_counts();
        assert!(counts[&ElimKind::Node] > 0);
        assert!(counts[&ElimKind::Edge] > 0);
    }

    #[test]
    fn every_elimination_shrinks_the_graph() {
        let (g, t) = shared_input_fixture();
        let mut st = ElimState::new(&g, &[1, 1, 1, 1, 2], &t, ElimOptions::default()).unwrap();
        let w = workers();
        let mut last = st.entity_count();
        loop {
            self_step(&mut st, &w);
            let now = st.entity_count();
            if now == last {
                break;
            }
            assert!(now < last);
            last = now;
        }

        fn self_step(st: &mut ElimState, w: &Workers) {
            st.refresh_marking();
            if let Some(op) = st.find_node_candidate() {
                st.node_eliminate(op, w).unwrap();
            } else if let Some(edges) = st.find_parallel_edges() {
                st.edge_eliminate(&edges, w).unwrap();
            } else if let Some((op, into)) = st.find_branch_candidate() {
                st.branch_eliminate(op, into, w).unwrap();
            } else if let Some(op) = st.find_heuristic_candidate() {
                st.heuristic_eliminate(op, w).unwrap();
            }
        }
    }
}
