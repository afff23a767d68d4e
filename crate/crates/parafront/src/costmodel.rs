//! Operator, edge and total strategy costs, the profile-interpolated
//! collective-communication time model, and the shortest-path tensor
//! re-scheduling planner that generates edge transfer times.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::config::{enumerate_maps, enumerate_meshes, shard_elements, DeviceMesh, ParallelConfig, TensorMap};
use crate::config::ConfigSpace;
use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, DeviceGraph, EdgeId, OpId, Operator, ProfilePoint, Scheme};

/// Per-(operator, configuration) cost. Memory is `mem_param + mem_temp`,
/// time is `time_compute + time_sync`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorCost {
    pub mem_param: f64,
    pub mem_temp: f64,
    pub time_compute: f64,
    pub time_sync: f64,
}

impl OperatorCost {
    pub fn memory(&self) -> f64 {
        self.mem_param + self.mem_temp
    }

    pub fn time(&self) -> f64 {
        self.time_compute + self.time_sync
    }

    fn validate(&self, what: &str) -> Result<()> {
        for v in [self.mem_param, self.mem_temp, self.time_compute, self.time_sync] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{what}: costs must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-(edge, src configuration, dst configuration) cost. Edges contribute
/// transfer time only; their memory contribution is exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeCost {
    pub time_transfer: f64,
}

/// A profiled collective-communication bandwidth curve for one partitioning
/// scheme: measured bandwidths at power-of-two message sizes plus a
/// per-collective latency.
#[derive(Clone, Debug)]
pub struct BandwidthProfile {
    pub points: Vec<ProfilePoint>,
    pub latency: f64,
}

impl BandwidthProfile {
    pub fn from_scheme(s: &Scheme) -> Self {
        BandwidthProfile { points: s.profile.clone(), latency: s.latency_s }
    }
}

/// Predicted collective time for a message of `bytes`.
///
/// The effective bandwidth interpolates linearly in bytes between the two
/// profiled powers of two that bracket the message; a zero-byte transfer is
/// free. The prediction is exact at every profiled point and monotone
/// whenever adjacent profiled bandwidths at most double.
pub fn comm_time(bytes: u64, profile: &BandwidthProfile) -> Result<f64> {
    if bytes == 0 {
        return Ok(0.0);
    }
    let points = &profile.points;
    debug_assert!(!points.is_empty(), "validated profiles are non-empty");
    let last = points.last().expect("non-empty profile");
    let max_bytes = 1u128 << last.log2_bytes;
    if u128::from(bytes) > max_bytes {
        return Err(Error::ProfileOutOfRange { bytes, max_log2: last.log2_bytes });
    }
    let first = &points[0];
    let bandwidth = if u128::from(bytes) <= (1u128 << first.log2_bytes) {
        first.bandwidth_bytes_per_s
    } else if u128::from(bytes) == max_bytes {
        last.bandwidth_bytes_per_s
    } else {
        let hi = points
            .iter()
            .position(|p| u128::from(bytes) < (1u128 << p.log2_bytes))
            .expect("bytes below the profiled maximum");
        let (lo, hi) = (&points[hi - 1], &points[hi]);
        if lo.bandwidth_bytes_per_s == hi.bandwidth_bytes_per_s {
            lo.bandwidth_bytes_per_s
        } else {
            let size_lo = (1u64 << lo.log2_bytes) as f64;
            let size_hi = (1u64 << hi.log2_bytes) as f64;
            let frac = (bytes as f64 - size_lo) / (size_hi - size_lo);
            lo.bandwidth_bytes_per_s + (hi.bandwidth_bytes_per_s - lo.bandwidth_bytes_per_s) * frac
        }
    };
    Ok(profile.latency + bytes as f64 / bandwidth)
}

/// How one tensor is currently laid out across the devices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitState {
    pub mesh: DeviceMesh,
    pub map: TensorMap,
}

impl SplitState {
    pub fn replicated(device_count: u64, rank: usize) -> Self {
        SplitState {
            mesh: DeviceMesh { dims: vec![device_count] },
            map: TensorMap::replicated(rank),
        }
    }
}

/// The layout of an edge tensor implied by one endpoint's configuration: the
/// operator's output-tensor map projected onto the edge tensor. Rank
/// mismatches and indivisible dimensions fall back to unsplit.
pub fn edge_split(op: &Operator, cfg: &ParallelConfig, edge_shape: &[u64]) -> SplitState {
    let out_map = cfg.tensor_maps.last();
    let mut map = vec![-1; edge_shape.len()];
    if let Some(out_map) = out_map {
        if out_map.map.len() == edge_shape.len() && op.output_shape().len() == edge_shape.len() {
            for (d, &m) in out_map.map.iter().enumerate() {
                if m >= 0 && edge_shape[d] % cfg.mesh.dims[m as usize] == 0 {
                    map[d] = m;
                }
            }
        }
    }
    SplitState { mesh: cfg.mesh.clone(), map: TensorMap { map } }
}

/// State-space planner for converting a tensor between layouts with collective
/// operations. Nodes are the valid layouts of one tensor; edges are single
/// collectives (all-gather, slice, all-to-all); weights come from
/// [`comm_time`]. All fully-replicated layouts collapse into one node, since
/// every device holds the whole tensor regardless of the mesh.
pub struct ReschedulePlanner {
    shape: Vec<u64>,
    states: Vec<SplitState>, // index 0 is the canonical replicated state
    index: BTreeMap<(Vec<u64>, Vec<i32>), usize>,
    adjacency: Vec<Vec<(usize, f64)>>,
    distances: BTreeMap<usize, Vec<f64>>,
}

const REPLICATED: usize = 0;

/// Tensor elements are modeled as 4-byte floats.
pub const BYTES_PER_ELEMENT: f64 = 4.0;

fn collective_time(volume_bytes: f64, group_size: u64, dev: &DeviceGraph) -> Result<f64> {
    if volume_bytes <= 0.0 || group_size <= 1 {
        return Ok(0.0);
    }
    let scheme = dev.scheme_for_group_size(group_size)?;
    comm_time(volume_bytes.round() as u64, &BandwidthProfile::from_scheme(scheme))
}

impl ReschedulePlanner {
    pub fn new(shape: &[u64], dev: &DeviceGraph, max_rank: usize, bytes_per_element: f64) -> Result<Self> {
        let total_bytes = shape.iter().product::<u64>() as f64 * bytes_per_element;
        let mut states = vec![SplitState::replicated(dev.device_count, shape.len())];
        for mesh in enumerate_meshes(dev.device_count, max_rank) {
            for map in enumerate_maps(shape, &mesh) {
                if !map.is_replicated() {
                    states.push(SplitState { mesh: mesh.clone(), map });
                }
            }
        }
        let index: BTreeMap<(Vec<u64>, Vec<i32>), usize> = states
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.mesh.dims.clone(), s.map.map.clone()), i))
            .collect();

        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); states.len()];
        for (from, state) in states.iter().enumerate() {
            let mesh = &state.mesh;
            // Slicing is local: each device already holds the full extent of
            // an unsplit dimension, so no bytes move.
            let slice_meshes: Vec<&DeviceMesh> = if from == REPLICATED {
                states[1..].iter().map(|s| &s.mesh).collect()
            } else {
                vec![mesh]
            };
            let mut seen_mesh: Vec<&DeviceMesh> = Vec::new();
            for m in slice_meshes {
                if seen_mesh.contains(&m) {
                    continue;
                }
                seen_mesh.push(m);
                let base_map = if from == REPLICATED {
                    TensorMap::replicated(shape.len())
                } else {
                    state.map.clone()
                };
                for d in 0..shape.len() {
                    if base_map.map[d] != -1 {
                        continue;
                    }
                    for (mi, &g) in m.dims.iter().enumerate() {
                        if g < 2 || shape[d] % g != 0 {
                            continue;
                        }
                        if base_map.mesh_dims().any(|used| used == mi) {
                            continue;
                        }
                        let mut map = base_map.map.clone();
                        map[d] = mi as i32;
                        let to = index[&(m.dims.clone(), map)];
                        adjacency[from].push((to, 0.0));
                    }
                }
            }
            if from == REPLICATED {
                continue;
            }
            let shard_bytes = shard_elements(shape, mesh, &state.map)
                .expect("enumerated states are valid") as f64
                * bytes_per_element;
            debug_assert!(shard_bytes <= total_bytes);
            for (d, &m) in state.map.map.iter().enumerate() {
                if m < 0 {
                    continue;
                }
                let g = mesh.dims[m as usize];
                // All-gather along mesh dim m: each device receives the other
                // group members' shards.
                let mut gathered = state.map.map.clone();
                gathered[d] = -1;
                let to = if gathered.iter().all(|&x| x == -1) {
                    REPLICATED
                } else {
                    index[&(mesh.dims.clone(), gathered)]
                };
                let volume = shard_bytes * (g - 1) as f64;
                adjacency[from].push((to, collective_time(volume, g, dev)?));
                // All-to-all: swap the split from dimension d to another
                // unsplit, divisible dimension; shard size is unchanged.
                for d2 in 0..shape.len() {
                    if d2 == d || state.map.map[d2] != -1 || shape[d2] % g != 0 {
                        continue;
                    }
                    let mut swapped = state.map.map.clone();
                    swapped[d] = -1;
                    swapped[d2] = m;
                    let to = index[&(mesh.dims.clone(), swapped)];
                    let volume = shard_bytes * (g - 1) as f64 / g as f64;
                    adjacency[from].push((to, collective_time(volume, g, dev)?));
                }
            }
        }
        Ok(ReschedulePlanner {
            shape: shape.to_vec(),
            states,
            index,
            adjacency,
            distances: BTreeMap::new(),
        })
    }

    pub fn states(&self) -> &[SplitState] {
        &self.states
    }

    fn state_index(&self, split: &SplitState) -> Result<usize> {
        if split.map.map.len() != self.shape.len() {
            return Err(Error::InvalidConfig(format!(
                "split rank {} does not match tensor rank {}",
                split.map.map.len(),
                self.shape.len()
            )));
        }
        if split.map.is_replicated() {
            return Ok(REPLICATED);
        }
        self.index
            .get(&(split.mesh.dims.clone(), split.map.map.clone()))
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown tensor layout {split:?}")))
    }

    /// Shortest conversion time between two layouts. Dijkstra with ties broken
    /// by state index, distances cached per source.
    pub fn time_between(&mut self, from: &SplitState, to: &SplitState) -> Result<f64> {
        let src = self.state_index(from)?;
        let dst = self.state_index(to)?;
        if src == dst {
            return Ok(0.0);
        }
        if !self.distances.contains_key(&src) {
            let dist = self.dijkstra(src);
            self.distances.insert(src, dist);
        }
        let d = self.distances[&src][dst];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::Unreachable)
        }
    }

    fn dijkstra(&self, src: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        let mut dist = vec![f64::INFINITY; self.states.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Reverse(Entry(0.0, src)));
        while let Some(Reverse(Entry(d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse(Entry(nd, v)));
                }
            }
        }
        dist
    }
}

/// Shortest collective sequence converting `from` into `to`; zero when the
/// layouts already agree. Elements are 4-byte floats.
pub fn reschedule_time(
    from: &SplitState,
    to: &SplitState,
    tensor_shape: &[u64],
    dev: &DeviceGraph,
) -> Result<f64> {
    let max_rank = from.mesh.dims.len().max(to.mesh.dims.len()).max(2);
    let mut planner = ReschedulePlanner::new(tensor_shape, dev, max_rank, BYTES_PER_ELEMENT)?;
    planner.time_between(from, to)
}

/// Closed-form operator cost generator used to fabricate test problems when
/// no measured table is supplied. Not a performance model: compute time is
/// proportional to shard elements, parameter memory is the parameter shards,
/// temporary memory is the output shard, and sync time is a gradient
/// all-reduce over each parameter tensor's replica group.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticOpModel {
    pub bytes_per_element: f64,
    pub time_per_element: f64,
}

impl Default for SyntheticOpModel {
    fn default() -> Self {
        SyntheticOpModel { bytes_per_element: BYTES_PER_ELEMENT, time_per_element: 1e-9 }
    }
}

impl SyntheticOpModel {
    pub fn operator_cost(
        &self,
        op: &Operator,
        cfg: &ParallelConfig,
        dev: &DeviceGraph,
    ) -> Result<OperatorCost> {
        let mut mem_param = 0.0;
        let mut time_sync = 0.0;
        let mut shard_total = 0.0;
        for (shape, map) in op.tensor_shapes.iter().zip(&cfg.tensor_maps) {
            let shard = shard_elements(shape, &cfg.mesh, map)? as f64;
            shard_total += shard;
        }
        for (shape, map) in op.param_shapes().iter().zip(&cfg.tensor_maps) {
            let shard_bytes = shard_elements(shape, &cfg.mesh, map)? as f64 * self.bytes_per_element;
            mem_param += shard_bytes;
            // Devices along mesh dims this tensor does not map hold replicas
            // and must all-reduce their gradients.
            let replicas: u64 = cfg
                .mesh
                .dims
                .iter()
                .enumerate()
                .filter(|(m, _)| !map.mesh_dims().any(|used| used == *m))
                .map(|(_, &g)| g)
                .product();
            let volume = 2.0 * shard_bytes * (replicas - 1) as f64 / replicas as f64;
            time_sync += collective_time(volume, replicas, dev)?;
        }
        let out_map = cfg.tensor_maps.last().expect("operators have at least one tensor");
        let mem_temp =
            shard_elements(op.output_shape(), &cfg.mesh, out_map)? as f64 * self.bytes_per_element;
        Ok(OperatorCost {
            mem_param,
            mem_temp,
            time_compute: self.time_per_element * shard_total,
            time_sync,
        })
    }
}

/// Cost-table JSON: explicit per-key operator costs and, optionally, explicit
/// per-key edge transfer times. An empty `edge_costs` list means edge costs
/// are derived from the re-scheduling planner.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CostFile {
    #[serde(default)]
    pub op_costs: Vec<OpCostEntry>,
    #[serde(default)]
    pub edge_costs: Vec<EdgeCostEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OpCostEntry {
    pub op: OpId,
    pub cfg: u32,
    pub m_p: f64,
    pub m_t: f64,
    pub t_c: f64,
    pub t_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeCostEntry {
    pub edge: EdgeId,
    pub src_cfg: u32,
    pub dst_cfg: u32,
    pub t_x: f64,
}

impl CostFile {
    /// Configuration count per operator implied by the file (max index + 1).
    pub fn k_per_op(&self) -> BTreeMap<OpId, usize> {
        let mut k = BTreeMap::new();
        for e in &self.op_costs {
            let slot = k.entry(e.op).or_insert(0usize);
            *slot = (*slot).max(e.cfg as usize + 1);
        }
        k
    }
}

/// Where operator costs come from.
pub enum CostSource<'a> {
    Synthetic(SyntheticOpModel),
    File(&'a CostFile),
}

/// Complete cost tables over a configuration space: one [`OperatorCost`] per
/// (operator, configuration) and one transfer time per
/// (edge, src configuration, dst configuration).
#[derive(Clone, Debug)]
pub struct CostTables {
    /// Indexed by operator position in the graph, then configuration.
    pub op_costs: Vec<Vec<OperatorCost>>,
    /// Keyed by edge id; grid indexed by [src cfg][dst cfg].
    pub edge_costs: BTreeMap<EdgeId, Vec<Vec<f64>>>,
}

impl CostTables {
    pub fn op_cost(&self, op_pos: usize, cfg: usize) -> &OperatorCost {
        &self.op_costs[op_pos][cfg]
    }

    pub fn transfer(&self, edge: EdgeId, src_cfg: usize, dst_cfg: usize) -> Result<EdgeCost> {
        let grid = self
            .edge_costs
            .get(&edge)
            .ok_or_else(|| Error::MissingCost(format!("edge {edge}")))?;
        let t = grid
            .get(src_cfg)
            .and_then(|row| row.get(dst_cfg))
            .ok_or_else(|| Error::MissingCost(format!("edge {edge} cfg pair ({src_cfg},{dst_cfg})")))?;
        Ok(EdgeCost { time_transfer: *t })
    }
}

/// Builds complete tables for the graph under the given configuration space.
/// Operator costs come from the file or the synthetic model; edge costs come
/// from the file when present, otherwise from the re-scheduling planner
/// applied to the endpoint layouts.
pub fn build_cost_tables(
    g: &ComputationGraph,
    space: &ConfigSpace,
    dev: &DeviceGraph,
    source: &CostSource<'_>,
) -> Result<CostTables> {
    let op_pos: BTreeMap<OpId, usize> =
        g.operators.iter().enumerate().map(|(i, o)| (o.id, i)).collect();

    let mut op_costs: Vec<Vec<OperatorCost>> = Vec::with_capacity(g.operators.len());
    match source {
        CostSource::Synthetic(model) => {
            for (pos, op) in g.operators.iter().enumerate() {
                let mut row = Vec::with_capacity(space.per_op[pos].len());
                for cfg in &space.per_op[pos] {
                    row.push(model.operator_cost(op, cfg, dev)?);
                }
                op_costs.push(row);
            }
        }
        CostSource::File(file) => {
            let mut by_key: BTreeMap<(OpId, u32), OperatorCost> = BTreeMap::new();
            for e in &file.op_costs {
                let cost = OperatorCost {
                    mem_param: e.m_p,
                    mem_temp: e.m_t,
                    time_compute: e.t_c,
                    time_sync: e.t_s,
                };
                cost.validate(&format!("op {} cfg {}", e.op, e.cfg))?;
                by_key.insert((e.op, e.cfg), cost);
            }
            for (pos, op) in g.operators.iter().enumerate() {
                let mut row = Vec::with_capacity(space.per_op[pos].len());
                for cfg in 0..space.per_op[pos].len() {
                    let cost = by_key
                        .get(&(op.id, cfg as u32))
                        .ok_or_else(|| Error::MissingCost(format!("op {} cfg {cfg}", op.id)))?;
                    row.push(*cost);
                }
                op_costs.push(row);
            }
        }
    }

    let file_edges: Option<BTreeMap<(EdgeId, u32, u32), f64>> = match source {
        CostSource::File(file) if !file.edge_costs.is_empty() => Some(
            file.edge_costs
                .iter()
                .map(|e| ((e.edge, e.src_cfg, e.dst_cfg), e.t_x))
                .collect(),
        ),
        _ => None,
    };

    let mut planners: BTreeMap<Vec<u64>, ReschedulePlanner> = BTreeMap::new();
    let bytes_per_element = match source {
        CostSource::Synthetic(m) => m.bytes_per_element,
        CostSource::File(_) => BYTES_PER_ELEMENT,
    };
    let max_rank = space
        .per_op
        .iter()
        .flatten()
        .map(|c| c.mesh.dims.len())
        .max()
        .unwrap_or(1)
        .max(2);

    let mut edge_costs = BTreeMap::new();
    for e in &g.edges {
        let src_pos = op_pos[&e.src];
        let dst_pos = op_pos[&e.dst];
        let (ks, kd) = (space.per_op[src_pos].len(), space.per_op[dst_pos].len());
        let mut grid = vec![vec![0.0; kd]; ks];
        if let Some(file_edges) = &file_edges {
            for (k, row) in grid.iter_mut().enumerate() {
                for (p, cell) in row.iter_mut().enumerate() {
                    let t = file_edges
                        .get(&(e.id, k as u32, p as u32))
                        .ok_or_else(|| {
                            Error::MissingCost(format!("edge {} cfg pair ({k},{p})", e.id))
                        })?;
                    if !(*t >= 0.0) || !t.is_finite() {
                        return Err(Error::Validation(format!(
                            "edge {} cfg pair ({k},{p}): costs must be finite and >= 0",
                            e.id
                        )));
                    }
                    *cell = *t;
                }
            }
        } else {
            let planner = match planners.get_mut(&e.tensor_shape) {
                Some(p) => p,
                None => planners
                    .entry(e.tensor_shape.clone())
                    .or_insert(ReschedulePlanner::new(&e.tensor_shape, dev, max_rank, bytes_per_element)?),
            };
            let src_op = &g.operators[src_pos];
            let dst_op = &g.operators[dst_pos];
            for (k, row) in grid.iter_mut().enumerate() {
                let from = edge_split(src_op, &space.per_op[src_pos][k], &e.tensor_shape);
                for (p, cell) in row.iter_mut().enumerate() {
                    let to = edge_split(dst_op, &space.per_op[dst_pos][p], &e.tensor_shape);
                    *cell = planner.time_between(&from, &to)?;
                }
            }
        }
        edge_costs.insert(e.id, grid);
    }

    Ok(CostTables { op_costs, edge_costs })
}

/// Total cost of a full strategy, decomposed per the additive model: time sums
/// operator and edge times, memory sums operator memory only, and `comm`
/// collects the synchronization and transfer terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalCost {
    pub memory: f64,
    pub time: f64,
    pub comm: f64,
}

pub fn total_cost(
    strategy: &[(OpId, u32)],
    g: &ComputationGraph,
    tables: &CostTables,
) -> Result<TotalCost> {
    let chosen: BTreeMap<OpId, u32> = strategy.iter().copied().collect();
    let op_pos: BTreeMap<OpId, usize> =
        g.operators.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let mut memory = 0.0;
    let mut time = 0.0;
    let mut comm = 0.0;
    for (pos, op) in g.operators.iter().enumerate() {
        let cfg = *chosen
            .get(&op.id)
            .ok_or_else(|| Error::MissingCost(format!("operator {} has no assignment", op.id)))?;
        let c = tables
            .op_costs
            .get(pos)
            .and_then(|row| row.get(cfg as usize))
            .ok_or_else(|| Error::MissingCost(format!("op {} cfg {cfg}", op.id)))?;
        memory += c.memory();
        time += c.time();
        comm += c.time_sync;
    }
    for e in &g.edges {
        let k = chosen[&e.src];
        let p = chosen[&e.dst];
        debug_assert!(op_pos.contains_key(&e.src) && op_pos.contains_key(&e.dst));
        let t = tables.transfer(e.id, k as usize, p as usize)?.time_transfer;
        time += t;
        comm += t;
    }
    Ok(TotalCost { memory, time, comm })
}
