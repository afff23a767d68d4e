//! Computation-graph and device-graph data model, topological ordering, and
//! the backbone marking that protects the linear spine during elimination.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operator id as it appears in graph files. Stable across the whole pipeline.
pub type OpId = u64;
/// Edge id. Fresh ids are allocated when eliminations rewire the graph.
pub type EdgeId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpFlag {
    IsInput,
    IsOutput,
}

/// A node of the computation graph. `tensor_shapes` lists the operator's own
/// tensors: parameter tensors first, the output tensor last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Operator {
    pub id: OpId,
    pub name: String,
    pub tensor_shapes: Vec<Vec<u64>>,
    #[serde(default)]
    pub flags: Vec<OpFlag>,
}

impl Operator {
    pub fn new(id: OpId, name: impl Into<String>, tensor_shapes: Vec<Vec<u64>>) -> Self {
        Operator { id, name: name.into(), tensor_shapes, flags: Vec::new() }
    }

    pub fn input(mut self) -> Self {
        if !self.is_input() {
            self.flags.push(OpFlag::IsInput);
        }
        self
    }

    pub fn output(mut self) -> Self {
        if !self.is_output() {
            self.flags.push(OpFlag::IsOutput);
        }
        self
    }

    pub fn is_input(&self) -> bool {
        self.flags.contains(&OpFlag::IsInput)
    }

    pub fn is_output(&self) -> bool {
        self.flags.contains(&OpFlag::IsOutput)
    }

    /// The output tensor is the last entry of `tensor_shapes`.
    pub fn output_shape(&self) -> &[u64] {
        self.tensor_shapes.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Parameter tensors are every entry except the last.
    pub fn param_shapes(&self) -> &[Vec<u64>] {
        let n = self.tensor_shapes.len();
        &self.tensor_shapes[..n.saturating_sub(1)]
    }
}

/// A tensor flowing from `src` to `dst`. Multi-edges between the same pair of
/// operators are allowed and are required by edge elimination.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub src: OpId,
    pub dst: OpId,
    pub tensor_shape: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComputationGraph {
    pub operators: Vec<Operator>,
    pub edges: Vec<Edge>,
}

impl ComputationGraph {
    /// Validates ids, shapes, acyclicity and reachability from input operators.
    pub fn new(operators: Vec<Operator>, edges: Vec<Edge>) -> Result<Self> {
        let g = ComputationGraph { operators, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for op in &self.operators {
            if !ids.insert(op.id) {
                return Err(Error::Validation(format!("duplicate operator id {}", op.id)));
            }
            if op.tensor_shapes.is_empty() {
                return Err(Error::Validation(format!("operator {} has no tensors", op.id)));
            }
            for shape in &op.tensor_shapes {
                if shape.iter().any(|&d| d == 0) {
                    return Err(Error::Validation(format!(
                        "operator {} has a zero-sized tensor dimension",
                        op.id
                    )));
                }
            }
        }
        let mut edge_ids = BTreeSet::new();
        for e in &self.edges {
            if !edge_ids.insert(e.id) {
                return Err(Error::Validation(format!("duplicate edge id {}", e.id)));
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!("edge {} is a self-loop", e.id)));
            }
            if !ids.contains(&e.src) || !ids.contains(&e.dst) {
                return Err(Error::Validation(format!(
                    "edge {} references an unknown operator",
                    e.id
                )));
            }
        }
        // Acyclicity.
        let order = topological_order(self)?;
        debug_assert_eq!(order.len(), self.operators.len());
        // Every operator reachable from some input operator.
        if !self.operators.is_empty() {
            let inputs: Vec<OpId> =
                self.operators.iter().filter(|o| o.is_input()).map(|o| o.id).collect();
            if inputs.is_empty() {
                return Err(Error::Validation("no operator is flagged is_input".into()));
            }
            let succ = successors(self);
            let mut reached: BTreeSet<OpId> = inputs.iter().copied().collect();
            let mut stack = inputs;
            while let Some(id) = stack.pop() {
                for &next in succ.get(&id).into_iter().flatten() {
                    if reached.insert(next) {
                        stack.push(next);
                    }
                }
            }
            if let Some(orphan) = self.operators.iter().find(|o| !reached.contains(&o.id)) {
                return Err(Error::Validation(format!(
                    "operator {} is unreachable from the input operators",
                    orphan.id
                )));
            }
        }
        Ok(())
    }

    pub fn operator(&self, id: OpId) -> Option<&Operator> {
        self.operators.iter().find(|o| o.id == id)
    }
}

/// One data point of a measured collective-communication bandwidth curve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub log2_bytes: u32,
    pub bandwidth_bytes_per_s: f64,
}

/// A device-partitioning scheme: the devices are divided into disjoint groups
/// (`group_sizes`) and collectives within the groups share the profiled curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scheme {
    pub id: String,
    pub group_sizes: Vec<u64>,
    pub latency_s: f64,
    pub profile: Vec<ProfilePoint>,
}

/// The device side of the problem: a device count plus profiled partitioning
/// schemes. The communication model is profile-driven, not link-routed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviceGraph {
    pub device_count: u64,
    pub schemes: Vec<Scheme>,
}

impl DeviceGraph {
    pub fn new(device_count: u64, schemes: Vec<Scheme>) -> Result<Self> {
        let d = DeviceGraph { device_count, schemes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_count == 0 {
            return Err(Error::Validation("device_count must be at least 1".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.schemes {
            if !ids.insert(s.id.clone()) {
                return Err(Error::Validation(format!("duplicate scheme id {}", s.id)));
            }
            if s.group_sizes.is_empty() || s.group_sizes.iter().any(|&g| g == 0) {
                return Err(Error::Validation(format!("scheme {} has empty groups", s.id)));
            }
            if s.group_sizes.iter().sum::<u64>() != self.device_count {
                return Err(Error::Validation(format!(
                    "scheme {} groups do not cover all {} devices",
                    s.id, self.device_count
                )));
            }
            if s.latency_s < 0.0 || !s.latency_s.is_finite() {
                return Err(Error::Validation(format!("scheme {} has invalid latency", s.id)));
            }
            if s.profile.is_empty() {
                return Err(Error::Validation(format!("scheme {} has no profile", s.id)));
            }
            for w in s.profile.windows(2) {
                if w[1].log2_bytes <= w[0].log2_bytes {
                    return Err(Error::Validation(format!(
                        "scheme {} profile sizes must strictly increase",
                        s.id
                    )));
                }
            }
            if s.profile.iter().any(|p| !(p.bandwidth_bytes_per_s > 0.0)) {
                return Err(Error::Validation(format!(
                    "scheme {} has a non-positive bandwidth",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Scheme whose groups are uniform with the given size.
    pub fn scheme_for_group_size(&self, group_size: u64) -> Result<&Scheme> {
        self.schemes
            .iter()
            .find(|s| {
                s.group_sizes.iter().all(|&g| g == group_size)
                    && s.group_sizes.len() as u64 * group_size == self.device_count
            })
            .ok_or(Error::SchemeMissing { group_size, device_count: self.device_count })
    }

    /// A device graph with one uniform scheme per divisor group size and a
    /// shared synthetic bandwidth curve. Handy default when no measured
    /// profiles are available.
    pub fn synthetic(device_count: u64, latency_s: f64, peak_bandwidth: f64) -> Self {
        Self::uniform(device_count, latency_s, synthetic_profile(peak_bandwidth))
    }

    /// Like [`DeviceGraph::synthetic`] but with a size-independent bandwidth,
    /// so transfer time is proportional to bytes.
    pub fn flat(device_count: u64, latency_s: f64, bandwidth: f64) -> Self {
        let profile = vec![
            ProfilePoint { log2_bytes: 0, bandwidth_bytes_per_s: bandwidth },
            ProfilePoint { log2_bytes: 40, bandwidth_bytes_per_s: bandwidth },
        ];
        Self::uniform(device_count, latency_s, profile)
    }

    fn uniform(device_count: u64, latency_s: f64, profile: Vec<ProfilePoint>) -> Self {
        let mut schemes = Vec::new();
        for g in 2..=device_count {
            if device_count % g != 0 {
                continue;
            }
            schemes.push(Scheme {
                id: format!("g{g}"),
                group_sizes: vec![g; (device_count / g) as usize],
                latency_s,
                profile: profile.clone(),
            });
        }
        DeviceGraph { device_count, schemes }
    }
}

/// Bandwidth ramps up to the peak and saturates. Adjacent points never more
/// than double, which keeps the interpolated transfer time monotone in size.
fn synthetic_profile(peak: f64) -> Vec<ProfilePoint> {
    const MAX_LOG2: u32 = 40;
    const SATURATE_LOG2: u32 = 20;
    (0..=MAX_LOG2)
        .map(|i| ProfilePoint {
            log2_bytes: i,
            bandwidth_bytes_per_s: peak / f64::from(1u32 << SATURATE_LOG2.saturating_sub(i).min(20)),
        })
        .collect()
}

/// The chain of operators that elimination must not remove.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearBackbone {
    pub marked: Vec<OpId>,
}

fn successors(g: &ComputationGraph) -> BTreeMap<OpId, Vec<OpId>> {
    let mut succ: BTreeMap<OpId, Vec<OpId>> = BTreeMap::new();
    for e in &g.edges {
        succ.entry(e.src).or_default().push(e.dst);
    }
    succ
}

/// Total order consistent with every edge; ties broken by ascending operator id.
pub fn topological_order(g: &ComputationGraph) -> Result<Vec<OpId>> {
    let mut indegree: BTreeMap<OpId, usize> = g.operators.iter().map(|o| (o.id, 0)).collect();
    let succ = successors(g);
    for e in &g.edges {
        *indegree.get_mut(&e.dst).expect("validated edge") += 1;
    }
    let mut ready: BinaryHeap<Reverse<OpId>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(g.operators.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &next in succ.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(&next).expect("validated edge");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(next));
            }
        }
    }
    if order.len() != g.operators.len() {
        return Err(Error::CycleDetected);
    }
    Ok(order)
}

/// Distinct downstream operators per operator (parallel edges count once).
pub(crate) fn distinct_successors(g: &ComputationGraph) -> BTreeMap<OpId, BTreeSet<OpId>> {
    let mut succ: BTreeMap<OpId, BTreeSet<OpId>> =
        g.operators.iter().map(|o| (o.id, BTreeSet::new())).collect();
    for e in &g.edges {
        succ.get_mut(&e.src).expect("validated edge").insert(e.dst);
    }
    succ
}

/// Marks the topologically first operator, then extends the mark along the
/// unique-downstream chain. Ties for the first operator break by smallest id.
pub fn mark_backbone(g: &ComputationGraph) -> Result<LinearBackbone> {
    let order = topological_order(g)?;
    match order.first() {
        Some(&first) => Ok(mark_backbone_from(g, first)),
        None => Ok(LinearBackbone { marked: Vec::new() }),
    }
}

/// Same as [`mark_backbone`] but picks the first operator uniformly at random
/// among the sources, for experiments with randomized tie-breaking.
pub fn mark_backbone_seeded(g: &ComputationGraph, seed: u64) -> Result<LinearBackbone> {
    topological_order(g)?;
    let mut has_in: BTreeSet<OpId> = BTreeSet::new();
    for e in &g.edges {
        has_in.insert(e.dst);
    }
    let sources: Vec<OpId> =
        g.operators.iter().map(|o| o.id).filter(|id| !has_in.contains(id)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match sources.choose(&mut rng) {
        Some(&first) => Ok(mark_backbone_from(g, first)),
        None => Ok(LinearBackbone { marked: Vec::new() }),
    }
}

/// Extends the mark from a pinned first operator. Used by the elimination
/// driver, which re-marks after every graph rewrite.
pub(crate) fn mark_backbone_from(g: &ComputationGraph, first: OpId) -> LinearBackbone {
    let succ = distinct_successors(g);
    let mut marked = vec![first];
    loop {
        let last = *marked.last().expect("non-empty");
        let downstream = &succ[&last];
        if downstream.len() != 1 {
            break;
        }
        let next = *downstream.iter().next().expect("len checked");
        if marked.contains(&next) {
            break; // unreachable in a DAG; guards against malformed input
        }
        marked.push(next);
    }
    LinearBackbone { marked }
}

/// True iff the operators form a single edge-connected chain. Parallel edges
/// between consecutive operators are permitted.
pub fn is_linear(g: &ComputationGraph) -> bool {
    linear_order(g).is_some()
}

/// The chain order if the graph is linear.
pub(crate) fn linear_order(g: &ComputationGraph) -> Option<Vec<OpId>> {
    if g.operators.is_empty() {
        return Some(Vec::new());
    }
    let succ = distinct_successors(g);
    let mut has_in: BTreeSet<OpId> = BTreeSet::new();
    for e in &g.edges {
        has_in.insert(e.dst);
    }
    let sources: Vec<OpId> =
        g.operators.iter().map(|o| o.id).filter(|id| !has_in.contains(id)).collect();
    if sources.len() != 1 {
        return None;
    }
    let mut order = vec![sources[0]];
    loop {
        let last = *order.last().expect("non-empty");
        match succ[&last].len() {
            0 => break,
            1 => {
                let next = *succ[&last].iter().next().expect("len checked");
                if order.contains(&next) {
                    return None;
                }
                order.push(next);
            }
            _ => return None,
        }
    }
    if order.len() == g.operators.len() {
        Some(order)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(id: OpId) -> Operator {
        Operator::new(id, format!("op{id}"), vec![vec![4, 4]])
    }

    fn edge(id: EdgeId, src: OpId, dst: OpId) -> Edge {
        Edge { id, src, dst, tensor_shape: vec![4, 4] }
    }

    pub(crate) fn graph(op_ids: &[OpId], edges: &[(OpId, OpId)]) -> ComputationGraph {
        let mut has_in: BTreeSet<OpId> = BTreeSet::new();
        for &(_, dst) in edges {
            has_in.insert(dst);
        }
        let ops = op_ids
            .iter()
            .map(|&id| if has_in.contains(&id) { op(id) } else { op(id).input() })
            .collect();
        let es = edges
            .iter()
            .enumerate()
            .map(|(i, &(s, d))| edge(i as EdgeId, s, d))
            .collect();
        ComputationGraph::new(ops, es).expect("valid test graph")
    }

    #[test]
    fn topological_order_chain() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2)]);
        assert_eq!(topological_order(&g).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topological_order_diamond_breaks_ties_by_id() {
        let g = graph(&[0, 1, 2, 3], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(topological_order(&g).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn topological_order_singleton() {
        let g = graph(&[7], &[]);
        assert_eq!(topological_order(&g).unwrap(), vec![7]);
    }

    #[test]
    fn cycle_is_detected() {
        let ops = vec![op(0).input(), op(1)];
        let es = vec![edge(0, 0, 1), edge(1, 1, 0)];
        let g = ComputationGraph { operators: ops, edges: es };
        assert!(matches!(topological_order(&g), Err(Error::CycleDetected)));
    }

    #[test]
    fn mark_backbone_whole_chain() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2)]);
        assert_eq!(mark_backbone(&g).unwrap().marked, vec![0, 1, 2]);
    }

    #[test]
    fn mark_backbone_stops_at_fan_out_of_first() {
        let g = graph(&[0, 1, 2, 3], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(mark_backbone(&g).unwrap().marked, vec![0]);
    }

    #[test]
    fn mark_backbone_stops_at_later_fan_out() {
        let g = graph(&[0, 1, 2, 3], &[(0, 1), (1, 2), (1, 3)]);
        assert_eq!(mark_backbone(&g).unwrap().marked, vec![0, 1]);
    }

    #[test]
    fn mark_backbone_is_prefix_closed_at_the_fan_out() {
        // Truncating the graph at the fan-out point re-marks the same prefix.
        let g = graph(&[0, 1, 2, 3], &[(0, 1), (1, 2), (1, 3)]);
        let marked = mark_backbone(&g).unwrap().marked;
        let truncated = graph(&[0, 1], &[(0, 1)]);
        assert_eq!(mark_backbone(&truncated).unwrap().marked, marked);
    }

    #[test]
    fn mark_backbone_seeded_starts_at_a_source() {
        let g = graph(&[0, 1, 2, 9], &[(0, 1), (9, 1), (1, 2)]);
        for seed in 0..8 {
            let b = mark_backbone_seeded(&g, seed).unwrap();
            assert!(b.marked[0] == 0 || b.marked[0] == 9);
        }
    }

    #[test]
    fn is_linear_chain_and_multi_edge() {
        let g = graph(&[0, 1, 2, 3, 4], &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert!(is_linear(&g));
        let m = graph(&[0, 1], &[(0, 1), (0, 1), (0, 1)]);
        assert!(is_linear(&m));
    }

    #[test]
    fn is_linear_rejects_diamond_and_disconnected() {
        let g = graph(&[0, 1, 2, 3], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert!(!is_linear(&g));
        let d = graph(&[0, 1], &[]);
        assert!(!is_linear(&d));
    }

    #[test]
    fn linear_graph_is_fully_marked() {
        let g = graph(&[3, 5, 8], &[(3, 5), (5, 8)]);
        assert!(is_linear(&g));
        assert_eq!(mark_backbone(&g).unwrap().marked.len(), g.operators.len());
    }

    #[test]
    fn validation_rejects_orphans_and_bad_shapes() {
        let ops = vec![op(0).input(), op(1), op(2)];
        let es = vec![edge(0, 0, 1)];
        assert!(ComputationGraph::new(ops, es).is_err()); // 2 unreachable

        let bad = Operator::new(0, "z", vec![vec![0]]).input();
        assert!(ComputationGraph::new(vec![bad], vec![]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Random DAG: positions only ever point forward, ids come from a
        /// random offset so id order and topology order differ.
        fn arb_dag() -> impl Strategy<Value = ComputationGraph> {
            (2usize..10, any::<u64>(), proptest::collection::vec(any::<bool>(), 45))
                .prop_map(|(n, id_salt, picks)| {
                    let ids: Vec<OpId> =
                        (0..n as u64).map(|i| i.wrapping_mul(7).wrapping_add(id_salt % 13)).collect();
                    // Wrapping can collide; fall back to dense ids then.
                    let ids = if ids.iter().collect::<BTreeSet<_>>().len() == n {
                        ids
                    } else {
                        (0..n as u64).collect()
                    };
                    let mut edges = Vec::new();
                    let mut pick = picks.into_iter();
                    for i in 0..n {
                        for j in (i + 1)..n {
                            if pick.next().unwrap_or(false) {
                                edges.push((ids[i], ids[j]));
                            }
                        }
                    }
                    graph(&ids, &edges)
                })
        }

        proptest! {
            #[test]
            fn topological_order_is_a_permutation_respecting_edges(g in arb_dag()) {
                let order = topological_order(&g).unwrap();
                let mut sorted: Vec<OpId> = order.clone();
                sorted.sort_unstable();
                let mut ids: Vec<OpId> = g.operators.iter().map(|o| o.id).collect();
                ids.sort_unstable();
                prop_assert_eq!(sorted, ids);
                let rank: BTreeMap<OpId, usize> =
                    order.iter().enumerate().map(|(r, &id)| (id, r)).collect();
                for e in &g.edges {
                    prop_assert!(rank[&e.src] < rank[&e.dst]);
                }
            }

            #[test]
            fn backbone_is_an_edge_connected_path_from_the_first_operator(g in arb_dag()) {
                let backbone = mark_backbone(&g).unwrap();
                prop_assert_eq!(backbone.marked[0], topological_order(&g).unwrap()[0]);
                for w in backbone.marked.windows(2) {
                    prop_assert!(g.edges.iter().any(|e| e.src == w[0] && e.dst == w[1]));
                }
                if is_linear(&g) {
                    prop_assert_eq!(backbone.marked.len(), g.operators.len());
                }
            }
        }
    }
}
