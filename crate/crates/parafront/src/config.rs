//! Enumeration of valid parallelization configurations: device meshes plus
//! per-tensor maps. This is the per-operator search space everything else
//! iterates over.
//!
//! The rule set is deliberately minimal: meshes are ordered factorizations of
//! the device count, a tensor dimension maps to at most one mesh dimension,
//! `-1` means unsplit, mapped dimensions must divide evenly, and unmapped mesh
//! dimensions replicate the computation. Operator-semantic legality is out of
//! scope.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Operator;

/// Logical arrangement of the devices, e.g. `[4]` or `[2, 2]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceMesh {
    pub dims: Vec<u64>,
}

impl DeviceMesh {
    pub fn device_count(&self) -> u64 {
        self.dims.iter().product()
    }
}

/// One entry per tensor dimension: a mesh-dimension index, or -1 for unsplit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorMap {
    pub map: Vec<i32>,
}

impl TensorMap {
    pub fn replicated(rank: usize) -> Self {
        TensorMap { map: vec![-1; rank] }
    }

    pub fn is_replicated(&self) -> bool {
        self.map.iter().all(|&m| m == -1)
    }

    pub fn mesh_dims(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.iter().filter(|&&m| m >= 0).map(|&m| m as usize)
    }
}

/// A device mesh plus one tensor map per tensor of the operator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub mesh: DeviceMesh,
    pub tensor_maps: Vec<TensorMap>,
}

impl ParallelConfig {
    /// Full replication: every tensor unsplit on the trivial mesh.
    pub fn replicated(device_count: u64, tensor_ranks: &[usize]) -> Self {
        ParallelConfig {
            mesh: DeviceMesh { dims: vec![device_count] },
            tensor_maps: tensor_ranks.iter().map(|&r| TensorMap::replicated(r)).collect(),
        }
    }

    /// Mesh dimensions mapped by no tensor dimension: the computation is
    /// redundantly executed along them.
    pub fn replicated_mesh_dims(&self) -> BTreeSet<usize> {
        let mut unused: BTreeSet<usize> = (0..self.mesh.dims.len()).collect();
        for tm in &self.tensor_maps {
            for m in tm.mesh_dims() {
                unused.remove(&m);
            }
        }
        unused
    }
}

/// Ordered list of configurations per operator, in graph-operator order.
/// Never empty: full replication is always valid.
#[derive(Clone, Debug)]
pub struct ConfigSpace {
    pub per_op: Vec<Vec<ParallelConfig>>,
}

impl ConfigSpace {
    pub fn build(ops: &[Operator], device_count: u64, max_rank: usize) -> Self {
        let per_op = ops.iter().map(|o| enumerate_configs(o, device_count, max_rank)).collect();
        ConfigSpace { per_op }
    }

    /// Keeps the first `k` canonical configurations per operator (index 0 is
    /// always full replication). Used when cost tables cover a prefix of the
    /// space.
    pub fn truncate(&mut self, k: usize) {
        for cfgs in &mut self.per_op {
            cfgs.truncate(k.max(1));
        }
    }

    pub fn k(&self, op_pos: usize) -> usize {
        self.per_op[op_pos].len()
    }
}

/// All ordered factorizations of `device_count` into at most `max_rank`
/// factors, smallest rank first, lexicographic within a rank. Factors of 1
/// are excluded except for the trivial mesh `[device_count]`, since they
/// would duplicate lower-rank meshes.
pub fn enumerate_meshes(device_count: u64, max_rank: usize) -> Vec<DeviceMesh> {
    assert!(device_count >= 1, "device_count must be positive");
    let mut meshes = vec![DeviceMesh { dims: vec![device_count] }];
    for rank in 2..=max_rank {
        let mut dims = Vec::with_capacity(rank);
        factorize(device_count, rank, &mut dims, &mut meshes);
    }
    meshes
}

fn factorize(remaining: u64, slots: usize, dims: &mut Vec<u64>, out: &mut Vec<DeviceMesh>) {
    if slots == 1 {
        if remaining >= 2 {
            dims.push(remaining);
            out.push(DeviceMesh { dims: dims.clone() });
            dims.pop();
        }
        return;
    }
    let mut f = 2;
    while f * 2u64.pow(slots as u32 - 1) <= remaining {
        if remaining % f == 0 {
            dims.push(f);
            factorize(remaining / f, slots - 1, dims, out);
            dims.pop();
        }
        f += 1;
    }
}

/// Candidate map entries for one tensor dimension: -1 first, then every mesh
/// dimension of size >= 2 that divides the tensor dimension. Size-1 mesh
/// dimensions are skipped: splitting across one device is not a split.
fn dim_candidates(dim: u64, mesh: &DeviceMesh) -> Vec<i32> {
    let mut c = vec![-1];
    for (m, &size) in mesh.dims.iter().enumerate() {
        if size >= 2 && dim % size == 0 {
            c.push(m as i32);
        }
    }
    c
}

pub(crate) fn enumerate_maps(shape: &[u64], mesh: &DeviceMesh) -> Vec<TensorMap> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(shape.len());
    let mut used = vec![false; mesh.dims.len()];
    fill_maps(shape, mesh, &mut current, &mut used, &mut out);
    out
}

fn fill_maps(
    shape: &[u64],
    mesh: &DeviceMesh,
    current: &mut Vec<i32>,
    used: &mut [bool],
    out: &mut Vec<TensorMap>,
) {
    if current.len() == shape.len() {
        out.push(TensorMap { map: current.clone() });
        return;
    }
    for entry in dim_candidates(shape[current.len()], mesh) {
        if entry >= 0 {
            if used[entry as usize] {
                continue;
            }
            used[entry as usize] = true;
        }
        current.push(entry);
        fill_maps(shape, mesh, current, used, out);
        current.pop();
        if entry >= 0 {
            used[entry as usize] = false;
        }
    }
}

/// Cartesian product of meshes and per-tensor maps, filtered by injectivity
/// and divisibility. The first configuration is always full replication.
pub fn enumerate_configs(op: &Operator, device_count: u64, max_rank: usize) -> Vec<ParallelConfig> {
    let mut out = Vec::new();
    for mesh in enumerate_meshes(device_count, max_rank) {
        let per_tensor: Vec<Vec<TensorMap>> =
            op.tensor_shapes.iter().map(|s| enumerate_maps(s, &mesh)).collect();
        let mut chosen: Vec<TensorMap> = Vec::with_capacity(per_tensor.len());
        cross_tensors(&mesh, &per_tensor, &mut chosen, &mut out);
    }
    debug_assert!(!out.is_empty(), "replication fallback guarantees a non-empty space");
    out
}

fn cross_tensors(
    mesh: &DeviceMesh,
    per_tensor: &[Vec<TensorMap>],
    chosen: &mut Vec<TensorMap>,
    out: &mut Vec<ParallelConfig>,
) {
    if chosen.len() == per_tensor.len() {
        out.push(ParallelConfig { mesh: mesh.clone(), tensor_maps: chosen.clone() });
        return;
    }
    for tm in &per_tensor[chosen.len()] {
        chosen.push(tm.clone());
        cross_tensors(mesh, per_tensor, chosen, out);
        chosen.pop();
    }
}

/// Per-device shard shape: mapped dimensions divide by their mesh dimension.
pub fn shard_shape(shape: &[u64], mesh: &DeviceMesh, map: &TensorMap) -> Result<Vec<u64>> {
    if map.map.len() != shape.len() {
        return Err(Error::InvalidConfig(format!(
            "map rank {} does not match tensor rank {}",
            map.map.len(),
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(shape.len());
    for (d, (&dim, &m)) in shape.iter().zip(&map.map).enumerate() {
        if m < 0 {
            out.push(dim);
            continue;
        }
        let m = m as usize;
        let size = *mesh.dims.get(m).ok_or_else(|| {
            Error::InvalidConfig(format!("map references mesh dimension {m} of a rank-{} mesh", mesh.dims.len()))
        })?;
        if dim % size != 0 {
            return Err(Error::InvalidConfig(format!(
                "tensor dimension {d} of size {dim} is not divisible by mesh dimension of size {size}"
            )));
        }
        out.push(dim / size);
    }
    Ok(out)
}

pub fn shard_elements(shape: &[u64], mesh: &DeviceMesh, map: &TensorMap) -> Result<u64> {
    Ok(shard_shape(shape, mesh, map)?.iter().product())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(dims: &[u64]) -> DeviceMesh {
        DeviceMesh { dims: dims.to_vec() }
    }

    fn tmap(map: &[i32]) -> TensorMap {
        TensorMap { map: map.to_vec() }
    }

    /// Independent oracle: every sequence of factors >= 2 (or the trivial
    /// mesh) whose product is n, found by exhaustive search over sequences.
    fn factorization_oracle(n: u64, max_rank: usize) -> Vec<Vec<u64>> {
        let mut all = vec![vec![n]];
        for rank in 2..=max_rank {
            let mut seqs: Vec<Vec<u64>> = vec![vec![]];
            for _ in 0..rank {
                let mut next = Vec::new();
                for s in &seqs {
                    for f in 2..=n {
                        let mut s = s.clone();
                        s.push(f);
                        next.push(s);
                    }
                }
                seqs = next;
            }
            seqs.retain(|s| s.iter().product::<u64>() == n);
            seqs.sort();
            all.extend(seqs);
        }
        all
    }

    #[test]
    fn meshes_for_four_devices() {
        let got: Vec<Vec<u64>> = enumerate_meshes(4, 2).into_iter().map(|m| m.dims).collect();
        assert_eq!(got, vec![vec![4], vec![2, 2]]);
    }

    #[test]
    fn meshes_single_device() {
        let got: Vec<Vec<u64>> = enumerate_meshes(1, 2).into_iter().map(|m| m.dims).collect();
        assert_eq!(got, vec![vec![1]]);
    }

    #[test]
    fn meshes_for_eight_devices_match_oracle() {
        let got: Vec<Vec<u64>> = enumerate_meshes(8, 2).into_iter().map(|m| m.dims).collect();
        assert_eq!(got, vec![vec![8], vec![2, 4], vec![4, 2]]);
        assert_eq!(got, factorization_oracle(8, 2));
        for n in [1u64, 2, 6, 12, 16, 30] {
            for rank in 1..=3 {
                let got: Vec<Vec<u64>> =
                    enumerate_meshes(n, rank).into_iter().map(|m| m.dims).collect();
                assert_eq!(got, factorization_oracle(n, rank), "n={n} rank={rank}");
            }
        }
    }

    #[test]
    fn shard_shape_paper_example() {
        let s = shard_shape(&[200, 100], &mesh(&[2, 2]), &tmap(&[0, 1])).unwrap();
        assert_eq!(s, vec![100, 50]);
    }

    #[test]
    fn shard_shape_replication_is_identity() {
        let s = shard_shape(&[31, 7, 5], &mesh(&[4]), &tmap(&[-1, -1, -1])).unwrap();
        assert_eq!(s, vec![31, 7, 5]);
    }

    #[test]
    fn shard_shape_divides_by_mesh_dim() {
        let s = shard_shape(&[8, 8], &mesh(&[4]), &tmap(&[-1, 0])).unwrap();
        assert_eq!(s, vec![8, 2]);
        assert!(shard_shape(&[7], &mesh(&[4]), &tmap(&[0])).is_err());
    }

    #[test]
    fn indivisible_dims_are_never_mapped() {
        let op = Operator::new(0, "odd", vec![vec![7]]);
        let cfgs = enumerate_configs(&op, 4, 2);
        for c in &cfgs {
            assert!(c.tensor_maps[0].is_replicated(), "7 is not divisible by 2 or 4: {c:?}");
        }
    }

    #[test]
    fn configs_for_vector_of_four_rank_one_mesh() {
        let op = Operator::new(0, "v", vec![vec![4]]);
        let cfgs = enumerate_configs(&op, 4, 1);
        let got: Vec<Vec<i32>> =
            cfgs.iter().map(|c| c.tensor_maps[0].map.clone()).collect();
        assert_eq!(got, vec![vec![-1], vec![0]]);
    }

    #[test]
    fn batch_by_feature_split_is_enumerated_for_the_matrix_input() {
        // A [200, 100] tensor on 4 devices admits mesh [2, 2] with map [0, 1]:
        // each device holds a [100, 50] slice.
        let op = Operator::new(0, "matvec", vec![vec![200, 100]]);
        let cfgs = enumerate_configs(&op, 4, 2);
        let wanted = ParallelConfig {
            mesh: mesh(&[2, 2]),
            tensor_maps: vec![tmap(&[0, 1])],
        };
        assert!(cfgs.contains(&wanted));
        let shard = shard_shape(&[200, 100], &wanted.mesh, &wanted.tensor_maps[0]).unwrap();
        assert_eq!(shard, vec![100, 50]);
    }

    #[test]
    fn full_replication_is_always_first() {
        let op = Operator::new(0, "m", vec![vec![16, 16], vec![16, 16]]);
        for count in [1, 2, 4, 8] {
            let cfgs = enumerate_configs(&op, count, 2);
            let first = &cfgs[0];
            assert_eq!(first.mesh.dims, vec![count]);
            assert!(first.tensor_maps.iter().all(TensorMap::is_replicated));
            assert_eq!(first, &ParallelConfig::replicated(count, &[2, 2]));
        }
    }

    #[test]
    fn enumeration_is_deterministic() {
        let op = Operator::new(0, "m", vec![vec![8, 4], vec![4]]);
        assert_eq!(enumerate_configs(&op, 8, 2), enumerate_configs(&op, 8, 2));
    }

    #[test]
    fn shards_cover_the_tensor_with_replication_factor() {
        // shard_elements * device_count == tensor_elements * replication
        // where replication multiplies the mesh dims unused by this tensor.
        let op = Operator::new(0, "m", vec![vec![16, 8]]);
        for count in [2u64, 4, 8] {
            for cfg in enumerate_configs(&op, count, 2) {
                let shape = &op.tensor_shapes[0];
                let tm = &cfg.tensor_maps[0];
                let elems: u64 = shape.iter().product();
                let shard = shard_elements(shape, &cfg.mesh, tm).unwrap();
                let replication: u64 = cfg
                    .mesh
                    .dims
                    .iter()
                    .enumerate()
                    .filter(|(m, _)| !tm.mesh_dims().any(|used| used == *m))
                    .map(|(_, &s)| s)
                    .product();
                assert_eq!(shard * cfg.mesh.device_count(), elems * replication, "{cfg:?}");
            }
        }
    }
}
