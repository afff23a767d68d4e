//! Cost-frontier algebra: strategy tuples, dominance reduction, and the
//! product/union operations that eliminations and the dynamic program are
//! built from.
//!
//! A tuple carries the partial strategy it stands for, so reconstructing a
//! full strategy from a final frontier never needs to replay the search. The
//! memory overhead is accepted in exchange for exact reconstruction.

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::OpId;

/// One `(operator, configuration index)` choice of a partial strategy.
pub type Assignment = (OpId, u32);

/// A (partial) strategy with its summed memory and time cost.
///
/// `strategy` is sorted by operator id and never assigns an operator twice.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyTuple {
    pub strategy: Vec<Assignment>,
    pub memory: f64,
    pub time: f64,
}

impl StrategyTuple {
    pub fn new(strategy: Vec<Assignment>, memory: f64, time: f64) -> Self {
        debug_assert!(strategy.windows(2).all(|w| w[0].0 < w[1].0), "strategy must be sorted");
        StrategyTuple { strategy, memory, time }
    }

    /// A cost-only tuple assigning nothing; the identity of `product`.
    pub fn empty(memory: f64, time: f64) -> Self {
        StrategyTuple { strategy: Vec::new(), memory, time }
    }
}

/// Merge two sorted assignment lists, rejecting overlapping operators.
pub(crate) fn merge_strategies(a: &[Assignment], b: &[Assignment]) -> Result<Vec<Assignment>> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i].0 < b[j].0 {
            out.push(a[i]);
            i += 1;
        } else if b[j].0 < a[i].0 {
            out.push(b[j]);
            j += 1;
        } else {
            return Err(Error::OverlappingStrategies { op: a[i].0 });
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    Ok(out)
}

/// A set of mutually non-dominated tuples, ascending in memory and strictly
/// descending in time. No two tuples share the same `(memory, time)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frontier {
    tuples: Vec<StrategyTuple>,
}

impl Frontier {
    pub fn empty() -> Self {
        Frontier { tuples: Vec::new() }
    }

    pub fn singleton(t: StrategyTuple) -> Self {
        Frontier { tuples: vec![t] }
    }

    pub fn tuples(&self) -> &[StrategyTuple] {
        &self.tuples
    }

    pub fn into_tuples(self) -> Vec<StrategyTuple> {
        self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Cartesian product with cost sums; apply [`reduce`] to the result.
    pub fn product(&self, other: &Frontier) -> Result<Vec<StrategyTuple>> {
        product_tuples(&self.tuples, &other.tuples)
    }

    /// Multiset concatenation; apply [`reduce`] to the result.
    pub fn union(&self, other: &Frontier) -> Vec<StrategyTuple> {
        let mut out = self.tuples.clone();
        out.extend(other.tuples.iter().cloned());
        out
    }

    /// The tuple with the smallest time whose memory fits the budget. Since
    /// time strictly decreases along the frontier, this is the last fitting
    /// tuple.
    pub fn best_time_within(&self, memory_limit: f64) -> Option<&StrategyTuple> {
        self.tuples.iter().rev().find(|t| t.memory <= memory_limit)
    }

    pub fn min_memory(&self) -> Option<&StrategyTuple> {
        self.tuples.first()
    }

    pub fn min_time(&self) -> Option<&StrategyTuple> {
        self.tuples.last()
    }

    /// CSV emission: `memory_bytes,time_s,strategy_id`, ascending in memory.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "memory_bytes,time_s,strategy_id")?;
        for (i, t) in self.tuples.iter().enumerate() {
            writeln!(w, "{},{},{}", t.memory, t.time, i)?;
        }
        Ok(())
    }
}

/// All pairwise combinations with concatenated strategies and summed costs.
/// The operand strategies must cover disjoint operator sets.
pub fn product_tuples(a: &[StrategyTuple], b: &[StrategyTuple]) -> Result<Vec<StrategyTuple>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(StrategyTuple {
                strategy: merge_strategies(&x.strategy, &y.strategy)?,
                memory: x.memory + y.memory,
                time: x.time + y.time,
            });
        }
    }
    Ok(out)
}

/// Multiset concatenation of two tuple sets.
pub fn union_tuples(a: &[StrategyTuple], b: &[StrategyTuple]) -> Vec<StrategyTuple> {
    let mut out = a.to_vec();
    out.extend_from_slice(b);
    out
}

/// Reduces a tuple set to its cost frontier.
///
/// Tuples are sorted by (memory, time), keeping input order on full ties, and
/// a single sweep keeps a tuple iff its time is strictly below the running
/// minimum. Exact `(memory, time)` duplicates therefore keep only the
/// earliest tuple.
pub fn reduce(mut candidates: Vec<StrategyTuple>) -> Frontier {
    candidates.sort_by(|x, y| {
        x.memory.total_cmp(&y.memory).then_with(|| x.time.total_cmp(&y.time))
    });
    let mut kept: Vec<StrategyTuple> = Vec::new();
    let mut best_time = f64::INFINITY;
    for t in candidates {
        if t.time < best_time {
            best_time = t.time;
            kept.push(t);
        }
    }
    Frontier { tuples: kept }
}

/// One union branch of a three-way product: `tag` identifies the branch (the
/// eliminated operator's configuration in eliminations, the predecessor's
/// configuration in the dynamic program).
pub(crate) struct CombineGroup<'a> {
    pub tag: u32,
    pub a: &'a Frontier,
    pub b: &'a Frontier,
    pub c: &'a Frontier,
}

/// `reduce(∪_groups a ⊗ b ⊗ c)` with strategies materialized only for the
/// surviving tuples. Returns the frontier and, per kept tuple, the tag of the
/// branch that produced it.
pub(crate) fn combine3(groups: &[CombineGroup<'_>]) -> Result<(Frontier, Vec<u32>)> {
    struct Cand {
        memory: f64,
        time: f64,
        group: u32,
        ia: u32,
        ib: u32,
        ic: u32,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for (g, grp) in groups.iter().enumerate() {
        for (ia, ta) in grp.a.tuples().iter().enumerate() {
            for (ib, tb) in grp.b.tuples().iter().enumerate() {
                let m = ta.memory + tb.memory;
                let t = ta.time + tb.time;
                for (ic, tc) in grp.c.tuples().iter().enumerate() {
                    cands.push(Cand {
                        memory: m + tc.memory,
                        time: t + tc.time,
                        group: g as u32,
                        ia: ia as u32,
                        ib: ib as u32,
                        ic: ic as u32,
                    });
                }
            }
        }
    }
    cands.sort_by(|x, y| {
        x.memory.total_cmp(&y.memory).then_with(|| x.time.total_cmp(&y.time))
    });
    let mut tuples = Vec::new();
    let mut tags = Vec::new();
    let mut best_time = f64::INFINITY;
    for c in cands {
        if c.time < best_time {
            best_time = c.time;
            let grp = &groups[c.group as usize];
            let ta = &grp.a.tuples()[c.ia as usize];
            let tb = &grp.b.tuples()[c.ib as usize];
            let tc = &grp.c.tuples()[c.ic as usize];
            let strategy = merge_strategies(
                &merge_strategies(&ta.strategy, &tb.strategy)?,
                &tc.strategy,
            )?;
            tuples.push(StrategyTuple { strategy, memory: c.memory, time: c.time });
            tags.push(grp.tag);
        }
    }
    Ok((Frontier { tuples }, tags))
}
