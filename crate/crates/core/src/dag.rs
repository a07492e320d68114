//! Dependency graph over a micro-op trace.
//!
//! RAW edges come from a single forward pass that keeps, per buffer, a map of
//! which op last wrote each byte range. WAR pairs are recorded on the side
//! for the page planner and never order compute.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{
    BufferId, BufferInfo, BufferInterval, BufferUse, MicroOp, MicroOpKind, MicroOpTrace, Space,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RawEdge {
    pub from: u32,
    pub to: u32,
    /// Bytes written by `from` and read by `to`.
    pub witness: BufferInterval,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepGraph {
    pub node_count: usize,
    pub raw_edges: Vec<RawEdge>,
    /// (reader, later overwriter) pairs.
    pub war_constraints: Vec<(u32, u32)>,
    #[serde(skip)]
    preds: Vec<Vec<u32>>,
    #[serde(skip)]
    succs: Vec<Vec<u32>>,
}

/// Non-overlapping segments `start -> (end, op)` for one buffer.
type SegmentMap = BTreeMap<u64, (u64, u32)>;

fn overlapping(map: &SegmentMap, start: u64, end: u64) -> Vec<(u64, u64, u32)> {
    let mut out = Vec::new();
    if let Some((&s, &(e, op))) = map.range(..start).next_back() {
        if e > start {
            out.push((s, e, op));
        }
    }
    for (&s, &(e, op)) in map.range(start..end) {
        out.push((s, e, op));
    }
    out
}

/// Replaces `[start, end)` with `op`, trimming any partially covered segments.
fn overwrite(map: &mut SegmentMap, start: u64, end: u64, op: u32) {
    for (s, e, prev) in overlapping(map, start, end) {
        map.remove(&s);
        if s < start {
            map.insert(s, (start, prev));
        }
        if e > end {
            map.insert(end, (e, prev));
        }
    }
    map.insert(start, (end, op));
}

impl DepGraph {
    /// Builds a graph from explicit edges; used by tests and transforms.
    pub fn from_edges(
        node_count: usize,
        raw_edges: Vec<RawEdge>,
        war_constraints: Vec<(u32, u32)>,
    ) -> Self {
        let mut g = DepGraph {
            node_count,
            raw_edges,
            war_constraints,
            preds: Vec::new(),
            succs: Vec::new(),
        };
        g.index();
        g
    }

    fn index(&mut self) {
        let mut preds = vec![BTreeSet::new(); self.node_count];
        let mut succs = vec![BTreeSet::new(); self.node_count];
        for e in &self.raw_edges {
            preds[e.to as usize].insert(e.from);
            succs[e.from as usize].insert(e.to);
        }
        self.preds = preds.into_iter().map(|s| s.into_iter().collect()).collect();
        self.succs = succs.into_iter().map(|s| s.into_iter().collect()).collect();
    }

    /// Distinct data predecessors of `node`, ascending.
    pub fn preds(&self, node: u32) -> &[u32] {
        &self.preds[node as usize]
    }

    pub fn succs(&self, node: u32) -> &[u32] {
        &self.succs[node as usize]
    }

    /// Distinct (from, to) pairs.
    pub fn edge_pairs(&self) -> BTreeSet<(u32, u32)> {
        self.raw_edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn has_edge(&self, from: u32, to: u32) -> bool {
        self.succs(from).binary_search(&to).is_ok()
    }

    /// Kahn order; smallest ready id first.
    pub fn topo_order(&self) -> Result<Vec<u32>> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<u32> = (0..self.node_count as u32)
            .filter(|&v| indeg[v as usize] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.node_count);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &s in self.succs(v) {
                indeg[s as usize] -= 1;
                if indeg[s as usize] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != self.node_count {
            let stuck = (0..self.node_count).find(|&v| indeg[v] > 0).unwrap_or(0);
            return Err(Error::Cycle(stuck as u32));
        }
        Ok(order)
    }

    /// All transitive data predecessors of `node`.
    pub fn ancestors(&self, node: u32) -> BTreeSet<u32> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<u32> = self.preds(node).iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            if seen.insert(v) {
                queue.extend(self.preds(v).iter().copied());
            }
        }
        seen
    }

    fn check_costs(&self, cost: &[u64]) -> Result<()> {
        if cost.len() != self.node_count {
            return Err(Error::invalid(
                "cost vector",
                format!("{} costs for {} nodes", cost.len(), self.node_count),
            ));
        }
        Ok(())
    }

    /// Earliest start of every node with unbounded resources.
    pub fn earliest_starts(&self, cost: &[u64]) -> Result<Vec<u64>> {
        self.check_costs(cost)?;
        let mut est = vec![0u64; self.node_count];
        for v in self.topo_order()? {
            let v = v as usize;
            est[v] = self.preds[v]
                .iter()
                .map(|&p| est[p as usize] + cost[p as usize])
                .max()
                .unwrap_or(0);
        }
        Ok(est)
    }

    /// Longest cost-weighted path. Ties go to the lexicographically smallest
    /// id sequence.
    pub fn critical_path(&self, cost: &[u64]) -> Result<(u64, Vec<u32>)> {
        self.check_costs(cost)?;
        let order = self.topo_order()?;
        // tail[v]: longest path starting at v, and the successor achieving it.
        let mut tail = vec![0u64; self.node_count];
        let mut next: Vec<Option<u32>> = vec![None; self.node_count];
        for &v in order.iter().rev() {
            let v = v as usize;
            let mut best: Option<(u64, u32)> = None;
            for &s in &self.succs[v] {
                let t = tail[s as usize];
                if best.is_none_or(|(bt, _)| t > bt) {
                    best = Some((t, s));
                }
            }
            tail[v] = cost[v] + best.map_or(0, |(t, _)| t);
            next[v] = best.map(|(_, s)| s);
        }
        let mut start: Option<usize> = None;
        for v in 0..self.node_count {
            if self.preds[v].is_empty() && start.is_none_or(|s| tail[v] > tail[s]) {
                start = Some(v);
            }
        }
        let Some(start) = start else {
            return Ok((0, Vec::new()));
        };
        let mut path = vec![start as u32];
        let mut cur = start;
        while let Some(n) = next[cur] {
            path.push(n);
            cur = n as usize;
        }
        Ok((tail[start], path))
    }

    /// Latest start minus earliest start, with the makespan fixed to the
    /// critical-path length.
    pub fn node_slack(&self, cost: &[u64]) -> Result<Vec<u64>> {
        let (length, _) = self.critical_path(cost)?;
        let est = self.earliest_starts(cost)?;
        let mut lst = vec![0u64; self.node_count];
        for &v in self.topo_order()?.iter().rev() {
            let v = v as usize;
            let latest_finish = self.succs[v]
                .iter()
                .map(|&s| lst[s as usize])
                .min()
                .unwrap_or(length);
            lst[v] = latest_finish - cost[v];
        }
        Ok(lst.iter().zip(&est).map(|(l, e)| l - e).collect())
    }

    pub fn to_dot(&self, trace: &MicroOpTrace) -> String {
        let mut s =
            String::from("digraph micro_ops {\n  rankdir=LR;\n  node [shape=box, fontsize=10];\n");
        for op in &trace.ops {
            let _ = writeln!(
                s,
                "  n{} [label=\"{} {}\\nop{} m{} n{} k{}\"];",
                op.id, op.id, op.kind, op.source_operator, op.tile.m, op.tile.n, op.tile.k
            );
        }
        for (a, b) in self.edge_pairs() {
            let _ = writeln!(s, "  n{a} -> n{b};");
        }
        for &(a, b) in &self.war_constraints {
            let _ = writeln!(s, "  n{a} -> n{b} [style=dashed, color=gray];");
        }
        s.push_str("}\n");
        s
    }
}

/// Single forward pass over the trace with a per-buffer last-writer map.
pub fn build_dep_graph(trace: &MicroOpTrace) -> DepGraph {
    let mut writers: BTreeMap<BufferId, SegmentMap> = BTreeMap::new();
    let mut readers: BTreeMap<BufferId, Vec<(BufferInterval, u32)>> = BTreeMap::new();
    let mut raw = Vec::new();
    let mut war = BTreeSet::new();
    for op in &trace.ops {
        let mut seen = BTreeSet::new();
        for r in &op.reads {
            if let Some(map) = writers.get(&r.buffer) {
                for (s, e, w) in overlapping(map, r.offset, r.end()) {
                    if w != op.id && seen.insert(w) {
                        let lo = s.max(r.offset);
                        let hi = e.min(r.end());
                        raw.push(RawEdge {
                            from: w,
                            to: op.id,
                            witness: BufferInterval::new(r.buffer, lo, hi - lo, r.space),
                        });
                    }
                }
            }
        }
        for w in &op.writes {
            if let Some(list) = readers.get_mut(&w.buffer) {
                for (iv, reader) in list.iter() {
                    if *reader != op.id && iv.overlaps(w) {
                        war.insert((*reader, op.id));
                    }
                }
                list.retain(|(iv, _)| !w.covers(iv));
            }
            overwrite(
                writers.entry(w.buffer).or_default(),
                w.offset,
                w.end(),
                op.id,
            );
        }
        for r in &op.reads {
            readers.entry(r.buffer).or_default().push((*r, op.id));
        }
    }
    raw.sort();
    DepGraph::from_edges(trace.ops.len(), raw, war.into_iter().collect())
}

/// True when a Reduce combines several inputs without accumulating into
/// its own output.
fn is_splittable_reduce(op: &MicroOp) -> bool {
    op.kind == MicroOpKind::Reduce
        && op.reads.len() >= 2
        && !op
            .reads
            .iter()
            .any(|r| op.writes.iter().any(|w| w.overlaps(r)))
}

/// Splits each multi-input Reduce into one partial per input, placed right
/// after that input's last producer, plus a combining Reduce in the original
/// position. Ids are renumbered densely and the graph rebuilt.
pub fn split_reduction(graph: &DepGraph, trace: &MicroOpTrace) -> (DepGraph, MicroOpTrace) {
    if !trace.ops.iter().any(is_splittable_reduce) {
        return (graph.clone(), trace.clone());
    }
    let mut buffers = trace.buffers.clone();
    // Ids past anything the ops reference, declared or not.
    let mut next_buffer = trace
        .ops
        .iter()
        .flat_map(|o| o.reads.iter().chain(&o.writes))
        .map(|i| i.buffer.0 + 1)
        .chain([buffers.len() as u32])
        .max()
        .unwrap_or(0);
    let mut partial_buffers: BTreeMap<u32, BufferId> = BTreeMap::new();
    // Ops to insert right after a given original op id.
    let mut after: BTreeMap<u32, Vec<MicroOp>> = BTreeMap::new();
    // Partials with no producer, emitted just before their combine.
    let mut leading: BTreeMap<u32, Vec<MicroOp>> = BTreeMap::new();
    let mut replaced: BTreeMap<u32, MicroOp> = BTreeMap::new();
    let mut slot = 0u64;
    for op in trace.ops.iter().filter(|o| is_splittable_reduce(o)) {
        let buf = *partial_buffers
            .entry(op.source_operator)
            .or_insert_with(|| {
                let id = BufferId(next_buffer);
                next_buffer += 1;
                buffers.resize_with(id.0 as usize, || BufferInfo {
                    name: String::new(),
                    space: Space::Register,
                    usage: BufferUse::Register,
                });
                buffers.push(BufferInfo {
                    name: format!("op{}.partial", op.source_operator),
                    space: Space::Register,
                    usage: BufferUse::Register,
                });
                id
            });
        let mut partial_outs = Vec::new();
        for input in &op.reads {
            let producers: Vec<u32> = graph
                .raw_edges
                .iter()
                .filter(|e| e.to == op.id)
                .filter(|e| {
                    trace.ops[e.from as usize]
                        .writes
                        .iter()
                        .any(|w| w.overlaps(input))
                })
                .map(|e| e.from)
                .collect();
            let len = op.writes.first().map_or(64, |w| w.length);
            let out = BufferInterval::new(buf, slot * len, len, Space::Register);
            slot += 1;
            let partial = MicroOp {
                id: 0,
                kind: MicroOpKind::Reduce,
                reads: vec![*input],
                writes: vec![out],
                tile: op.tile,
                source_operator: op.source_operator,
                access: None,
            };
            match producers.iter().max() {
                Some(&p) => after.entry(p).or_default().push(partial),
                None => leading.entry(op.id).or_default().push(partial),
            }
            partial_outs.push(out);
        }
        replaced.insert(
            op.id,
            MicroOp {
                reads: partial_outs,
                ..op.clone()
            },
        );
    }
    let mut ops = Vec::with_capacity(trace.ops.len() + 2 * replaced.len());
    for op in &trace.ops {
        match replaced.get(&op.id) {
            Some(c) => {
                ops.extend(leading.get(&op.id).cloned().unwrap_or_default());
                ops.push(c.clone());
            }
            None => ops.push(op.clone()),
        }
        ops.extend(after.get(&op.id).cloned().unwrap_or_default());
    }
    let mut out = MicroOpTrace {
        buffers,
        ops,
        padding: trace.padding.clone(),
    };
    out.renumber();
    let g = build_dep_graph(&out);
    (g, out)
}
