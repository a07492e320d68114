#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mk_planner::hw::HardwareSpec;
use mk_planner::ir::{
    load_graph, BufferId, BufferInterval, MicroOp, MicroOpKind, MicroOpTrace, OperatorGraph, Space,
    TileCoord,
};
use mk_planner::search::SearchSpace;
use proptest::prelude::*;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn graph(name: &str) -> OperatorGraph {
    load_graph(&fixtures().join(name)).unwrap()
}

pub fn hw(name: &str) -> HardwareSpec {
    HardwareSpec::load(&fixtures().join("hw").join(name)).unwrap()
}

pub fn space(name: &str) -> SearchSpace {
    SearchSpace::load(&fixtures().join("space").join(name)).unwrap()
}

pub fn iv(buf: u32, off: u64, len: u64) -> BufferInterval {
    BufferInterval::new(BufferId(buf), off, len, Space::Register)
}

fn interval() -> impl Strategy<Value = BufferInterval> {
    (0u32..4, 0u64..48, 1u64..16).prop_map(|(b, o, l)| iv(b, o, l))
}

pub type RawOp = (bool, Vec<BufferInterval>, Vec<BufferInterval>);

fn raw_op() -> impl Strategy<Value = RawOp> {
    (
        any::<bool>(),
        prop::collection::vec(interval(), 0..4),
        prop::collection::vec(interval(), 1..3),
    )
}

/// Reduce or Epilogue ops with the given reads and writes. Each op's
/// source tag is its own index so it can be followed through renumbering.
pub fn build_trace(raw: Vec<RawOp>) -> MicroOpTrace {
    let ops = raw
        .into_iter()
        .enumerate()
        .map(|(i, (reduce, reads, writes))| MicroOp {
            id: i as u32,
            kind: if reduce {
                MicroOpKind::Reduce
            } else {
                MicroOpKind::Epilogue
            },
            reads,
            writes,
            tile: TileCoord::default(),
            source_operator: i as u32,
            access: None,
        })
        .collect();
    MicroOpTrace {
        buffers: vec![],
        ops,
        padding: vec![],
    }
}

pub fn traces(max: usize) -> impl Strategy<Value = MicroOpTrace> {
    prop::collection::vec(raw_op(), 0..=max).prop_map(build_trace)
}

/// For every byte an op reads, the closest earlier op that wrote it.
pub fn brute_force_raw(trace: &MicroOpTrace) -> BTreeSet<(u32, u32)> {
    let mut edges = BTreeSet::new();
    for (j, reader) in trace.ops.iter().enumerate() {
        for r in &reader.reads {
            for byte in r.offset..r.end() {
                let probe = iv(r.buffer.0, byte, 1);
                let last = (0..j)
                    .rev()
                    .find(|&i| trace.ops[i].writes.iter().any(|w| w.overlaps(&probe)));
                if let Some(i) = last {
                    edges.insert((i as u32, j as u32));
                }
            }
        }
    }
    edges
}
