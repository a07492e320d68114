//! The solidified trace: a search winner serialized for replay.
//!
//! Serialization is canonical compact JSON (struct fields in declaration
//! order, maps sorted) followed by a newline. `content_hash` is the SHA-256
//! of that encoding with the hash field left empty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hw::HardwareSpec;
use crate::ir::{MicroOpKind, OperatorGraph};
use crate::plan::{prepare_workload, PlanCandidate, Role, Workload};
use crate::search::{Score, SearchOutcome, SearchSpace, SearchStats};
use crate::sim::{simulate, SimReport};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::parse("canonical encoding", e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub graph_hash: String,
    pub hw_hash: String,
    pub space_hash: String,
    pub tool_version: String,
}

impl TraceHeader {
    pub fn new(graph: &OperatorGraph, hw: &HardwareSpec, space: &SearchSpace) -> Result<Self> {
        Ok(TraceHeader {
            graph_hash: canonical_hash(graph)?,
            hw_hash: canonical_hash(hw)?,
            space_hash: canonical_hash(space)?,
            tool_version: TOOL_VERSION.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledOp {
    pub op: u32,
    pub kind: MicroOpKind,
    pub start: u64,
    pub finish: u64,
    /// Pages this op fills, then pages it reads.
    pub pages_written: Vec<u32>,
    pub pages_read: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSequence {
    pub role: Role,
    pub ops: Vec<ScheduledOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolidifiedTrace {
    pub format_version: u32,
    pub header: TraceHeader,
    pub plan: PlanCandidate,
    pub sequences: Vec<RoleSequence>,
    pub score: Score,
    pub stats: SearchStats,
    pub content_hash: String,
}

pub fn role_sequences(
    candidate: &PlanCandidate,
    workload: &Workload,
    report: &SimReport,
) -> Vec<RoleSequence> {
    let plan = &candidate.page_plan;
    let mut written: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for a in &plan.assignments {
        written.entry(a.writer).or_default().push(a.page);
    }
    let mut read: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (reader, idx) in plan.reads_of(&workload.trace) {
        read.entry(reader)
            .or_default()
            .push(plan.assignments[idx].page);
    }
    Role::ALL
        .iter()
        .map(|&role| RoleSequence {
            role,
            ops: candidate
                .order(role)
                .iter()
                .map(|&op| ScheduledOp {
                    op,
                    kind: workload.trace.ops[op as usize].kind,
                    start: report.start[op as usize],
                    finish: report.finish[op as usize],
                    pages_written: written.get(&op).cloned().unwrap_or_default(),
                    pages_read: read.get(&op).cloned().unwrap_or_default(),
                })
                .collect(),
        })
        .collect()
}

impl SolidifiedTrace {
    pub fn from_outcome(
        outcome: &SearchOutcome,
        graph: &OperatorGraph,
        hw: &HardwareSpec,
        space: &SearchSpace,
    ) -> Result<Self> {
        let workload = prepare_workload(
            graph,
            outcome.winner.config.tile,
            outcome.winner.config.flags.split_reduction,
            hw,
        )?;
        let mut t = SolidifiedTrace {
            format_version: FORMAT_VERSION,
            header: TraceHeader::new(graph, hw, space)?,
            sequences: role_sequences(&outcome.winner, &workload, &outcome.report),
            plan: outcome.winner.clone(),
            score: Score::of(&outcome.report),
            stats: outcome.stats.clone(),
            content_hash: String::new(),
        };
        t.content_hash = t.compute_hash()?;
        Ok(t)
    }

    fn compute_hash(&self) -> Result<String> {
        let mut blank = self.clone();
        blank.content_hash.clear();
        let bytes = serde_json::to_vec(&blank).map_err(|e| Error::parse("trace", e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self).map_err(|e| Error::parse("trace", e))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Parses and checks the format version and content hash.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::parse("trace", e))?;
        let found = value.get("format_version").and_then(|v| v.as_u64());
        match found {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v as u32,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(Error::parse("trace", "missing format_version")),
        }
        let trace: SolidifiedTrace = serde_path_parse(bytes)?;
        let expected = trace.compute_hash()?;
        if expected != trace.content_hash {
            return Err(Error::HashMismatch {
                field: "content_hash",
                expected,
                found: trace.content_hash,
            });
        }
        Ok(trace)
    }

    /// Checks the header against the given inputs.
    pub fn verify_inputs(&self, graph: &OperatorGraph, hw: &HardwareSpec) -> Result<()> {
        for (field, expected, found) in [
            (
                "header.graph_hash",
                canonical_hash(graph)?,
                &self.header.graph_hash,
            ),
            ("header.hw_hash", canonical_hash(hw)?, &self.header.hw_hash),
        ] {
            if &expected != found {
                return Err(Error::HashMismatch {
                    field,
                    expected,
                    found: found.clone(),
                });
            }
        }
        Ok(())
    }

    /// Re-simulates the embedded plan; returns the fresh report when it
    /// reproduces the embedded score exactly.
    pub fn resimulate(&self, graph: &OperatorGraph, hw: &HardwareSpec) -> Result<SimReport> {
        let cfg = &self.plan.config;
        let workload = prepare_workload(graph, cfg.tile, cfg.flags.split_reduction, hw)?;
        let report = simulate(&self.plan, &workload, hw)?;
        if Score::of(&report) != self.score {
            return Err(Error::HashMismatch {
                field: "score",
                expected: format!("{:?}", self.score),
                found: format!("{:?}", Score::of(&report)),
            });
        }
        Ok(report)
    }
}

fn serde_path_parse(bytes: &[u8]) -> Result<SolidifiedTrace> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let t = SolidifiedTrace::deserialize(&mut de).map_err(|e| Error::parse("trace", e))?;
    de.end().map_err(|e| Error::parse("trace", e))?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: String,
    pub a: String,
    pub b: String,
}

/// Field-wise differences between two traces of the same graph.
pub fn compare_traces(a: &SolidifiedTrace, b: &SolidifiedTrace) -> Result<Vec<FieldDiff>> {
    if a.header.graph_hash != b.header.graph_hash {
        return Err(Error::HashMismatch {
            field: "header.graph_hash",
            expected: a.header.graph_hash.clone(),
            found: b.header.graph_hash.clone(),
        });
    }
    let mut out = Vec::new();
    let mut push = |field: &str, x: String, y: String| {
        if x != y {
            out.push(FieldDiff {
                field: field.to_string(),
                a: x,
                b: y,
            });
        }
    };
    let (ca, cb) = (&a.plan.config, &b.plan.config);
    push(
        "score.duty_cycle",
        a.score.duty_cycle.to_string(),
        b.score.duty_cycle.to_string(),
    );
    push(
        "score.makespan",
        a.score.makespan.to_string(),
        b.score.makespan.to_string(),
    );
    push(
        "plan.n_stage",
        ca.n_stage.to_string(),
        cb.n_stage.to_string(),
    );
    push(
        "plan.tile",
        format!("{:?}", ca.tile),
        format!("{:?}", cb.tile),
    );
    push(
        "plan.consumer_warps",
        ca.consumer_warps.to_string(),
        cb.consumer_warps.to_string(),
    );
    push(
        "plan.prefetch_stride",
        ca.prefetch_stride.to_string(),
        cb.prefetch_stride.to_string(),
    );
    push(
        "plan.swizzle",
        ca.swizzle.to_string(),
        cb.swizzle.to_string(),
    );
    push(
        "plan.flags",
        format!("{:?}", ca.flags),
        format!("{:?}", cb.flags),
    );
    push(
        "plan.roles",
        format!("{:?}", a.plan.orders),
        format!("{:?}", b.plan.orders),
    );
    push(
        "plan.page_plan",
        canonical_hash(&a.plan.page_plan).unwrap_or_default(),
        canonical_hash(&b.plan.page_plan).unwrap_or_default(),
    );
    Ok(out)
}
