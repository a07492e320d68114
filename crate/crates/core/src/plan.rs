//! Schedule candidates: role mapping, per-role program order, page plan,
//! resource filtering and plan validation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dag::{build_dep_graph, split_reduction, DepGraph};
use crate::error::{Error, Result};
use crate::hw::{compute_page_budget, compute_stage_count, HardwareSpec, PageBudget};
use crate::ir::{
    lower_graph, BufferInterval, BufferUse, MicroOpKind, MicroOpTrace, OperatorGraph, TileConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Launcher,
    Loader,
    Consumer,
    Storer,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Launcher, Role::Loader, Role::Consumer, Role::Storer];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub const LAUNCHER_WARPS: u32 = 1;
pub const LOADER_WARPS: u32 = 4;
pub const STORER_WARPS: u32 = 2;
pub const CONSUMER_WARP_CHOICES: [u32; 3] = [4, 8, 16];
/// Consumer warps that cooperate on one in-flight tile op.
pub const WARPS_PER_CONSUMER_LANE: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleWarps {
    pub launcher: u32,
    pub loader: u32,
    pub consumer: u32,
    pub storer: u32,
}

impl RoleWarps {
    pub fn with_consumer(consumer: u32) -> Self {
        RoleWarps {
            launcher: LAUNCHER_WARPS,
            loader: LOADER_WARPS,
            consumer,
            storer: STORER_WARPS,
        }
    }

    pub fn total(&self) -> u32 {
        self.launcher + self.loader + self.consumer + self.storer
    }

    /// Ops a role may have in flight at once.
    pub fn lanes(&self, role: Role) -> u32 {
        match role {
            Role::Launcher => self.launcher.max(1),
            Role::Loader => self.loader.max(1),
            Role::Consumer => (self.consumer / WARPS_PER_CONSUMER_LANE).max(1),
            Role::Storer => self.storer.max(1),
        }
    }
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct PlanFlags {
    pub gap_fill: bool,
    pub reuse_act_weight: bool,
    pub reuse_act_output: bool,
    pub split_reduction: bool,
    /// Dequant forwarded to the Loader.
    #[serde(default)]
    pub role_rebalance: bool,
}

/// The knobs that define a candidate; everything else is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanConfig {
    pub tile: TileConfig,
    pub n_stage: u32,
    pub consumer_warps: u32,
    pub prefetch_stride: u32,
    pub swizzle: u32,
    pub flags: PlanFlags,
}

impl PlanConfig {
    /// Canonical text form, used as the final tie-breaker between equal scores.
    pub fn encoding(&self) -> String {
        let b = |v: bool| if v { '1' } else { '0' };
        let t = &self.tile;
        format!(
            "m{:04}n{:04}k{:04}x{}-w{:02}-s{:02}-p{:02}-z{:04}-f{}{}{}{}{}",
            t.block_m,
            t.block_n,
            t.block_k,
            t.k_split,
            self.consumer_warps,
            self.n_stage,
            self.prefetch_stride,
            self.swizzle,
            b(self.flags.gap_fill),
            b(self.flags.reuse_act_weight),
            b(self.flags.reuse_act_output),
            b(self.flags.split_reduction),
            b(self.flags.role_rebalance),
        )
    }

    pub fn warps(&self) -> RoleWarps {
        RoleWarps::with_consumer(self.consumer_warps)
    }

    /// Loader fills may run ahead of the consumer by at most this many.
    pub fn max_stride(&self) -> u32 {
        self.n_stage.saturating_sub(1).max(1)
    }
}

/// A lowered trace with its dependency graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub tile: TileConfig,
    pub split_reduction: bool,
    pub trace: MicroOpTrace,
    pub graph: DepGraph,
}

impl Workload {
    pub fn from_trace(tile: TileConfig, trace: MicroOpTrace) -> Self {
        let graph = build_dep_graph(&trace);
        Workload {
            tile,
            split_reduction: false,
            trace,
            graph,
        }
    }
}

pub fn prepare_workload(
    graph: &OperatorGraph,
    tile: TileConfig,
    split: bool,
    hw: &HardwareSpec,
) -> Result<Workload> {
    let trace = lower_graph(graph, &tile, hw.page_size)?;
    let dag = build_dep_graph(&trace);
    let (dag, trace) = if split {
        split_reduction(&dag, &trace)
    } else {
        (dag, trace)
    };
    Ok(Workload {
        tile,
        split_reduction: split,
        trace,
        graph: dag,
    })
}

/// GlobalToShared→Loader; loads, dequant, MMA and epilogue→Consumer;
/// Reduce and write-back→Storer. The Launcher carries no trace ops.
pub fn default_role(kind: MicroOpKind) -> Role {
    match kind {
        MicroOpKind::GlobalToShared => Role::Loader,
        MicroOpKind::LoadSharedToReg
        | MicroOpKind::Dequant
        | MicroOpKind::MmaTile
        | MicroOpKind::Epilogue => Role::Consumer,
        MicroOpKind::Reduce | MicroOpKind::RegToGlobal => Role::Storer,
    }
}

pub fn default_role_map(trace: &MicroOpTrace) -> Vec<Role> {
    trace.ops.iter().map(|o| default_role(o.kind)).collect()
}

/// Each role's ops in program order.
pub fn program_orders(roles: &[Role]) -> BTreeMap<Role, Vec<u32>> {
    let mut orders: BTreeMap<Role, Vec<u32>> = Role::ALL.iter().map(|&r| (r, Vec::new())).collect();
    for (i, r) in roles.iter().enumerate() {
        orders.entry(*r).or_default().push(i as u32);
    }
    orders
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageAssignment {
    /// Op that fills the interval (acquire, then Ready on completion).
    pub writer: u32,
    pub interval: BufferInterval,
    pub page: u32,
    /// The page returns to Empty once all of these ops have finished.
    pub release_after: Vec<u32>,
}

impl PageAssignment {
    pub fn release_point(&self) -> u32 {
        self.release_after
            .iter()
            .copied()
            .max()
            .unwrap_or(self.writer)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PagePlan {
    pub n_pages: u32,
    /// In acquisition (program) order.
    pub assignments: Vec<PageAssignment>,
}

impl PagePlan {
    pub fn pages_used(&self) -> u32 {
        let mut seen = vec![false; self.n_pages as usize];
        for a in &self.assignments {
            if let Some(s) = seen.get_mut(a.page as usize) {
                *s = true;
            }
        }
        seen.iter().filter(|&&s| s).count() as u32
    }

    /// Assignment index of the occupant preceding `idx` on the same page.
    pub fn previous_occupants(&self) -> Vec<Option<usize>> {
        let mut last: BTreeMap<u32, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.assignments.len());
        for (i, a) in self.assignments.iter().enumerate() {
            out.push(last.insert(a.page, i));
        }
        out
    }

    /// Assignment indices written by each op, keyed by writer.
    pub fn by_writer(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, a) in self.assignments.iter().enumerate() {
            m.entry(a.writer).or_default().push(i);
        }
        m
    }

    /// For every shared read of `trace`, the assignment it reads from.
    pub fn reads_of(&self, trace: &MicroOpTrace) -> Vec<(u32, usize)> {
        let index = self.interval_index();
        let mut out = Vec::new();
        for op in &trace.ops {
            for r in op.shared_reads() {
                for i in lookup(&index, r) {
                    out.push((op.id, i));
                }
            }
        }
        out
    }

    fn interval_index(&self) -> BTreeMap<(u32, u64), (u64, usize)> {
        self.assignments
            .iter()
            .enumerate()
            .map(|(i, a)| {
                (
                    (a.interval.buffer.0, a.interval.offset),
                    (a.interval.end(), i),
                )
            })
            .collect()
    }
}

fn lookup(index: &BTreeMap<(u32, u64), (u64, usize)>, iv: &BufferInterval) -> Vec<usize> {
    let b = iv.buffer.0;
    let mut out = Vec::new();
    if let Some((&(_, _), &(end, i))) = index.range((b, 0)..(b, iv.offset)).next_back() {
        if end > iv.offset {
            out.push(i);
        }
    }
    for (_, &(_, i)) in index.range((b, iv.offset)..(b, iv.end())) {
        out.push(i);
    }
    out
}

/// Largest number of pages a single fill writes.
pub fn per_stage_pages(trace: &MicroOpTrace) -> u64 {
    trace
        .ops
        .iter()
        .filter(|o| o.kind == MicroOpKind::GlobalToShared)
        .map(|o| o.shared_writes().count() as u64)
        .max()
        .unwrap_or(0)
}

/// Pages reserved for output staging outside the stage buffers.
pub fn output_reserve(flags: &PlanFlags) -> u64 {
    if flags.reuse_act_output {
        0
    } else {
        1
    }
}

/// Page pool of a candidate: the stage buffers plus any output reserve.
pub fn pool_pages(config: &PlanConfig, trace: &MicroOpTrace) -> u64 {
    config.n_stage as u64 * per_stage_pages(trace) + output_reserve(&config.flags)
}

/// Assigns every shared interval a page by walking the trace in program
/// order with a circular cursor. A page is free for op `a` once every op in
/// its occupant's release set precedes `a`.
pub fn plan_pages(
    trace: &MicroOpTrace,
    war_constraints: &[(u32, u32)],
    n_pages: u32,
    flags: &PlanFlags,
) -> Result<PagePlan> {
    // Readers of each written interval, found by overlap.
    let mut written: Vec<(u32, BufferInterval)> = Vec::new();
    for op in &trace.ops {
        for w in op.shared_writes() {
            written.push((op.id, *w));
        }
    }
    // Readers of each written interval: later ops overlapping it, up to the
    // next write of the same bytes.
    let mut readers: Vec<Vec<u32>> = vec![Vec::new(); written.len()];
    let mut live: BTreeMap<(u32, u64), (u64, usize)> = BTreeMap::new();
    let mut next_write = 0;
    for op in &trace.ops {
        for r in op.shared_reads() {
            for i in lookup(&live, r) {
                if !readers[i].contains(&op.id) {
                    readers[i].push(op.id);
                }
            }
        }
        while next_write < written.len() && written[next_write].0 == op.id {
            let iv = written[next_write].1;
            for i in lookup(&live, &iv) {
                let old = written[i].1;
                live.remove(&(old.buffer.0, old.offset));
            }
            live.insert((iv.buffer.0, iv.offset), (iv.end(), next_write));
            next_write += 1;
        }
    }
    // A WAR pair on a shared interval keeps the earlier reader in the
    // release set of whatever that reader saw.
    let shared_war = war_constraints
        .iter()
        .filter(|(_, w)| trace.ops[*w as usize].shared_writes().next().is_some());
    for &(reader, overwriter) in shared_war {
        for i in 0..written.len() {
            if written[i].0 < reader
                && trace.ops[overwriter as usize]
                    .shared_writes()
                    .any(|w| w.overlaps(&written[i].1))
                && trace.ops[reader as usize]
                    .shared_reads()
                    .any(|r| r.overlaps(&written[i].1))
                && !readers[i].contains(&reader)
            {
                readers[i].push(reader);
            }
        }
    }
    for r in readers.iter_mut() {
        r.sort_unstable();
    }

    let mut release_sets: Vec<Vec<u32>> = Vec::with_capacity(written.len());
    let mut i = 0;
    while i < written.len() {
        let writer = written[i].0;
        let mut j = i;
        while j < written.len() && written[j].0 == writer {
            j += 1;
        }
        let mut group: Vec<u32> = readers[i..j].iter().flatten().copied().collect();
        group.sort_unstable();
        group.dedup();
        for k in i..j {
            let own_only = flags.reuse_act_weight
                && trace.usage_of(&written[k].1) == BufferUse::ActStage
                && !readers[k].is_empty();
            let mut set = if own_only {
                readers[k].clone()
            } else {
                group.clone()
            };
            if set.is_empty() {
                set.push(writer);
            }
            set.sort_unstable();
            release_sets.push(set);
        }
        i = j;
    }

    let n = n_pages as usize;
    let mut occupant: Vec<Option<usize>> = vec![None; n];
    let mut cursor = 0usize;
    let mut plan = PagePlan {
        n_pages,
        assignments: Vec::with_capacity(written.len()),
    };
    let free_for = |occ: &Option<usize>, plan: &PagePlan, a: u32| match occ {
        None => true,
        Some(k) => plan.assignments[*k].release_point() < a,
    };
    // Most recently released activation page, as (release point, page).
    let mut last_act: Option<(u32, u32, usize)> = None;
    let mut k = 0;
    while k < written.len() {
        let writer = written[k].0;
        let mut taken: Vec<usize> = Vec::new();
        while k < written.len() && written[k].0 == writer {
            let iv = written[k].1;
            let usage = trace.usage_of(&iv);
            let mut chosen = None;
            if flags.reuse_act_output && usage == BufferUse::OutStage {
                if let Some((point, page, idx)) = last_act {
                    let p = page as usize;
                    if point < writer && occupant[p] == Some(idx) && !taken.contains(&p) {
                        chosen = Some(p);
                    }
                }
            }
            if chosen.is_none() {
                for step in 0..n {
                    let p = (cursor + step) % n;
                    if !taken.contains(&p) && free_for(&occupant[p], &plan, writer) {
                        chosen = Some(p);
                        cursor = (p + 1) % n.max(1);
                        break;
                    }
                }
            }
            let Some(p) = chosen else {
                return Err(Error::InsufficientPages {
                    op: writer,
                    interval: k,
                    pages: n_pages,
                });
            };
            taken.push(p);
            let release_after = release_sets[k].clone();
            let idx = plan.assignments.len();
            plan.assignments.push(PageAssignment {
                writer,
                interval: iv,
                page: p as u32,
                release_after,
            });
            occupant[p] = Some(idx);
            k += 1;
        }
        // Track act pages by their release point for output reuse.
        for a in plan
            .assignments
            .iter()
            .enumerate()
            .skip(plan.assignments.len() - taken.len())
        {
            let (idx, a) = a;
            if trace.usage_of(&a.interval) == BufferUse::ActStage {
                let point = a.release_point();
                if last_act.is_none_or(|(pp, _, _)| point >= pp) {
                    last_act = Some((point, a.page, idx));
                }
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub config: PlanConfig,
    pub warps: RoleWarps,
    /// Role of every op, indexed by op id.
    pub roles: Vec<Role>,
    /// Issue order per role.
    pub orders: BTreeMap<Role, Vec<u32>>,
    pub page_plan: PagePlan,
}

impl PlanCandidate {
    pub fn order(&self, role: Role) -> &[u32] {
        self.orders.get(&role).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Default candidate for `config`: kind-based roles, program order and a
/// circular page plan over the candidate's pool.
pub fn build_candidate(config: &PlanConfig, workload: &Workload) -> Result<PlanCandidate> {
    config.tile.validate()?;
    if config.tile != workload.tile || config.flags.split_reduction != workload.split_reduction {
        return Err(Error::invalid(
            "plan config",
            "workload was lowered for a different tile or reduction split",
        ));
    }
    if config.prefetch_stride == 0 {
        return Err(Error::invalid(
            "plan config",
            "prefetch stride must be at least 1",
        ));
    }
    let n_pages = pool_pages(config, &workload.trace);
    let page_plan = plan_pages(
        &workload.trace,
        &workload.graph.war_constraints,
        n_pages as u32,
        &config.flags,
    )?;
    let roles = default_role_map(&workload.trace);
    let orders = program_orders(&roles);
    Ok(PlanCandidate {
        config: *config,
        warps: config.warps(),
        roles,
        orders,
        page_plan,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PruneReason {
    SmemExceeded,
    StageInfeasible,
    WarpExceeded,
}

impl fmt::Display for PruneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Stage-count ceiling for a candidate: the stage-buffer pages left after
/// the output reserve, divided by pages per stage.
pub fn stage_ceiling(config: &PlanConfig, trace: &MicroOpTrace, hw: &HardwareSpec) -> Result<u64> {
    compute_stage_count(&PageBudget {
        n_page_total: compute_page_budget(hw, config.n_stage as u64),
        n_page_weight: 0,
        n_page_scale: 0,
        n_page_act: output_reserve(&config.flags),
        n_page_per_stage: per_stage_pages(trace).max(1),
        n_stage: config.n_stage as u64,
    })
}

/// Checks that need no page plan, in order: warps, peak pages, stage count.
pub fn precheck(
    config: &PlanConfig,
    workload: &Workload,
    hw: &HardwareSpec,
) -> Option<PruneReason> {
    if config.warps().total() > hw.warps_per_sm {
        return Some(PruneReason::WarpExceeded);
    }
    if pool_pages(config, &workload.trace) > compute_page_budget(hw, config.n_stage as u64) {
        return Some(PruneReason::SmemExceeded);
    }
    let ceiling = stage_ceiling(config, &workload.trace, hw).unwrap_or(0);
    if config.n_stage == 0
        || ceiling < config.n_stage as u64
        || config.prefetch_stride > config.max_stride()
    {
        return Some(PruneReason::StageInfeasible);
    }
    None
}

/// Builds the candidate or names the resource it exceeds.
pub fn realize_candidate(
    config: &PlanConfig,
    workload: &Workload,
    hw: &HardwareSpec,
) -> Result<std::result::Result<PlanCandidate, PruneReason>> {
    if let Some(reason) = precheck(config, workload, hw) {
        return Ok(Err(reason));
    }
    match build_candidate(config, workload) {
        Ok(c) => Ok(Ok(c)),
        Err(Error::InsufficientPages { .. }) => Ok(Err(PruneReason::SmemExceeded)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Prune(PruneReason),
}

pub fn resource_filter(
    candidate: &PlanCandidate,
    workload: &Workload,
    hw: &HardwareSpec,
) -> Verdict {
    if candidate.warps.total() > hw.warps_per_sm {
        return Verdict::Prune(PruneReason::WarpExceeded);
    }
    let budget = compute_page_budget(hw, candidate.config.n_stage as u64);
    if candidate.page_plan.n_pages as u64 > budget
        || candidate.page_plan.pages_used() as u64 > budget
    {
        return Verdict::Prune(PruneReason::SmemExceeded);
    }
    match precheck(&candidate.config, workload, hw) {
        Some(r) => Verdict::Prune(r),
        None => Verdict::Keep,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// A page was re-acquired while its previous occupant was still Ready,
    /// or released before it was filled.
    IllegalTransition {
        page: u32,
        at_op: u32,
    },
    /// An interval is read after its page may already hold other data.
    WarViolation {
        page: u32,
        reader: u32,
    },
    /// A role's issue order contradicts a data dependency.
    OrderViolation {
        role: Role,
        from: u32,
        to: u32,
    },
    StrideViolation {
        stride: u32,
        limit: u32,
    },
    MissingRole {
        op: u32,
    },
    MissingPage {
        op: u32,
    },
    PageOutOfRange {
        page: u32,
        pages: u32,
    },
}

pub fn validate_plan(candidate: &PlanCandidate, workload: &Workload) -> Vec<Violation> {
    let trace = &workload.trace;
    let mut v = Vec::new();
    let n = trace.ops.len();
    if candidate.roles.len() != n {
        for op in candidate.roles.len()..n {
            v.push(Violation::MissingRole { op: op as u32 });
        }
    }
    // Each op must appear exactly once, in the order of its role.
    let mut position = vec![None; n];
    for (role, order) in &candidate.orders {
        for (i, &op) in order.iter().enumerate() {
            if let Some(p) = position.get_mut(op as usize) {
                if candidate.roles.get(op as usize) == Some(role) {
                    *p = Some(i);
                }
            }
        }
    }
    for (op, p) in position.iter().enumerate() {
        if p.is_none() && op < candidate.roles.len() {
            v.push(Violation::MissingRole { op: op as u32 });
        }
    }
    for e in workload.graph.edge_pairs() {
        let (a, b) = (e.0 as usize, e.1 as usize);
        if a < candidate.roles.len()
            && b < candidate.roles.len()
            && candidate.roles[a] == candidate.roles[b]
        {
            if let (Some(pa), Some(pb)) = (position[a], position[b]) {
                if pa > pb {
                    v.push(Violation::OrderViolation {
                        role: candidate.roles[a],
                        from: e.0,
                        to: e.1,
                    });
                }
            }
        }
    }

    let plan = &candidate.page_plan;
    let mut covered = vec![0usize; n];
    for a in &plan.assignments {
        if a.page >= plan.n_pages {
            v.push(Violation::PageOutOfRange {
                page: a.page,
                pages: plan.n_pages,
            });
        }
        if let Some(c) = covered.get_mut(a.writer as usize) {
            *c += 1;
        }
        if a.release_after.is_empty() || a.release_after.iter().any(|&r| r < a.writer) {
            v.push(Violation::IllegalTransition {
                page: a.page,
                at_op: a.writer,
            });
        }
    }
    for op in &trace.ops {
        if op.shared_writes().count() > covered[op.id as usize] {
            v.push(Violation::MissingPage { op: op.id });
        }
    }
    let prev = plan.previous_occupants();
    for (i, a) in plan.assignments.iter().enumerate() {
        if let Some(p) = prev[i] {
            let before = &plan.assignments[p];
            if a.writer <= before.release_point() {
                v.push(Violation::IllegalTransition {
                    page: a.page,
                    at_op: a.writer,
                });
            }
        }
    }
    for (reader, i) in plan.reads_of(trace) {
        let a = &plan.assignments[i];
        if !a.release_after.contains(&reader) {
            v.push(Violation::WarViolation {
                page: a.page,
                reader,
            });
        }
    }
    let limit = candidate.config.max_stride();
    if candidate.config.prefetch_stride > limit || candidate.config.prefetch_stride == 0 {
        v.push(Violation::StrideViolation {
            stride: candidate.config.prefetch_stride,
            limit,
        });
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BufferDecl, DType, Dims, Operator, OperatorKind, Space};

    pub(crate) fn tiny_gemm(dtype: DType) -> OperatorGraph {
        OperatorGraph {
            buffers: vec![
                BufferDecl {
                    id: "x".into(),
                    space: Space::Global,
                    bytes: 512,
                },
                BufferDecl {
                    id: "w".into(),
                    space: Space::Global,
                    bytes: 256,
                },
                BufferDecl {
                    id: "y".into(),
                    space: Space::Global,
                    bytes: 256,
                },
            ],
            operators: vec![Operator {
                id: "gemm".into(),
                kind: OperatorKind::Gemm,
                dims: Dims {
                    m: Some(16),
                    n: Some(8),
                    k: Some(16),
                },
                dtype,
                inputs: vec!["x".into()],
                outputs: vec!["y".into()],
                weight: Some("w".into()),
            }],
        }
    }

    fn config(tile: TileConfig) -> PlanConfig {
        PlanConfig {
            tile,
            n_stage: 2,
            consumer_warps: 16,
            prefetch_stride: 1,
            swizzle: 0,
            flags: PlanFlags::default(),
        }
    }

    #[test]
    fn role_counts_on_single_tile_gemm() {
        let hw = HardwareSpec::default();
        for (dtype, consumer) in [(DType::Fp16, 4), (DType::Int4W4A16, 5)] {
            let w = prepare_workload(&tiny_gemm(dtype), TileConfig::mma(), false, &hw).unwrap();
            let roles = default_role_map(&w.trace);
            let count = |r| roles.iter().filter(|&&x| x == r).count();
            assert_eq!(
                (
                    count(Role::Loader),
                    count(Role::Consumer),
                    count(Role::Storer)
                ),
                (1, consumer, 1)
            );
            assert_eq!(count(Role::Launcher), 0);
        }
        assert!(default_role_map(&MicroOpTrace::default()).is_empty());
    }

    #[test]
    fn reuse_act_weight_releases_act_page_one_event_earlier() {
        let hw = HardwareSpec::default();
        let w = prepare_workload(&tiny_gemm(DType::Fp16), TileConfig::mma(), false, &hw).unwrap();
        let act_release = |flags: PlanFlags| {
            let plan = plan_pages(&w.trace, &w.graph.war_constraints, 3, &flags).unwrap();
            plan.assignments
                .iter()
                .find(|a| w.trace.usage_of(&a.interval) == BufferUse::ActStage)
                .unwrap()
                .release_point()
        };
        let base = act_release(PlanFlags::default());
        let reuse = act_release(PlanFlags {
            reuse_act_weight: true,
            ..PlanFlags::default()
        });
        assert_eq!(base, reuse + 1);
    }

    #[test]
    fn warp_budget_prunes() {
        let hw = HardwareSpec {
            warps_per_sm: 24,
            ..HardwareSpec::default()
        };
        let w = prepare_workload(&tiny_gemm(DType::Fp16), TileConfig::mma(), false, &hw).unwrap();
        let c = config(TileConfig::mma());
        // 1 + 4 + 16 + 2 = 23 fits, 8 more would not.
        assert!(precheck(&c, &w, &hw).is_none());
        let wide = PlanConfig {
            consumer_warps: 32,
            ..c
        };
        assert_eq!(precheck(&wide, &w, &hw), Some(PruneReason::WarpExceeded));
    }

    #[test]
    fn default_plans_validate_clean() {
        let hw = HardwareSpec::default();
        for dtype in [DType::Fp16, DType::Int4W4A16] {
            let w = prepare_workload(&tiny_gemm(dtype), TileConfig::mma(), false, &hw).unwrap();
            for flags in [
                PlanFlags::default(),
                PlanFlags {
                    reuse_act_weight: true,
                    reuse_act_output: true,
                    ..PlanFlags::default()
                },
            ] {
                let c = build_candidate(
                    &PlanConfig {
                        flags,
                        ..config(TileConfig::mma())
                    },
                    &w,
                )
                .unwrap();
                assert_eq!(validate_plan(&c, &w), vec![]);
            }
        }
    }
}
