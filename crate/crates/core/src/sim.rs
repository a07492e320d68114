//! Cycle-level replay of a plan candidate.
//!
//! Every role issues its ops strictly in plan order. An op starts at the
//! first cycle where its role has a free lane and issue slot, its RAW
//! producers have finished, the pages it fills have been released by their
//! previous occupant, and (for fills) the prefetch window allows it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw::{bank_conflict_factor, micro_op_cost, HardwareSpec};
use crate::ir::{MicroOpKind, MicroOpTrace};
use crate::plan::{PlanCandidate, Role, Workload};

/// Cycles an op occupies its lane, and the part of that spent on useful
/// work (the rest is bank-conflict replay).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCost {
    pub base: u64,
    pub total: u64,
}

pub fn op_costs(trace: &MicroOpTrace, hw: &HardwareSpec, swizzle: u32) -> Result<Vec<OpCost>> {
    trace
        .ops
        .iter()
        .map(|op| {
            let conflict = op
                .access
                .map(|a| bank_conflict_factor(&a.with_swizzle(swizzle), hw))
                .unwrap_or(1);
            let total = micro_op_cost(op, hw, conflict)?;
            Ok(OpCost {
                base: u64::from(hw.latency(op.kind)?).max(1).min(total),
                total,
            })
        })
        .collect()
}

pub fn total_costs(costs: &[OpCost]) -> Vec<u64> {
    costs.iter().map(|c| c.total).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTime {
    pub busy: u64,
    pub idle: u64,
}

/// Consumer idle cycles by cause; the three fields sum to Consumer idle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StallBreakdown {
    pub page_wait: u64,
    pub dep_wait: u64,
    pub issue_wait: u64,
}

impl StallBreakdown {
    pub fn total(&self) -> u64 {
        self.page_wait + self.dep_wait + self.issue_wait
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("DepWait", self.dep_wait),
            ("IssueWait", self.issue_wait),
            ("PageWait", self.page_wait),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Finish,
    PageEmpty { page: u32 },
    Start,
    PageLocked { page: u32 },
    PageReady { page: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: u64,
    pub role: Role,
    pub op: u32,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: u64,
    pub duty_cycle: f64,
    pub consumer_busy: u64,
    pub roles: BTreeMap<Role, RoleTime>,
    pub stalls: StallBreakdown,
    pub start: Vec<u64>,
    pub finish: Vec<u64>,
    pub events: Vec<SimEvent>,
}

impl SimReport {
    pub fn role(&self, role: Role) -> RoleTime {
        self.roles.get(&role).copied().unwrap_or_default()
    }

    pub fn idle_fraction(&self, role: Role) -> f64 {
        if self.makespan == 0 {
            return 0.0;
        }
        self.role(role).idle as f64 / self.makespan as f64
    }

    /// Orders by duty cycle (exactly, as a ratio), then by shorter makespan.
    pub fn better_than(&self, other: &SimReport) -> std::cmp::Ordering {
        let lhs = u128::from(self.consumer_busy) * u128::from(other.makespan.max(1));
        let rhs = u128::from(other.consumer_busy) * u128::from(self.makespan.max(1));
        lhs.cmp(&rhs).then(other.makespan.cmp(&self.makespan))
    }

    /// Start and finish times rebuilt from the event log.
    pub fn replay_times(&self) -> (Vec<u64>, Vec<u64>) {
        let mut start = vec![0; self.start.len()];
        let mut finish = vec![0; self.finish.len()];
        for e in &self.events {
            match e.kind {
                EventKind::Start => start[e.op as usize] = e.time,
                EventKind::Finish => finish[e.op as usize] = e.time,
                _ => {}
            }
        }
        (start, finish)
    }
}

/// Relative drop in duty cycle from `a` to `b`.
pub fn duty_cycle_loss(a: &SimReport, b: &SimReport) -> Result<f64> {
    if a.duty_cycle == 0.0 {
        return Err(Error::invalid(
            "duty cycle loss",
            "reference duty cycle is zero",
        ));
    }
    Ok((a.duty_cycle - b.duty_cycle) / a.duty_cycle)
}

pub fn stall_breakdown(report: &SimReport) -> BTreeMap<&'static str, u64> {
    report.stalls.as_map()
}

fn union_length(mut spans: Vec<(u64, u64)>) -> u64 {
    spans.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(u64, u64)> = None;
    for (s, e) in spans {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

struct Constraints {
    /// Latest finish of producers whose output arrives through a page.
    page: u64,
    /// Latest finish of other producers.
    dep: u64,
}

pub fn simulate(
    candidate: &PlanCandidate,
    workload: &Workload,
    hw: &HardwareSpec,
) -> Result<SimReport> {
    let costs = op_costs(&workload.trace, hw, candidate.config.swizzle)?;
    simulate_with_costs(candidate, workload, hw, &costs)
}

pub fn simulate_with_costs(
    candidate: &PlanCandidate,
    workload: &Workload,
    hw: &HardwareSpec,
    costs: &[OpCost],
) -> Result<SimReport> {
    let trace = &workload.trace;
    let graph = &workload.graph;
    let n = trace.ops.len();
    if n == 0 {
        return Err(Error::EmptyTrace);
    }
    if candidate.roles.len() != n || costs.len() != n {
        return Err(Error::invalid(
            "plan",
            "role map or cost table does not cover the trace",
        ));
    }
    let plan = &candidate.page_plan;
    let by_writer = plan.by_writer();
    let prev = plan.previous_occupants();

    // Producers reached through a page: writers of intervals this op reads.
    let mut page_producers: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut fill_readers: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (reader, idx) in plan.reads_of(trace) {
        let w = plan.assignments[idx].writer;
        if !page_producers[reader as usize].contains(&w) {
            page_producers[reader as usize].push(w);
        }
        let list = fill_readers.entry(w).or_default();
        if !list.contains(&reader) {
            list.push(reader);
        }
    }
    // Fills in Loader issue order.
    let fills: Vec<u32> = Role::ALL
        .iter()
        .flat_map(|r| candidate.order(*r).iter().copied())
        .filter(|&op| trace.ops[op as usize].kind == MicroOpKind::GlobalToShared)
        .collect();
    let mut fill_index = vec![usize::MAX; n];
    for (i, &f) in fills.iter().enumerate() {
        fill_index[f as usize] = i;
    }
    let stride = candidate.config.prefetch_stride.max(1) as usize;
    let issue_width = hw.issue_width.max(1) as usize;

    let mut start: Vec<Option<u64>> = vec![None; n];
    let mut finish: Vec<u64> = vec![0; n];
    let mut page_t = vec![0u64; n];
    let mut dep_t = vec![0u64; n];
    let mut pos = [0usize; 4];
    let mut lanes: Vec<Vec<u64>> = Role::ALL
        .iter()
        .map(|&r| vec![0u64; candidate.warps.lanes(r) as usize])
        .collect();
    let mut done = 0usize;

    let release_of = |idx: usize, start: &[Option<u64>], finish: &[u64]| -> Option<u64> {
        let a = &plan.assignments[idx];
        let mut t = 0;
        for &r in &a.release_after {
            start[r as usize]?;
            t = t.max(finish[r as usize]);
        }
        Some(t)
    };

    while done < n {
        let mut progressed = false;
        for role in Role::ALL {
            let order = candidate.order(role);
            'issue: while pos[role.index()] < order.len() {
                let i = pos[role.index()];
                let op = order[i] as usize;
                let mut c = Constraints { page: 0, dep: 0 };
                for &p in graph.preds(op as u32) {
                    if start[p as usize].is_none() {
                        break 'issue;
                    }
                    if page_producers[op].contains(&p) {
                        c.page = c.page.max(finish[p as usize]);
                    } else {
                        c.dep = c.dep.max(finish[p as usize]);
                    }
                }
                for &p in &page_producers[op] {
                    if start[p as usize].is_none() {
                        break 'issue;
                    }
                    c.page = c.page.max(finish[p as usize]);
                }
                if let Some(idxs) = by_writer.get(&(op as u32)) {
                    for &idx in idxs {
                        if let Some(p) = prev[idx] {
                            match release_of(p, &start, &finish) {
                                Some(t) => c.page = c.page.max(t),
                                None => break 'issue,
                            }
                        }
                    }
                }
                let mut window = 0;
                let fi = fill_index[op];
                if fi != usize::MAX && fi >= stride {
                    if let Some(readers) = fill_readers.get(&fills[fi - stride]) {
                        let mut earliest = u64::MAX;
                        for &r in readers {
                            match start[r as usize] {
                                Some(s) => earliest = earliest.min(s),
                                None => break 'issue,
                            }
                        }
                        window = earliest;
                    }
                }
                let mut t = c.page.max(c.dep).max(window);
                if i > 0 {
                    t = t.max(start[order[i - 1] as usize].unwrap_or(0));
                }
                if i >= issue_width {
                    t = t.max(start[order[i - issue_width] as usize].unwrap_or(0) + 1);
                }
                let lane_set = &mut lanes[role.index()];
                let (lane, free) = lane_set
                    .iter()
                    .copied()
                    .enumerate()
                    .min_by_key(|&(l, f)| (f, l))
                    .unwrap_or((0, 0));
                t = t.max(free);
                let f = t + costs[op].total;
                lane_set[lane] = f;
                start[op] = Some(t);
                finish[op] = f;
                page_t[op] = c.page.max(window);
                dep_t[op] = c.dep;
                pos[role.index()] += 1;
                done += 1;
                progressed = true;
            }
        }
        if !progressed {
            let blocked = Role::ALL
                .iter()
                .filter_map(|r| candidate.order(*r).get(pos[r.index()]).copied())
                .collect();
            return Err(Error::Deadlock { blocked });
        }
    }

    let start: Vec<u64> = start.into_iter().map(|s| s.unwrap_or(0)).collect();
    let makespan = finish.iter().copied().max().unwrap_or(0);

    let mut roles = BTreeMap::new();
    for role in Role::ALL {
        let spans: Vec<(u64, u64)> = candidate
            .order(role)
            .iter()
            .map(|&op| {
                let op = op as usize;
                let end = if role == Role::Consumer {
                    start[op] + costs[op].base
                } else {
                    finish[op]
                };
                (start[op], end)
            })
            .collect();
        let busy = union_length(spans);
        roles.insert(
            role,
            RoleTime {
                busy,
                idle: makespan - busy,
            },
        );
    }

    // Consumer gaps are charged to the op that ends them.
    let mut stalls = StallBreakdown::default();
    let mut covered = 0u64;
    for &op in candidate.order(Role::Consumer) {
        let op = op as usize;
        if start[op] > covered {
            let (g0, g1) = (covered, start[op]);
            let p = page_t[op].clamp(g0, g1);
            let d = dep_t[op].clamp(p, g1);
            stalls.page_wait += p - g0;
            stalls.dep_wait += d - p;
            stalls.issue_wait += g1 - d;
        }
        covered = covered.max(start[op] + costs[op].base);
    }
    if makespan > covered {
        stalls.dep_wait += makespan - covered;
    }
    let consumer_busy = roles[&Role::Consumer].busy;
    debug_assert_eq!(stalls.total(), makespan - consumer_busy);

    let mut events = Vec::with_capacity(2 * n + 3 * plan.assignments.len());
    for (op, r) in candidate.roles.iter().enumerate() {
        events.push(SimEvent {
            time: start[op],
            role: *r,
            op: op as u32,
            kind: EventKind::Start,
        });
        events.push(SimEvent {
            time: finish[op],
            role: *r,
            op: op as u32,
            kind: EventKind::Finish,
        });
    }
    for a in &plan.assignments {
        let w = a.writer as usize;
        let role = candidate.roles[w];
        events.push(SimEvent {
            time: start[w],
            role,
            op: a.writer,
            kind: EventKind::PageLocked { page: a.page },
        });
        events.push(SimEvent {
            time: finish[w],
            role,
            op: a.writer,
            kind: EventKind::PageReady { page: a.page },
        });
        let last = a
            .release_after
            .iter()
            .copied()
            .max_by_key(|&r| (finish[r as usize], r))
            .unwrap_or(a.writer);
        events.push(SimEvent {
            time: finish[last as usize],
            role: candidate.roles[last as usize],
            op: last,
            kind: EventKind::PageEmpty { page: a.page },
        });
    }
    events.sort();

    Ok(SimReport {
        makespan,
        duty_cycle: consumer_busy as f64 / makespan.max(1) as f64,
        consumer_busy,
        roles,
        stalls,
        start,
        finish,
        events,
    })
}

/// Per-role timeline in the Chrome trace event format.
pub fn chrome_trace(
    report: &SimReport,
    workload: &Workload,
    candidate: &PlanCandidate,
) -> serde_json::Value {
    let mut events = Vec::new();
    for role in Role::ALL {
        events.push(serde_json::json!({
            "name": "thread_name",
            "ph": "M",
            "pid": 0,
            "tid": role.index(),
            "args": { "name": role.to_string() },
        }));
    }
    for role in Role::ALL {
        for &op in candidate.order(role) {
            let i = op as usize;
            let m = &workload.trace.ops[i];
            events.push(serde_json::json!({
                "name": m.kind.to_string(),
                "cat": role.to_string(),
                "ph": "X",
                "ts": report.start[i],
                "dur": report.finish[i] - report.start[i],
                "pid": 0,
                "tid": role.index(),
                "args": {
                    "op": op,
                    "operator": m.source_operator,
                    "tile": [m.tile.m, m.tile.n, m.tile.k],
                },
            }));
        }
    }
    serde_json::json!({ "traceEvents": events, "displayTimeUnit": "ns" })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::build_dep_graph;
    use crate::ir::TileConfig;
    use crate::ir::{BufferId, BufferInfo, BufferInterval, BufferUse, MicroOp, Space, TileCoord};
    use crate::plan::{plan_pages, program_orders, PlanConfig, PlanFlags, RoleWarps};

    fn op(
        id: u32,
        kind: MicroOpKind,
        reads: Vec<BufferInterval>,
        writes: Vec<BufferInterval>,
    ) -> MicroOp {
        MicroOp {
            id,
            kind,
            reads,
            writes,
            tile: TileCoord::default(),
            source_operator: 0,
            access: None,
        }
    }

    fn hw_10_10() -> HardwareSpec {
        let mut hw = HardwareSpec::default();
        hw.latency_table.insert(MicroOpKind::GlobalToShared, 10);
        hw.latency_table.insert(MicroOpKind::MmaTile, 10);
        hw
    }

    /// `tiles` fills each consumed by one MMA reading the page directly.
    fn streaming(tiles: u32, pages: u32, stride: u32) -> (PlanCandidate, Workload) {
        let mut trace = MicroOpTrace {
            buffers: vec![
                BufferInfo {
                    name: "w".into(),
                    space: Space::Global,
                    usage: BufferUse::Graph,
                },
                BufferInfo {
                    name: "smem".into(),
                    space: Space::SharedPage,
                    usage: BufferUse::WeightStage,
                },
                BufferInfo {
                    name: "acc".into(),
                    space: Space::Register,
                    usage: BufferUse::Register,
                },
            ],
            ops: vec![],
            padding: vec![],
        };
        for t in 0..tiles as u64 {
            let g = BufferInterval::new(BufferId(0), t * 64, 64, Space::Global);
            let s = BufferInterval::new(BufferId(1), t * 64, 64, Space::SharedPage);
            let r = BufferInterval::new(BufferId(2), t * 64, 64, Space::Register);
            let id = trace.ops.len() as u32;
            trace
                .ops
                .push(op(id, MicroOpKind::GlobalToShared, vec![g], vec![s]));
            trace
                .ops
                .push(op(id + 1, MicroOpKind::MmaTile, vec![s], vec![r]));
        }
        let graph = build_dep_graph(&trace);
        let page_plan =
            plan_pages(&trace, &graph.war_constraints, pages, &PlanFlags::default()).unwrap();
        let roles: Vec<Role> = trace
            .ops
            .iter()
            .map(|o| {
                if o.kind == MicroOpKind::GlobalToShared {
                    Role::Loader
                } else {
                    Role::Consumer
                }
            })
            .collect();
        let workload = Workload {
            tile: TileConfig::mma(),
            split_reduction: false,
            trace,
            graph,
        };
        let candidate = PlanCandidate {
            config: PlanConfig {
                tile: TileConfig::mma(),
                n_stage: pages,
                consumer_warps: 4,
                prefetch_stride: stride,
                swizzle: 0,
                flags: PlanFlags::default(),
            },
            warps: RoleWarps::with_consumer(4),
            orders: program_orders(&roles),
            roles,
            page_plan,
        };
        (candidate, workload)
    }

    #[test]
    fn single_op_is_fully_busy() {
        let trace = MicroOpTrace {
            buffers: vec![BufferInfo {
                name: "acc".into(),
                space: Space::Register,
                usage: BufferUse::Register,
            }],
            ops: vec![op(
                0,
                MicroOpKind::MmaTile,
                vec![],
                vec![BufferInterval::new(BufferId(0), 0, 4, Space::Register)],
            )],
            padding: vec![],
        };
        let w = Workload::from_trace(TileConfig::mma(), trace);
        let roles = vec![Role::Consumer];
        let c = PlanCandidate {
            config: streaming(1, 1, 1).0.config,
            warps: RoleWarps::with_consumer(4),
            orders: program_orders(&roles),
            roles,
            page_plan: Default::default(),
        };
        let r = simulate(&c, &w, &HardwareSpec::default()).unwrap();
        assert_eq!(r.makespan, 16);
        assert_eq!(r.duty_cycle, 1.0);
        assert_eq!(r.stalls.total(), 0);
    }

    #[test]
    fn two_pages_overlap_after_first_fill() {
        let (c, w) = streaming(4, 2, 1);
        assert_eq!(
            c.page_plan
                .assignments
                .iter()
                .map(|a| a.page)
                .collect::<Vec<_>>(),
            vec![0, 1, 0, 1]
        );
        let r = simulate(&c, &w, &hw_10_10()).unwrap();
        assert_eq!(r.makespan, 50);
        assert_eq!(r.duty_cycle, 0.8);
        assert_eq!(r.stalls.page_wait, 10);
    }

    #[test]
    fn one_page_serializes() {
        let (c, w) = streaming(4, 1, 1);
        let r = simulate(&c, &w, &hw_10_10()).unwrap();
        assert_eq!(r.makespan, 80);
        assert_eq!(r.duty_cycle, 0.5);
        assert_eq!(r.stalls.page_wait, 40);
        assert_eq!(r.stalls.total(), r.role(Role::Consumer).idle);
    }

    #[test]
    fn loss_arithmetic() {
        let (c, w) = streaming(4, 2, 1);
        let a = simulate(&c, &w, &hw_10_10()).unwrap();
        let (c1, w1) = streaming(4, 1, 1);
        let b = simulate(&c1, &w1, &hw_10_10()).unwrap();
        assert_eq!(duty_cycle_loss(&a, &a).unwrap(), 0.0);
        assert!((duty_cycle_loss(&a, &b).unwrap() - 0.375).abs() < 1e-12);
    }

    #[test]
    fn events_replay_to_report_times() {
        let (c, w) = streaming(4, 2, 1);
        let r = simulate(&c, &w, &hw_10_10()).unwrap();
        assert_eq!(r.replay_times(), (r.start.clone(), r.finish.clone()));
    }

    #[test]
    fn reversed_role_order_deadlocks() {
        // The second MMA waits for a fill that waits for the first MMA.
        let (mut c, w) = streaming(2, 1, 1);
        c.orders.get_mut(&Role::Consumer).unwrap().reverse();
        assert!(matches!(
            simulate(&c, &w, &hw_10_10()),
            Err(Error::Deadlock { .. })
        ));
    }

    #[test]
    fn empty_trace_is_an_error() {
        let (mut c, _) = streaming(1, 1, 1);
        c.roles.clear();
        let w = Workload::from_trace(TileConfig::mma(), MicroOpTrace::default());
        assert!(matches!(
            simulate(&c, &w, &HardwareSpec::default()),
            Err(Error::EmptyTrace)
        ));
    }
}
