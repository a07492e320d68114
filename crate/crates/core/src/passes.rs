//! Schedule improvement passes. Each one re-simulates its result and hands
//! back the input unchanged if the schedule got longer or stopped making
//! progress.

use std::collections::BTreeSet;

use crate::dag::DepGraph;
use crate::error::{Error, Result};
use crate::hw::HardwareSpec;
use crate::ir::MicroOpKind;
use crate::plan::{PlanCandidate, Role, Workload};
use crate::sim::{op_costs, simulate_with_costs, total_costs, SimReport};

/// Loader idle fraction above which Dequant is forwarded to the Loader.
pub const REBALANCE_IDLE_THRESHOLD: f64 = 0.3;
/// Farthest an op may be hoisted within its role, in issue slots.
pub const GAP_FILL_WINDOW: usize = 16;

/// True when `from` reaches `to` through data edges. Ids are topological,
/// so the search never descends below `from`.
fn reaches(graph: &DepGraph, from: u32, to: u32) -> bool {
    let mut stack = vec![to];
    let mut seen = BTreeSet::new();
    while let Some(v) = stack.pop() {
        for &p in graph.preds(v) {
            if p == from {
                return true;
            }
            if p > from && seen.insert(p) {
                stack.push(p);
            }
        }
    }
    false
}

fn accept(
    original: &PlanCandidate,
    changed: PlanCandidate,
    workload: &Workload,
    hw: &HardwareSpec,
    before: &SimReport,
) -> Result<(PlanCandidate, SimReport)> {
    let costs = op_costs(&workload.trace, hw, changed.config.swizzle)?;
    match simulate_with_costs(&changed, workload, hw, &costs) {
        Ok(after) if after.makespan <= before.makespan => Ok((changed, after)),
        Ok(_) | Err(Error::Deadlock { .. }) => Ok((original.clone(), before.clone())),
        Err(e) => Err(e),
    }
}

/// Hoists positive-slack ops ahead of role-mates that started after the op
/// was already ready. Ops that write shared pages keep their place so page
/// acquisition order is unchanged; readers stay in their page's release set
/// wherever they move.
pub fn apply_gap_fill(
    candidate: &PlanCandidate,
    workload: &Workload,
    hw: &HardwareSpec,
    before: &SimReport,
) -> Result<(PlanCandidate, SimReport)> {
    let trace = &workload.trace;
    let graph = &workload.graph;
    let costs = op_costs(trace, hw, candidate.config.swizzle)?;
    let slack = graph.node_slack(&total_costs(&costs))?;
    let mut changed = candidate.clone();
    changed.config.flags.gap_fill = true;
    let mut moved = false;
    for role in Role::ALL {
        let Some(order) = changed.orders.get_mut(&role) else {
            continue;
        };
        for j in 1..order.len() {
            let x = order[j];
            let op = &trace.ops[x as usize];
            if slack[x as usize] == 0
                || op.kind == MicroOpKind::GlobalToShared
                || op.shared_writes().next().is_some()
            {
                continue;
            }
            let ready = graph
                .preds(x)
                .iter()
                .map(|&p| before.finish[p as usize])
                .max()
                .unwrap_or(0);
            let mut p = j;
            while p > 0 && j - p < GAP_FILL_WINDOW {
                let y = order[p - 1];
                if ready >= before.start[y as usize] || (y < x && reaches(graph, y, x)) {
                    break;
                }
                p -= 1;
            }
            if p < j {
                order[p..=j].rotate_right(1);
                moved = true;
            }
        }
    }
    if !moved {
        return Ok((changed, before.clone()));
    }
    accept(candidate, changed, workload, hw, before)
}

/// Forwards Dequant from the Consumer to an under-used Loader.
pub fn apply_role_rebalance(
    candidate: &PlanCandidate,
    workload: &Workload,
    hw: &HardwareSpec,
    before: &SimReport,
) -> Result<(PlanCandidate, SimReport)> {
    let trace = &workload.trace;
    let consumer_busy = before.role(Role::Consumer).busy;
    let consumer_busiest = Role::ALL
        .iter()
        .all(|&r| before.role(r).busy <= consumer_busy);
    let dequants: Vec<u32> = candidate
        .order(Role::Consumer)
        .iter()
        .copied()
        .filter(|&op| trace.ops[op as usize].kind == MicroOpKind::Dequant)
        .collect();
    if dequants.is_empty()
        || !consumer_busiest
        || before.idle_fraction(Role::Loader) <= REBALANCE_IDLE_THRESHOLD
    {
        return Ok((candidate.clone(), before.clone()));
    }
    let ready = |op: u32| -> u64 {
        workload
            .graph
            .preds(op)
            .iter()
            .map(|&p| before.finish[p as usize])
            .max()
            .unwrap_or(0)
    };
    let mut changed = candidate.clone();
    changed.config.flags.role_rebalance = true;
    for &d in &dequants {
        changed.roles[d as usize] = Role::Loader;
    }
    if let Some(c) = changed.orders.get_mut(&Role::Consumer) {
        c.retain(|op| !dequants.contains(op));
    }
    let mut loader: Vec<(u64, u32)> = candidate
        .order(Role::Loader)
        .iter()
        .map(|&op| (before.start[op as usize], op))
        .collect();
    loader.extend(dequants.iter().map(|&d| (ready(d), d)));
    loader.sort_unstable();
    changed
        .orders
        .insert(Role::Loader, loader.into_iter().map(|(_, op)| op).collect());
    accept(candidate, changed, workload, hw, before)
}
