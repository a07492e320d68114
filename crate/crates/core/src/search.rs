//! Budgeted exhaustive search over plan configurations.
//!
//! Configurations are enumerated in a fixed lexicographic order. Each
//! survivor of the resource filter is simulated, then its improvement
//! passes are tried. Every simulation consumes one unit of budget, and the
//! budget always covers a prefix of that fixed evaluation sequence, so the
//! result does not depend on how many threads did the work.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};
use crate::hw::HardwareSpec;
use crate::ir::{OperatorGraph, TileConfig};
use crate::passes::{apply_gap_fill, apply_role_rebalance, REBALANCE_IDLE_THRESHOLD};
use crate::plan::{
    prepare_workload, realize_candidate, PlanCandidate, PlanConfig, PlanFlags, PruneReason, Role,
    Workload,
};
use crate::sim::{simulate, SimReport, StallBreakdown};

/// Environment variable capping search threads.
pub const THREADS_ENV: &str = "MK_PLANNER_THREADS";
/// Configurations evaluated per parallel batch.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagGrid {
    pub gap_fill: Vec<bool>,
    pub reuse_act_weight: Vec<bool>,
    pub reuse_act_output: Vec<bool>,
    pub split_reduction: Vec<bool>,
}

impl Default for FlagGrid {
    fn default() -> Self {
        FlagGrid {
            gap_fill: vec![false],
            reuse_act_weight: vec![false],
            reuse_act_output: vec![false],
            split_reduction: vec![false],
        }
    }
}

/// Grids for every configuration knob. Blocks are `[m, n, k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub blocks: Vec<[u64; 3]>,
    pub k_split: Vec<u64>,
    pub consumer_warps: Vec<u32>,
    pub n_stage: Vec<u32>,
    pub prefetch_stride: Vec<u32>,
    pub swizzles: Vec<u32>,
    #[serde(default)]
    pub flags: FlagGrid,
}

impl SearchSpace {
    pub fn from_json(text: &str) -> Result<Self> {
        let space: SearchSpace =
            serde_json::from_str(text).map_err(|e| Error::parse("search space", e))?;
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.flags;
        let empty = self.blocks.is_empty()
            || self.k_split.is_empty()
            || self.consumer_warps.is_empty()
            || self.n_stage.is_empty()
            || self.prefetch_stride.is_empty()
            || self.swizzles.is_empty()
            || f.gap_fill.is_empty()
            || f.reuse_act_weight.is_empty()
            || f.reuse_act_output.is_empty()
            || f.split_reduction.is_empty();
        if empty {
            return Err(Error::invalid(
                "search space",
                "every grid needs at least one value",
            ));
        }
        for tile in self.tiles() {
            tile.validate()?;
        }
        if self.prefetch_stride.contains(&0) || self.consumer_warps.contains(&0) {
            return Err(Error::invalid(
                "search space",
                "strides and warp counts must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn tiles(&self) -> Vec<TileConfig> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for &k_split in &self.k_split {
                out.push(TileConfig {
                    block_m: b[0],
                    block_n: b[1],
                    block_k: b[2],
                    k_split,
                });
            }
        }
        out
    }

    /// The naive reference point: first block, no K split, stride 1, 16
    /// consumer warps, two stages, no swizzle and no optimization flags.
    pub fn baseline(&self) -> PlanConfig {
        let b = self.blocks.first().copied().unwrap_or([16, 64, 64]);
        PlanConfig {
            tile: TileConfig {
                block_m: b[0],
                block_n: b[1],
                block_k: b[2],
                k_split: 1,
            },
            n_stage: 2,
            consumer_warps: 16,
            prefetch_stride: 1,
            swizzle: 0,
            flags: PlanFlags::default(),
        }
    }
}

/// Cross product in fixed lexicographic order: tile, consumer warps,
/// stages, stride, swizzle, then flags.
pub fn enumerate_candidates(space: &SearchSpace) -> Result<Vec<PlanConfig>> {
    space.validate()?;
    let f = &space.flags;
    let mut out = Vec::new();
    for tile in space.tiles() {
        for &consumer_warps in &space.consumer_warps {
            for &n_stage in &space.n_stage {
                for &prefetch_stride in &space.prefetch_stride {
                    for &swizzle in &space.swizzles {
                        for &gap_fill in &f.gap_fill {
                            for &reuse_act_weight in &f.reuse_act_weight {
                                for &reuse_act_output in &f.reuse_act_output {
                                    for &split_reduction in &f.split_reduction {
                                        out.push(PlanConfig {
                                            tile,
                                            n_stage,
                                            consumer_warps,
                                            prefetch_stride,
                                            swizzle,
                                            flags: PlanFlags {
                                                gap_fill,
                                                reuse_act_weight,
                                                reuse_act_output,
                                                split_reduction,
                                                role_rebalance: false,
                                            },
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub duty_cycle: f64,
    pub makespan: u64,
    pub consumer_busy: u64,
    pub stalls: StallBreakdown,
}

impl Score {
    pub fn of(report: &SimReport) -> Self {
        Score {
            duty_cycle: report.duty_cycle,
            makespan: report.makespan,
            consumer_busy: report.consumer_busy,
            stalls: report.stalls,
        }
    }

    /// Higher duty cycle first (compared exactly), then shorter makespan.
    pub fn cmp_quality(&self, other: &Score) -> Ordering {
        let lhs = u128::from(self.consumer_busy) * u128::from(other.makespan.max(1));
        let rhs = u128::from(other.consumer_busy) * u128::from(self.makespan.max(1));
        lhs.cmp(&rhs).then(other.makespan.cmp(&self.makespan))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: PlanConfig,
    pub score: Score,
}

/// `a` beats `b`: better score, or equal score and smaller encoding.
fn beats(a: &Evaluation, b: &Evaluation) -> bool {
    match a.score.cmp_quality(&b.score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.config.encoding() < b.config.encoding(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub enumerated: u64,
    pub pruned: BTreeMap<PruneReason, u64>,
    pub simulated: u64,
}

impl SearchStats {
    pub fn pruned_histogram(&self) -> BTreeMap<String, u64> {
        self.pruned
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub budget: u64,
    /// Worker threads; `None` reads the environment, then uses all cores.
    pub threads: Option<usize>,
    pub parallel: bool,
    /// Keep every evaluation for later inspection.
    pub retain_scores: bool,
}

impl SearchOptions {
    pub fn with_budget(budget: u64) -> Self {
        SearchOptions {
            budget,
            threads: None,
            parallel: true,
            retain_scores: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub winner: PlanCandidate,
    pub report: SimReport,
    pub evaluation: Evaluation,
    pub stats: SearchStats,
    /// Every scored evaluation, in evaluation order, when retained.
    pub evaluations: Vec<Evaluation>,
}

enum Outcome {
    Pruned(PruneReason),
    /// Scores in evaluation order; each one consumed one simulation.
    Evaluated(Vec<Evaluation>),
}

/// Runs the improvement passes a configuration asks for.
fn evaluate(config: &PlanConfig, workload: &Workload, hw: &HardwareSpec) -> Result<Outcome> {
    let base_config = PlanConfig {
        flags: PlanFlags {
            gap_fill: false,
            role_rebalance: false,
            ..config.flags
        },
        ..*config
    };
    let candidate = match realize_candidate(&base_config, workload, hw)? {
        Ok(c) => c,
        Err(reason) => return Ok(Outcome::Pruned(reason)),
    };
    let mut out = Vec::new();
    let report = simulate(&candidate, workload, hw)?;
    out.push(Evaluation {
        config: candidate.config,
        score: Score::of(&report),
    });
    let (candidate, report) = if config.flags.gap_fill {
        let (c, r) = apply_gap_fill(&candidate, workload, hw, &report)?;
        out.push(Evaluation {
            config: c.config,
            score: Score::of(&r),
        });
        (c, r)
    } else {
        (candidate, report)
    };
    if rebalance_applies(&candidate, workload, &report) {
        let (c, r) = apply_role_rebalance(&candidate, workload, hw, &report)?;
        out.push(Evaluation {
            config: c.config,
            score: Score::of(&r),
        });
    }
    Ok(Outcome::Evaluated(out))
}

fn rebalance_applies(candidate: &PlanCandidate, workload: &Workload, report: &SimReport) -> bool {
    let consumer = report.role(Role::Consumer).busy;
    report.idle_fraction(Role::Loader) > REBALANCE_IDLE_THRESHOLD
        && Role::ALL.iter().all(|&r| report.role(r).busy <= consumer)
        && candidate
            .order(Role::Consumer)
            .iter()
            .any(|&op| workload.trace.ops[op as usize].kind == crate::ir::MicroOpKind::Dequant)
}

/// Rebuilds the exact candidate an evaluation describes.
pub fn materialize(
    config: &PlanConfig,
    workload: &Workload,
    hw: &HardwareSpec,
) -> Result<(PlanCandidate, SimReport)> {
    let base_config = PlanConfig {
        flags: PlanFlags {
            gap_fill: false,
            role_rebalance: false,
            ..config.flags
        },
        ..*config
    };
    let candidate = match realize_candidate(&base_config, workload, hw)? {
        Ok(c) => c,
        Err(reason) => {
            return Err(Error::NoFeasibleCandidate {
                pruned: BTreeMap::from([(reason.to_string(), 1)]),
            })
        }
    };
    let report = simulate(&candidate, workload, hw)?;
    let (candidate, report) = if config.flags.gap_fill {
        apply_gap_fill(&candidate, workload, hw, &report)?
    } else {
        (candidate, report)
    };
    if config.flags.role_rebalance {
        return apply_role_rebalance(&candidate, workload, hw, &report);
    }
    Ok((candidate, report))
}

/// Lowers the graph once per (tile, reduction split) pair.
pub struct WorkloadCache<'a> {
    graph: &'a OperatorGraph,
    hw: &'a HardwareSpec,
    cache: BTreeMap<(TileConfig, bool), Workload>,
}

impl<'a> WorkloadCache<'a> {
    pub fn new(graph: &'a OperatorGraph, hw: &'a HardwareSpec) -> Self {
        WorkloadCache {
            graph,
            hw,
            cache: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tile: TileConfig, split: bool) -> Result<&Workload> {
        if !self.cache.contains_key(&(tile, split)) {
            let w = prepare_workload(self.graph, tile, split, self.hw)?;
            self.cache.insert((tile, split), w);
        }
        Ok(&self.cache[&(tile, split)])
    }

    fn peek(&self, config: &PlanConfig) -> &Workload {
        &self.cache[&(config.tile, config.flags.split_reduction)]
    }
}

/// Scores one configuration directly, outside any search.
pub fn evaluate_config(
    graph: &OperatorGraph,
    hw: &HardwareSpec,
    config: &PlanConfig,
) -> Result<(PlanCandidate, SimReport)> {
    let workload = prepare_workload(graph, config.tile, config.flags.split_reduction, hw)?;
    materialize(config, &workload, hw)
}

fn thread_count(opts: &SearchOptions) -> usize {
    opts.threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn search(
    graph: &OperatorGraph,
    hw: &HardwareSpec,
    space: &SearchSpace,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    if opts.budget == 0 {
        return Err(Error::invalid("budget", "must be at least 1"));
    }
    let configs = enumerate_candidates(space)?;
    let mut cache = WorkloadCache::new(graph, hw);
    for c in &configs {
        cache.get(c.tile, c.flags.split_reduction)?;
    }
    let pool = if opts.parallel {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(thread_count(opts))
                .build()
                .map_err(|e| Error::invalid("thread pool", e.to_string()))?,
        )
    } else {
        None
    };

    let mut stats = SearchStats::default();
    let mut used = 0u64;
    let mut best: Option<Evaluation> = None;
    let mut kept = Vec::new();
    'chunks: for chunk in configs.chunks(CHUNK) {
        let run = |c: &PlanConfig| evaluate(c, cache.peek(c), hw);
        let results: Vec<Result<Outcome>> = match &pool {
            Some(p) => p.install(|| chunk.par_iter().map(run).collect()),
            None => chunk.iter().map(run).collect(),
        };
        for result in results {
            if used >= opts.budget {
                break 'chunks;
            }
            stats.enumerated += 1;
            match result? {
                Outcome::Pruned(reason) => *stats.pruned.entry(reason).or_insert(0) += 1,
                Outcome::Evaluated(evals) => {
                    for e in evals {
                        if used >= opts.budget {
                            break;
                        }
                        used += 1;
                        if best.as_ref().is_none_or(|b| beats(&e, b)) {
                            best = Some(e.clone());
                        }
                        if opts.retain_scores {
                            kept.push(e);
                        }
                    }
                }
            }
        }
    }
    stats.simulated = used;
    let Some(best) = best else {
        return Err(Error::NoFeasibleCandidate {
            pruned: stats.pruned_histogram(),
        });
    };
    let (winner, report) = materialize(&best.config, cache.peek(&best.config), hw)?;
    Ok(SearchOutcome {
        winner,
        report,
        evaluation: best,
        stats,
        evaluations: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> SearchSpace {
        SearchSpace {
            blocks: vec![[16, 64, 64], [16, 128, 64]],
            k_split: vec![1],
            consumer_warps: vec![16],
            n_stage: vec![2, 3],
            prefetch_stride: vec![1, 2],
            swizzles: vec![7],
            flags: FlagGrid::default(),
        }
    }

    #[test]
    fn enumeration_counts_and_order() {
        let mut one = space();
        one.blocks.truncate(1);
        one.n_stage.truncate(1);
        one.prefetch_stride.truncate(1);
        assert_eq!(enumerate_candidates(&one).unwrap().len(), 1);

        let all = enumerate_candidates(&space()).unwrap();
        assert_eq!(all.len(), 8);
        let keys: Vec<_> = all
            .iter()
            .map(|c| (c.tile.block_n, c.n_stage, c.prefetch_stride))
            .collect();
        assert_eq!(
            keys,
            vec![
                (64, 2, 1),
                (64, 2, 2),
                (64, 3, 1),
                (64, 3, 2),
                (128, 2, 1),
                (128, 2, 2),
                (128, 3, 1),
                (128, 3, 2)
            ]
        );
        assert_eq!(enumerate_candidates(&space()).unwrap(), all);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let mut s = space();
        s.swizzles.clear();
        assert!(enumerate_candidates(&s).is_err());
    }

    #[test]
    fn encoding_orders_like_its_fields() {
        let a = space().baseline();
        let b = PlanConfig {
            consumer_warps: 8,
            ..a
        };
        assert!(b.encoding() < a.encoding());
        assert_ne!(
            a.encoding(),
            PlanConfig {
                flags: PlanFlags {
                    gap_fill: true,
                    ..a.flags
                },
                ..a
            }
            .encoding()
        );
    }
}
