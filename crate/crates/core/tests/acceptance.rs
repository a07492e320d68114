//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

mod common;

use std::time::{Duration, Instant};

use common::{brute_force_raw, fixtures, graph, hw, space, traces};
use mk_planner::dag::build_dep_graph;
use mk_planner::hw::{
    compute_page_budget, compute_stage_count, HardwareSpec, PageBudget, StageOverhead,
};
use mk_planner::ir::{
    lower_graph, tile_weight_bytes, BufferUse, DType, MicroOpKind, OperatorGraph, TileConfig,
};
use mk_planner::passes::{apply_gap_fill, apply_role_rebalance};
use mk_planner::plan::{
    build_candidate, pool_pages, precheck, resource_filter, validate_plan, PlanConfig, PlanFlags,
    Verdict,
};
use mk_planner::search::{
    enumerate_candidates, search, Score, SearchOptions, SearchSpace, WorkloadCache,
};
use mk_planner::sim::{duty_cycle_loss, simulate};
use mk_planner::trace::SolidifiedTrace;
use mk_planner::Error;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const EQ_RANDOM_CASES: u32 = 1000;
const EQ_LIMIT: Duration = Duration::from_secs(1);
const KSPLIT_LIMIT: Duration = Duration::from_secs(1);
const MIN_DUTY_LOSS: f64 = 0.30;
const DUTY_LOSS_LIMIT: Duration = Duration::from_secs(10);
const DAG_TRACES: u32 = 500;
const DAG_MAX_OPS: usize = 200;
const DAG_LIMIT: Duration = Duration::from_secs(30);
const MIN_GAIN: f64 = 1.30;
const SEARCH_BUDGET: u64 = 10_000;
const GAIN_LIMIT: Duration = Duration::from_secs(300);
const SAFETY_LIMIT: Duration = Duration::from_secs(300);
const MONOTONE_LIMIT: Duration = Duration::from_secs(300);
const REPEATS: usize = 100;
const DETERMINISM_LIMIT: Duration = Duration::from_secs(600);
const SOUNDNESS_LIMIT: Duration = Duration::from_secs(300);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn page_budget_by_counting(smem: u64, page: u64, overhead: u64, n: u64) -> u64 {
    let left = smem as i128 - n as i128 * overhead as i128;
    if left < 0 {
        return 0;
    }
    let mut p = 0i128;
    while (p + 1) * page as i128 <= left {
        p += 1;
    }
    p as u64
}

fn stage_count_by_counting(total: u64, reserved: u64, per_stage: u64) -> u64 {
    let mut s = 0;
    while reserved + (s + 1) * per_stage <= total {
        s += 1;
    }
    s
}

fn criterion_1() -> Outcome {
    let l20 = HardwareSpec::default();
    let h100 = HardwareSpec {
        smem_max: 232_448,
        ..l20.clone()
    };
    let mut examples = vec![
        (compute_page_budget(&l20, 0), 8),
        (compute_page_budget(&l20, 2), 7),
        (compute_page_budget(&l20, 4), 7),
        (compute_page_budget(&h100, 2), 13),
    ];
    for (per_stage, expected) in [(4, 2), (2, 4)] {
        let b = PageBudget {
            n_page_total: 8,
            n_page_per_stage: per_stage,
            ..PageBudget::default()
        };
        examples.push((compute_stage_count(&b).unwrap(), expected));
    }
    let worked_ok = examples.iter().all(|(a, b)| a == b);

    let mut runner = TestRunner::new(Config {
        cases: EQ_RANDOM_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let budget = runner.run(
        &(0u64..1 << 20, 6u32..16, 0u64..20_000, 0u64..8),
        |(smem, page_log, overhead, n)| {
            let spec = HardwareSpec {
                smem_max: smem,
                page_size: 1 << page_log,
                stage_overhead: StageOverhead {
                    instr_buf: overhead,
                    semaphores: 0,
                    scratch: 0,
                },
                ..HardwareSpec::default()
            };
            prop_assert_eq!(
                compute_page_budget(&spec, n),
                page_budget_by_counting(smem, 1 << page_log, overhead, n)
            );
            Ok(())
        },
    );
    let stages = runner.run(
        &(0u64..64, 0u64..8, 0u64..4, 0u64..8, 1u64..16),
        |(total, w, s, a, per_stage)| {
            let b = PageBudget {
                n_page_total: total,
                n_page_weight: w,
                n_page_scale: s,
                n_page_act: a,
                n_page_per_stage: per_stage,
                n_stage: 0,
            };
            prop_assert_eq!(
                compute_stage_count(&b).unwrap(),
                stage_count_by_counting(total, w + s + a, per_stage)
            );
            Ok(())
        },
    );
    outcome(
        worked_ok && budget.is_ok() && stages.is_ok(),
        format!(
            "{} worked examples ok={worked_ok}, {EQ_RANDOM_CASES} random page-budget cases ok={}, {EQ_RANDOM_CASES} random stage-count cases ok={}, tolerance 0",
            examples.len(),
            budget.is_ok(),
            stages.is_ok()
        ),
    )
}

fn wide_gemm() -> OperatorGraph {
    let (m, n, k) = (16u64, 64u64, 512u64);
    let text = serde_json::json!({
        "buffers": [
            {"id": "x", "space": "Global", "bytes": m * k * 2},
            {"id": "w", "space": "Global", "bytes": n * k * 2},
            {"id": "y", "space": "Global", "bytes": m * n * 2},
        ],
        "operators": [{
            "id": "gemm", "kind": "Gemm",
            "dims": {"m": m, "n": n, "k": k},
            "dtype": "fp16",
            "inputs": ["x"], "outputs": ["y"], "weight": "w",
        }],
    })
    .to_string();
    OperatorGraph::from_json(&text).unwrap()
}

fn criterion_2() -> Outcome {
    let l20 = hw("l20.json");
    let g = wide_gemm();
    let mut rows = Vec::new();
    for split in [1u64, 2] {
        let tile = TileConfig {
            block_m: 16,
            block_n: 64,
            block_k: 512,
            k_split: split,
        };
        let trace = lower_graph(&g, &tile, l20.page_size).unwrap();
        let fill = trace
            .ops
            .iter()
            .find(|o| o.kind == MicroOpKind::GlobalToShared)
            .unwrap();
        let weight: Vec<_> = fill
            .shared_writes()
            .filter(|w| trace.usage_of(w) == BufferUse::WeightStage)
            .collect();
        let bytes: u64 = weight.iter().map(|w| w.length).sum();
        let pages = weight.len() as u64;
        let stages = compute_stage_count(&PageBudget {
            n_page_total: compute_page_budget(&l20, 0),
            n_page_per_stage: pages,
            ..PageBudget::default()
        })
        .unwrap();
        rows.push((bytes, tile.weight_subtile_bytes(DType::Fp16), pages, stages));
    }
    let expected = [(65536, 65536, 4, 2), (32768, 32768, 2, 4)];
    let pass = rows == expected && tile_weight_bytes(64, 512, DType::Fp16) == 65536;
    outcome(
        pass,
        format!(
            "k_split 1 -> 2: weight bytes {} -> {}, weight pages {} -> {}, stage count {} -> {} (expected 65536 -> 32768, 4 -> 2, 2 -> 4, exact)",
            rows[0].0, rows[1].0, rows[0].2, rows[1].2, rows[0].3, rows[1].3
        ),
    )
}

fn decode_config(n_stage: u32) -> PlanConfig {
    PlanConfig {
        tile: TileConfig::default(),
        n_stage,
        consumer_warps: 16,
        prefetch_stride: (n_stage - 1).max(1),
        swizzle: 7,
        flags: PlanFlags::default(),
    }
}

fn criterion_3() -> Outcome {
    // Four stages do not fit the L20 budget at this tile, so the deeper
    // pipeline is measured on the larger shared memory.
    let h100 = hw("h100.json");
    let g = graph("decode-gemm.json");
    let mut cache = WorkloadCache::new(&g, &h100);
    let w = cache.get(TileConfig::default(), false).unwrap().clone();
    let report = |n| {
        let c = build_candidate(&decode_config(n), &w).unwrap();
        assert_eq!(precheck(&c.config, &w, &h100), None);
        simulate(&c, &w, &h100).unwrap()
    };
    let deep = report(4);
    let shallow = report(2);
    let loss = duty_cycle_loss(&deep, &shallow).unwrap();
    let loader_bound = deep.role(mk_planner::plan::Role::Loader).busy > deep.consumer_busy;
    outcome(
        loss >= MIN_DUTY_LOSS && loader_bound,
        format!(
            "decode gemm duty cycle {:.4} at 4 stages vs {:.4} at 2 stages, loss {:.4} (min {MIN_DUTY_LOSS}), loader-bound={loader_bound}",
            deep.duty_cycle, shallow.duty_cycle, loss
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: DAG_TRACES,
        failure_persistence: None,
        ..Config::default()
    });
    let largest = std::cell::Cell::new(0);
    let result = runner.run(&traces(DAG_MAX_OPS), |t| {
        largest.set(largest.get().max(t.len()));
        prop_assert_eq!(build_dep_graph(&t).edge_pairs(), brute_force_raw(&t));
        Ok(())
    });
    outcome(
        result.is_ok(),
        format!(
            "{DAG_TRACES} random traces (largest {} ops), RAW edge set equals byte-level oracle: {}",
            largest.get(),
            result.is_ok()
        ),
    )
}

fn criterion_5() -> Outcome {
    let (g, l20, s) = (
        graph("qwen-decoder-layer.json"),
        hw("l20.json"),
        space("default.json"),
    );
    let baseline = {
        let mut cache = WorkloadCache::new(&g, &l20);
        let cfg = s.baseline();
        let w = cache.get(cfg.tile, false).unwrap();
        let c = build_candidate(&cfg, w).unwrap();
        simulate(&c, w, &l20).unwrap()
    };
    let out = search(&g, &l20, &s, &SearchOptions::with_budget(SEARCH_BUDGET)).unwrap();
    let ratio = out.report.duty_cycle / baseline.duty_cycle;
    outcome(
        ratio >= MIN_GAIN,
        format!(
            "decoder layer winner {} duty {:.4} vs baseline {:.4}: {:.3}x (min {MIN_GAIN}x), budget {SEARCH_BUDGET}",
            out.evaluation.config.encoding(),
            out.report.duty_cycle,
            baseline.duty_cycle,
            ratio
        ),
    )
}

const SWEEP_GRAPHS: [&str; 4] = [
    "qwen-decoder-layer.json",
    "decode-gemm.json",
    "tiny-gemm.json",
    "tiny-gemm-int4.json",
];
const SWEEP_HW: [&str; 2] = ["l20.json", "h100.json"];

fn criterion_6() -> Outcome {
    let s = space("default.json");
    let configs = enumerate_candidates(&s).unwrap();
    let (mut kept, mut violations, mut deadlocks, mut errors) = (0u64, 0u64, 0u64, 0u64);
    for g in SWEEP_GRAPHS {
        let g = graph(g);
        for h in SWEEP_HW {
            let h = hw(h);
            let mut cache = WorkloadCache::new(&g, &h);
            for cfg in &configs {
                let w = cache.get(cfg.tile, cfg.flags.split_reduction).unwrap();
                let c = match build_candidate(cfg, w) {
                    Ok(c) => c,
                    Err(Error::InsufficientPages { .. }) => continue,
                    Err(_) => {
                        errors += 1;
                        continue;
                    }
                };
                if resource_filter(&c, w, &h) != Verdict::Keep {
                    continue;
                }
                kept += 1;
                if !validate_plan(&c, w).is_empty() {
                    violations += 1;
                }
                match simulate(&c, w, &h) {
                    Ok(_) => {}
                    Err(Error::Deadlock { .. }) => deadlocks += 1,
                    Err(_) => errors += 1,
                }
            }
        }
    }
    outcome(
        kept > 0 && violations == 0 && deadlocks == 0 && errors == 0,
        format!(
            "{kept} kept candidates over {} graph/hw pairs: {violations} with violations, {deadlocks} deadlocks, {errors} other errors",
            SWEEP_GRAPHS.len() * SWEEP_HW.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let s = space("default.json");
    let configs = enumerate_candidates(&s).unwrap();
    let (mut checked, mut grew, mut stride_pairs, mut stride_worse) = (0u64, 0u64, 0u64, 0u64);
    for gname in SWEEP_GRAPHS {
        let g = graph(gname);
        let loader_bound = matches!(gname, "qwen-decoder-layer.json" | "decode-gemm.json");
        for h in SWEEP_HW {
            let h = hw(h);
            let mut cache = WorkloadCache::new(&g, &h);
            for cfg in configs.iter().filter(|c| !c.flags.gap_fill) {
                let w = cache.get(cfg.tile, cfg.flags.split_reduction).unwrap();
                if precheck(cfg, w, &h).is_some() {
                    continue;
                }
                let Ok(c) = build_candidate(cfg, w) else {
                    continue;
                };
                let r = simulate(&c, w, &h).unwrap();
                let (filled, rf) = apply_gap_fill(&c, w, &h, &r).unwrap();
                let (_, rm) = apply_role_rebalance(&filled, w, &h, &rf).unwrap();
                let (_, rr) = apply_role_rebalance(&c, w, &h, &r).unwrap();
                checked += 1;
                if rf.makespan > r.makespan || rm.makespan > rf.makespan || rr.makespan > r.makespan
                {
                    grew += 1;
                }
                if loader_bound && cfg.prefetch_stride == 1 && pool_pages(cfg, &w.trace) >= 3 {
                    let wider = PlanConfig {
                        prefetch_stride: 2,
                        ..*cfg
                    };
                    if precheck(&wider, w, &h).is_some() {
                        continue;
                    }
                    let Ok(c2) = build_candidate(&wider, w) else {
                        continue;
                    };
                    let r2 = simulate(&c2, w, &h).unwrap();
                    stride_pairs += 1;
                    if r2.makespan > r.makespan {
                        stride_worse += 1;
                    }
                }
            }
        }
    }
    outcome(
        checked > 0 && grew == 0 && stride_pairs > 0 && stride_worse == 0,
        format!(
            "{checked} candidates through both passes, {grew} got longer; {stride_pairs} stride 1 -> 2 pairs, {stride_worse} got longer"
        ),
    )
}

fn solidify(g: &OperatorGraph, h: &HardwareSpec, s: &SearchSpace, parallel: bool) -> Vec<u8> {
    let opts = SearchOptions {
        budget: SEARCH_BUDGET,
        threads: Some(4),
        parallel,
        retain_scores: false,
    };
    let out = search(g, h, s, &opts).unwrap();
    SolidifiedTrace::from_outcome(&out, g, h, s)
        .unwrap()
        .serialize()
        .unwrap()
}

fn criterion_8() -> Outcome {
    let (g, l20, s) = (
        graph("qwen-decoder-layer.json"),
        hw("l20.json"),
        space("small.json"),
    );
    let reference = solidify(&g, &l20, &s, false);
    let mut identical = 0;
    for i in 0..REPEATS {
        if solidify(&g, &l20, &s, i % 2 == 1) == reference {
            identical += 1;
        }
    }
    let parsed = SolidifiedTrace::parse(&reference).unwrap();
    let round_trip = parsed.serialize().unwrap() == reference
        && SolidifiedTrace::parse(&parsed.serialize().unwrap()).unwrap() == parsed;
    outcome(
        identical == REPEATS && round_trip,
        format!(
            "{identical}/{REPEATS} repeated searches (alternating sequential and parallel) byte-identical to the first; serialize/parse identity={round_trip}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let (g, l20, s) = (
        graph("qwen-decoder-layer.json"),
        hw("l20.json"),
        space("default.json"),
    );
    let opts = |budget| SearchOptions {
        budget,
        threads: None,
        parallel: true,
        retain_scores: true,
    };
    let full = search(&g, &l20, &s, &opts(SEARCH_BUDGET)).unwrap();
    let best = full
        .evaluations
        .iter()
        .map(|e| e.score)
        .max_by(|a, b| a.cmp_quality(b))
        .unwrap();
    let winner_is_max = best.cmp_quality(&full.evaluation.score).is_eq()
        && Score::of(&full.report) == full.evaluation.score;

    let mut regressions = 0;
    let mut prev: Option<Score> = None;
    let mut budget = 1;
    let mut steps = 0;
    while budget <= SEARCH_BUDGET {
        let score = search(&g, &l20, &s, &opts(budget))
            .unwrap()
            .evaluation
            .score;
        if prev.is_some_and(|p| score.cmp_quality(&p).is_lt()) {
            regressions += 1;
        }
        prev = Some(score);
        budget *= 2;
        steps += 1;
    }
    outcome(
        winner_is_max && regressions == 0,
        format!(
            "winner equals best of {} retained scores={winner_is_max}; {steps} budget doublings from 1, {regressions} decreased the winner",
            full.evaluations.len()
        ),
    )
}

fn main() {
    assert!(fixtures().exists());
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        (
            "page budget and stage count exactness",
            EQ_LIMIT,
            criterion_1,
        ),
        (
            "k-split halves weight pages and doubles stages",
            KSPLIT_LIMIT,
            criterion_2,
        ),
        (
            "shallow pipeline duty-cycle loss",
            DUTY_LOSS_LIMIT,
            criterion_3,
        ),
        (
            "dependency graph matches brute-force oracle",
            DAG_LIMIT,
            criterion_4,
        ),
        ("search gain over naive baseline", GAIN_LIMIT, criterion_5),
        (
            "kept candidates are valid and deadlock-free",
            SAFETY_LIMIT,
            criterion_6,
        ),
        (
            "passes and wider prefetch never lengthen makespan",
            MONOTONE_LIMIT,
            criterion_7,
        ),
        (
            "determinism and trace round-trip",
            DETERMINISM_LIMIT,
            criterion_8,
        ),
        ("search soundness", SOUNDNESS_LIMIT, criterion_9),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        let elapsed = t.elapsed();
        let pass = o.pass && elapsed <= *limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n}: {} {name}: {} [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
