//! Command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dag::build_dep_graph;
use crate::error::{read_file, Error, Result};
use crate::hw::{compute_page_budget, HardwareSpec};
use crate::ir::{load_graph, lower_graph, MicroOpKind, OperatorGraph, TileConfig};
use crate::plan::{
    per_stage_pages, prepare_workload, realize_candidate, stage_ceiling, validate_plan,
    PlanCandidate, PlanConfig, PlanFlags,
};
use crate::search::{evaluate_config, search, SearchOptions, SearchSpace};
use crate::sim::{chrome_trace, simulate, SimReport};
use crate::trace::SolidifiedTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "mk-planner",
    version,
    about = "Offline schedule planner for persistent fused GPU kernels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Args, Clone)]
pub struct Inputs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub hw: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct TileArgs {
    #[arg(long, default_value_t = 16)]
    pub block_m: u64,
    #[arg(long, default_value_t = 64)]
    pub block_n: u64,
    #[arg(long, default_value_t = 64)]
    pub block_k: u64,
    #[arg(long, default_value_t = 1)]
    pub k_split: u64,
}

impl TileArgs {
    fn tile(&self) -> TileConfig {
        TileConfig {
            block_m: self.block_m,
            block_n: self.block_n,
            block_k: self.block_k,
            k_split: self.k_split,
        }
    }
}

#[derive(Debug, Args, Clone, Copy)]
pub struct PlanArgs {
    #[arg(long, default_value_t = 2)]
    pub stages: u32,
    #[arg(long, default_value_t = 16)]
    pub consumer_warps: u32,
    #[arg(long, default_value_t = 1)]
    pub stride: u32,
    #[arg(long, default_value_t = 0)]
    pub swizzle: u32,
    #[arg(long)]
    pub gap_fill: bool,
    #[arg(long)]
    pub reuse_act_weight: bool,
    #[arg(long)]
    pub reuse_act_output: bool,
    #[arg(long)]
    pub split_reduction: bool,
    #[arg(long)]
    pub role_rebalance: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lower a graph to micro-ops and summarize shared-memory demand.
    Lower {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        tile: TileArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the dependency graph as DOT.
    Dag {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        tile: TileArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build one plan candidate.
    Plan {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        tile: TileArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a plan file.
    Simulate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Chrome trace timeline output.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Search the plan space and write the winning trace.
    Search {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        budget: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a plan file or a solidified trace.
    Validate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Describe a trace and the effect of each optimization flag.
    Explain {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::MissingInput(format!("--{flag} is required")))
}

fn load_inputs(inputs: &Inputs) -> Result<(OperatorGraph, HardwareSpec)> {
    let graph = load_graph(required(&inputs.graph, "graph")?)?;
    let hw = HardwareSpec::load(required(&inputs.hw, "hw")?)?;
    Ok((graph, hw))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::parse("output", e))
}

fn config_from(tile: &TileArgs, p: &PlanArgs) -> PlanConfig {
    PlanConfig {
        tile: tile.tile(),
        n_stage: p.stages,
        consumer_warps: p.consumer_warps,
        prefetch_stride: p.stride,
        swizzle: p.swizzle,
        flags: PlanFlags {
            gap_fill: p.gap_fill,
            reuse_act_weight: p.reuse_act_weight,
            reuse_act_output: p.reuse_act_output,
            split_reduction: p.split_reduction,
            role_rebalance: p.role_rebalance,
        },
    }
}

fn report_text(report: &SimReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "makespan      {} cycles", report.makespan);
    let _ = writeln!(s, "duty cycle    {:.4}", report.duty_cycle);
    for (role, t) in &report.roles {
        let _ = writeln!(
            s,
            "  {:<9} busy {:>8}  idle {:>8}",
            role.to_string(),
            t.busy,
            t.idle
        );
    }
    let _ = writeln!(
        s,
        "stalls        page {}  dep {}  issue {}",
        report.stalls.page_wait, report.stalls.dep_wait, report.stalls.issue_wait
    );
    s
}

/// Runs one command; returns what goes to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Lower { inputs, tile, out } => cmd_lower(cli, inputs, tile, out.as_deref()),
        Command::Dag { inputs, tile, out } => {
            let (graph, hw) = load_inputs(inputs)?;
            let trace = lower_graph(&graph, &tile.tile(), hw.page_size)?;
            let dot = build_dep_graph(&trace).to_dot(&trace);
            match out {
                Some(p) => {
                    write_out(p, dot.as_bytes())?;
                    Ok(format!("wrote {} nodes to {}\n", trace.len(), p.display()))
                }
                None => Ok(dot),
            }
        }
        Command::Plan {
            inputs,
            tile,
            plan,
            out,
        } => {
            let (graph, hw) = load_inputs(inputs)?;
            let config = config_from(tile, plan);
            let workload =
                prepare_workload(&graph, config.tile, config.flags.split_reduction, &hw)?;
            if let Err(reason) = realize_candidate(&config, &workload, &hw)? {
                return Err(Error::NoFeasibleCandidate {
                    pruned: BTreeMap::from([(reason.to_string(), 1)]),
                });
            }
            let (candidate, report) = evaluate_config(&graph, &hw, &config)?;
            let json = to_json(&candidate)?;
            if let Some(p) = out {
                write_out(p, json.as_bytes())?;
            }
            match cli.format {
                Format::Json if out.is_none() => Ok(json + "\n"),
                _ => Ok(format!(
                    "plan {}\npages {} ({} used)\n{}",
                    config.encoding(),
                    candidate.page_plan.n_pages,
                    candidate.page_plan.pages_used(),
                    report_text(&report)
                )),
            }
        }
        Command::Simulate {
            inputs,
            plan,
            out,
            timeline,
        } => {
            let (graph, hw) = load_inputs(inputs)?;
            let candidate = load_plan(required(plan, "plan")?)?;
            let cfg = candidate.config;
            let workload = prepare_workload(&graph, cfg.tile, cfg.flags.split_reduction, &hw)?;
            let violations = validate_plan(&candidate, &workload);
            if !violations.is_empty() {
                return Err(Error::invalid(
                    "plan",
                    format!("{} violations, first {:?}", violations.len(), violations[0]),
                ));
            }
            let report = simulate(&candidate, &workload, &hw)?;
            if let Some(p) = out {
                write_out(p, to_json(&report)?.as_bytes())?;
            }
            if let Some(p) = timeline {
                write_out(
                    p,
                    to_json(&chrome_trace(&report, &workload, &candidate))?.as_bytes(),
                )?;
            }
            match cli.format {
                Format::Json => Ok(to_json(&report)? + "\n"),
                Format::Text => Ok(report_text(&report)),
            }
        }
        Command::Search {
            inputs,
            space,
            budget,
            out,
        } => {
            let (graph, hw) = load_inputs(inputs)?;
            let space = SearchSpace::load(required(space, "space")?)?;
            let outcome = search(&graph, &hw, &space, &SearchOptions::with_budget(*budget))?;
            let trace = SolidifiedTrace::from_outcome(&outcome, &graph, &hw, &space)?;
            if let Some(p) = out {
                write_out(p, &trace.serialize()?)?;
            }
            match cli.format {
                Format::Json => Ok(to_json(&trace.score)? + "\n"),
                Format::Text => {
                    let mut s = format!("winner {}\n", outcome.evaluation.config.encoding());
                    s += &report_text(&outcome.report);
                    let _ = writeln!(
                        s,
                        "candidates    enumerated {}  simulated {}",
                        outcome.stats.enumerated, outcome.stats.simulated
                    );
                    for (reason, n) in &outcome.stats.pruned {
                        let _ = writeln!(s, "  pruned {reason}: {n}");
                    }
                    Ok(s)
                }
            }
        }
        Command::Validate {
            inputs,
            plan,
            trace,
        } => {
            let (graph, hw) = load_inputs(inputs)?;
            if let Some(t) = trace {
                let t = load_trace(t)?;
                t.verify_inputs(&graph, &hw)?;
                t.resimulate(&graph, &hw)?;
                return Ok("trace ok: header matches inputs, score reproduces\n".into());
            }
            let candidate = load_plan(required(plan, "plan")?)?;
            let cfg = candidate.config;
            let workload = prepare_workload(&graph, cfg.tile, cfg.flags.split_reduction, &hw)?;
            let violations = validate_plan(&candidate, &workload);
            if violations.is_empty() {
                Ok("plan ok\n".into())
            } else {
                Err(Error::invalid("plan", format!("{violations:?}")))
            }
        }
        Command::Explain { inputs, trace } => {
            let t = load_trace(required(trace, "trace")?)?;
            let (graph, hw) = load_inputs(inputs)?;
            t.verify_inputs(&graph, &hw)?;
            explain(&t, &graph, &hw)
        }
    }
}

fn cmd_lower(cli: &Cli, inputs: &Inputs, tile: &TileArgs, out: Option<&Path>) -> Result<String> {
    let (graph, hw) = load_inputs(inputs)?;
    let trace = lower_graph(&graph, &tile.tile(), hw.page_size)?;
    if let Some(p) = out {
        write_out(p, to_json(&trace)?.as_bytes())?;
    }
    let per_stage = per_stage_pages(&trace);
    #[derive(Serialize)]
    struct StageRow {
        n_stage: u32,
        page_budget: u64,
        stage_ceiling: u64,
    }
    let rows: Vec<StageRow> = (1..=4)
        .map(|n| {
            let cfg = PlanConfig {
                tile: tile.tile(),
                n_stage: n,
                consumer_warps: 16,
                prefetch_stride: 1,
                swizzle: 0,
                flags: PlanFlags::default(),
            };
            StageRow {
                n_stage: n,
                page_budget: compute_page_budget(&hw, n as u64),
                stage_ceiling: stage_ceiling(&cfg, &trace, &hw).unwrap_or(0),
            }
        })
        .collect();
    let counts: BTreeMap<String, usize> = MicroOpKind::ALL
        .iter()
        .map(|k| (k.to_string(), trace.count(*k)))
        .collect();
    #[derive(Serialize)]
    struct Summary<'a> {
        micro_ops: usize,
        counts: &'a BTreeMap<String, usize>,
        pages_per_stage: u64,
        peak_stage_smem_bytes: u64,
        stages: &'a [StageRow],
    }
    let summary = Summary {
        micro_ops: trace.len(),
        counts: &counts,
        pages_per_stage: per_stage,
        peak_stage_smem_bytes: per_stage * hw.page_size,
        stages: &rows,
    };
    if cli.format == Format::Json {
        return Ok(to_json(&summary)? + "\n");
    }
    let mut s = format!("{} micro-ops\n", trace.len());
    for (k, n) in &counts {
        let _ = writeln!(s, "  {k:<16} {n}");
    }
    let _ = writeln!(
        s,
        "pages per stage {per_stage} ({} bytes)",
        per_stage * hw.page_size
    );
    for r in &rows {
        let _ = writeln!(
            s,
            "  stages {}: page budget {}, stage ceiling {}",
            r.n_stage, r.page_budget, r.stage_ceiling
        );
    }
    if cli.verbose {
        for p in &trace.padding {
            let _ = writeln!(
                s,
                "  padded {}.{} {} -> {}",
                p.operator, p.dim, p.from, p.to
            );
        }
    }
    Ok(s)
}

fn load_plan(path: &Path) -> Result<PlanCandidate> {
    serde_json::from_str(&read_file(path)?).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn load_trace(path: &Path) -> Result<SolidifiedTrace> {
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.display().to_string())
        } else {
            Error::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    SolidifiedTrace::parse(&bytes)
}

/// Winner summary plus, per enabled flag, the score change from turning it
/// off (re-simulated).
pub fn explain(t: &SolidifiedTrace, graph: &OperatorGraph, hw: &HardwareSpec) -> Result<String> {
    let cfg = t.plan.config;
    let mut s = format!("winner {}\n", cfg.encoding());
    let _ = writeln!(
        s,
        "  tile {}x{}x{} split {}, {} stages, stride {}, {} consumer warps, swizzle {}",
        cfg.tile.block_m,
        cfg.tile.block_n,
        cfg.tile.block_k,
        cfg.tile.k_split,
        cfg.n_stage,
        cfg.prefetch_stride,
        cfg.consumer_warps,
        cfg.swizzle
    );
    let _ = writeln!(
        s,
        "  duty cycle {:.4}, makespan {}",
        t.score.duty_cycle, t.score.makespan
    );
    let _ = writeln!(
        s,
        "  stalls: page {} dep {} issue {}",
        t.score.stalls.page_wait, t.score.stalls.dep_wait, t.score.stalls.issue_wait
    );
    let _ = writeln!(
        s,
        "  searched {} candidates, simulated {}",
        t.stats.enumerated, t.stats.simulated
    );
    s += "flag deltas (winner minus flag off):\n";
    if t.stats.enumerated <= 1 {
        s += "  single candidate searched; deltas are against unsearched variants\n";
    }
    let f = cfg.flags;
    type Toggle = (&'static str, bool, fn(&mut PlanFlags));
    let toggles: [Toggle; 5] = [
        ("gap_fill", f.gap_fill, |f| f.gap_fill = false),
        ("reuse_act_weight", f.reuse_act_weight, |f| {
            f.reuse_act_weight = false
        }),
        ("reuse_act_output", f.reuse_act_output, |f| {
            f.reuse_act_output = false
        }),
        ("split_reduction", f.split_reduction, |f| {
            f.split_reduction = false
        }),
        ("role_rebalance", f.role_rebalance, |f| {
            f.role_rebalance = false
        }),
    ];
    for (name, on, off) in toggles {
        if !on {
            let _ = writeln!(s, "  {name:<17} off");
            continue;
        }
        let mut other = cfg;
        off(&mut other.flags);
        match evaluate_config(graph, hw, &other) {
            Ok((_, r)) => {
                let _ = writeln!(
                    s,
                    "  {name:<17} duty {:+.4}  makespan saved {:+}",
                    t.score.duty_cycle - r.duty_cycle,
                    r.makespan as i64 - t.score.makespan as i64
                );
            }
            Err(e) => {
                let _ = writeln!(s, "  {name:<17} infeasible without it ({e})");
            }
        }
    }
    Ok(s)
}
