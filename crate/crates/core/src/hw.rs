//! Hardware description and the analytical shared-memory model.
//!
//! The page budget, the stage-count bound, the bank-conflict multiplier and
//! the per-op latency model all live here. Everything is a pure function of
//! a [`HardwareSpec`] and its arguments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};
use crate::ir::{MicroOp, MicroOpKind};

/// Bytes per shared-memory bank word.
pub const BANK_WORD_BYTES: u32 = 4;

/// Per-stage shared-memory overhead that is not paged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverhead {
    pub instr_buf: u64,
    pub semaphores: u64,
    pub scratch: u64,
}

impl StageOverhead {
    pub fn total(&self) -> u64 {
        self.instr_buf + self.semaphores + self.scratch
    }
}

impl Default for StageOverhead {
    fn default() -> Self {
        StageOverhead {
            instr_buf: 2048,
            semaphores: 512,
            scratch: 1536,
        }
    }
}

/// One streaming multiprocessor as seen by the planner.
///
/// Serialized as the hardware spec file. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    #[serde(rename = "smem_max_bytes")]
    pub smem_max: u64,
    #[serde(rename = "page_size_bytes")]
    pub page_size: u64,
    pub stage_overhead: StageOverhead,
    pub warps_per_sm: u32,
    pub banks: u32,
    pub lane_width: u32,
    pub issue_width: u32,
    pub latency_table: BTreeMap<MicroOpKind, u32>,
}

pub fn default_latency_table() -> BTreeMap<MicroOpKind, u32> {
    use MicroOpKind::*;
    BTreeMap::from([
        (GlobalToShared, 64),
        (LoadSharedToReg, 8),
        (Dequant, 4),
        (MmaTile, 16),
        (Epilogue, 4),
        (Reduce, 8),
        (RegToGlobal, 48),
    ])
}

impl Default for HardwareSpec {
    /// A 128 KB Ada-class SM (L20).
    fn default() -> Self {
        HardwareSpec {
            smem_max: 128 * 1024,
            page_size: 16 * 1024,
            stage_overhead: StageOverhead::default(),
            warps_per_sm: 32,
            banks: 32,
            lane_width: 32,
            issue_width: 1,
            latency_table: default_latency_table(),
        }
    }
}

impl HardwareSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: HardwareSpec =
            serde_json::from_str(text).map_err(|e| Error::parse("hardware spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.smem_max == 0 || self.page_size == 0 {
            return Err(Error::invalid(
                "hardware spec",
                "smem_max_bytes and page_size_bytes must be positive",
            ));
        }
        if self.smem_max < 2 * self.page_size {
            return Err(Error::invalid(
                "hardware spec",
                "page_size_bytes must fit into smem_max_bytes at least twice",
            ));
        }
        if self.banks == 0 || self.lane_width == 0 || self.issue_width == 0 {
            return Err(Error::invalid(
                "hardware spec",
                "banks, lane_width and issue_width must be at least 1",
            ));
        }
        for kind in MicroOpKind::ALL {
            match self.latency_table.get(&kind) {
                None => return Err(Error::UnknownKind(kind.to_string())),
                Some(0) => {
                    return Err(Error::invalid(
                        "hardware spec",
                        format!("latency for {kind} must be at least 1"),
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn latency(&self, kind: MicroOpKind) -> Result<u32> {
        self.latency_table
            .get(&kind)
            .copied()
            .ok_or_else(|| Error::UnknownKind(kind.to_string()))
    }

    pub fn pages_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.page_size)
    }
}

/// Page counts feeding the stage-count bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageBudget {
    pub n_page_total: u64,
    pub n_page_weight: u64,
    pub n_page_scale: u64,
    pub n_page_act: u64,
    pub n_page_per_stage: u64,
    pub n_stage: u64,
}

impl PageBudget {
    pub fn reserved(&self) -> u64 {
        self.n_page_weight + self.n_page_scale + self.n_page_act
    }
}

/// Number of pages left once `n_stage` copies of the per-stage overhead are
/// carved out of shared memory. Clamps to zero instead of going negative.
pub fn compute_page_budget(spec: &HardwareSpec, n_stage: u64) -> u64 {
    let overhead = u128::from(n_stage) * u128::from(spec.stage_overhead.total());
    let smem = u128::from(spec.smem_max);
    if overhead >= smem {
        return 0;
    }
    ((smem - overhead) / u128::from(spec.page_size)) as u64
}

/// Deepest pipeline the remaining pages allow. Zero means infeasible.
pub fn compute_stage_count(budget: &PageBudget) -> Result<u64> {
    if budget.n_page_per_stage == 0 {
        return Err(Error::invalid(
            "page budget",
            "n_page_per_stage must be at least 1",
        ));
    }
    Ok(budget.n_page_total.saturating_sub(budget.reserved()) / budget.n_page_per_stage)
}

/// How one warp-wide shared-memory access lays out across lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessPattern {
    pub element_bytes: u32,
    pub stride_elements: u32,
    pub lanes: u32,
    pub swizzle_constant: u32,
}

impl AccessPattern {
    pub fn validate(&self, spec: &HardwareSpec) -> Result<()> {
        if !matches!(self.element_bytes, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::invalid(
                "access pattern",
                format!("element_bytes {} not in {{1,2,4,8,16}}", self.element_bytes),
            ));
        }
        if self.lanes == 0 || self.lanes > spec.lane_width {
            return Err(Error::invalid(
                "access pattern",
                format!("lanes {} outside 1..={}", self.lanes, spec.lane_width),
            ));
        }
        Ok(())
    }

    pub fn with_swizzle(mut self, swizzle: u32) -> Self {
        self.swizzle_constant = swizzle;
        self
    }
}

/// Serialization factor of one warp access: the worst per-bank count of
/// distinct words, normalized by the wavefronts the access needs anyway.
///
/// The swizzle XORs an element's column within its bank row with the bank
/// row index masked by `swizzle_constant`, so rows that would all land on
/// the same bank are spread across banks.
pub fn bank_conflict_factor(pattern: &AccessPattern, spec: &HardwareSpec) -> u32 {
    let banks = u64::from(spec.banks.max(1));
    let lanes = u64::from(pattern.lanes.max(1));
    let eb = u64::from(pattern.element_bytes.max(1));
    let words_per_elem = (eb / u64::from(BANK_WORD_BYTES)).max(1);
    let mask = u64::from(pattern.swizzle_constant);

    let mut per_bank: BTreeMap<u64, std::collections::BTreeSet<u64>> = BTreeMap::new();
    for lane in 0..lanes {
        let first = lane * u64::from(pattern.stride_elements) * eb / u64::from(BANK_WORD_BYTES);
        for w in first..first + words_per_elem {
            let row = w / banks;
            let chunk = (w % banks) / words_per_elem;
            let chunks_per_row = (banks / words_per_elem).max(1);
            let swizzled = (chunk ^ (row & mask)) % chunks_per_row;
            let bank = swizzled * words_per_elem + (w % words_per_elem);
            per_bank.entry(bank % banks).or_default().insert(w);
        }
    }
    let worst = per_bank.values().map(|s| s.len() as u64).max().unwrap_or(1);
    let wavefronts = (lanes * eb)
        .div_ceil(banks * u64::from(BANK_WORD_BYTES))
        .max(1);
    let factor = worst.div_ceil(wavefronts).max(1);
    factor.min(lanes.min(banks)) as u32
}

/// Cycles an op holds its role for. Only shared-to-register loads pay the
/// bank-conflict multiplier.
pub fn micro_op_cost(op: &MicroOp, spec: &HardwareSpec, conflict: u32) -> Result<u64> {
    let base = u64::from(spec.latency(op.kind)?);
    let cost = if op.kind.touches_shared_banks() {
        base * u64::from(conflict.max(1))
    } else {
        base
    };
    Ok(cost.max(1))
}
