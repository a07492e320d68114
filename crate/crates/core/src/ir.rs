//! Operator graphs, tile configuration and lowering to micro-op traces.
//!
//! A lowered trace is a flat, program-ordered list of [`MicroOp`]s. Each op
//! names the exact byte ranges it reads and writes, so the dependency graph
//! can be recovered purely from interval overlap. Shared-memory staging and
//! register tiles live in per-operator virtual buffers whose offsets are
//! unique per iteration; physical pages are assigned later by the planner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};
use crate::hw::AccessPattern;

pub const MMA_M: u64 = 16;
pub const MMA_N: u64 = 8;
pub const MMA_K: u64 = 16;
/// Elements sharing one fp16 scale in int4 weights.
pub const INT4_GROUP: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MicroOpKind {
    GlobalToShared,
    LoadSharedToReg,
    Dequant,
    MmaTile,
    Epilogue,
    Reduce,
    RegToGlobal,
}

impl MicroOpKind {
    pub const ALL: [MicroOpKind; 7] = [
        MicroOpKind::GlobalToShared,
        MicroOpKind::LoadSharedToReg,
        MicroOpKind::Dequant,
        MicroOpKind::MmaTile,
        MicroOpKind::Epilogue,
        MicroOpKind::Reduce,
        MicroOpKind::RegToGlobal,
    ];

    pub fn touches_shared_banks(self) -> bool {
        matches!(self, MicroOpKind::LoadSharedToReg)
    }
}

impl fmt::Display for MicroOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Space {
    Global,
    SharedPage,
    Register,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BufferId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BufferInterval {
    pub buffer: BufferId,
    pub offset: u64,
    pub length: u64,
    pub space: Space,
}

impl BufferInterval {
    pub fn new(buffer: BufferId, offset: u64, length: u64, space: Space) -> Self {
        BufferInterval {
            buffer,
            offset,
            length,
            space,
        }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    pub fn overlaps(&self, other: &BufferInterval) -> bool {
        self.buffer == other.buffer && self.offset < other.end() && other.offset < self.end()
    }

    pub fn covers(&self, other: &BufferInterval) -> bool {
        self.buffer == other.buffer && self.offset <= other.offset && other.end() <= self.end()
    }
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct TileCoord {
    pub m: u32,
    pub n: u32,
    pub k: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroOp {
    pub id: u32,
    pub kind: MicroOpKind,
    pub reads: Vec<BufferInterval>,
    pub writes: Vec<BufferInterval>,
    pub tile: TileCoord,
    pub source_operator: u32,
    /// Bank access shape of a shared-memory load; the swizzle is supplied by
    /// the plan at simulation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access: Option<AccessPattern>,
}

impl MicroOp {
    pub fn shared_reads(&self) -> impl Iterator<Item = &BufferInterval> {
        self.reads.iter().filter(|i| i.space == Space::SharedPage)
    }

    pub fn shared_writes(&self) -> impl Iterator<Item = &BufferInterval> {
        self.writes.iter().filter(|i| i.space == Space::SharedPage)
    }
}

/// What a buffer in a trace is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferUse {
    /// Declared in the operator graph.
    Graph,
    /// Streamed weight (or KV) sub-tiles in shared memory.
    WeightStage,
    /// Activation tiles staged in shared memory.
    ActStage,
    /// Output staging before write-back.
    OutStage,
    /// Register tiles and accumulators.
    Register,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferInfo {
    pub name: String,
    pub space: Space,
    pub usage: BufferUse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub operator: String,
    pub dim: char,
    pub from: u64,
    pub to: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroOpTrace {
    pub buffers: Vec<BufferInfo>,
    pub ops: Vec<MicroOp>,
    pub padding: Vec<Padding>,
}

impl MicroOpTrace {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn buffer(&self, id: BufferId) -> &BufferInfo {
        &self.buffers[id.0 as usize]
    }

    pub fn count(&self, kind: MicroOpKind) -> usize {
        self.ops.iter().filter(|o| o.kind == kind).count()
    }

    pub fn counts_by_kind(&self) -> BTreeMap<MicroOpKind, usize> {
        let mut m = BTreeMap::new();
        for op in &self.ops {
            *m.entry(op.kind).or_insert(0) += 1;
        }
        m
    }

    pub fn usage_of(&self, interval: &BufferInterval) -> BufferUse {
        self.buffer(interval.buffer).usage
    }

    /// Renumbers ops densely in their current order.
    pub(crate) fn renumber(&mut self) {
        for (i, op) in self.ops.iter_mut().enumerate() {
            op.id = i as u32;
        }
    }
}

// ---------------------------------------------------------------------------
// Operator graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    RmsNorm,
    Gemm,
    AttentionQK,
    Softmax,
    AttentionPV,
    Swiglu,
    ResidualAdd,
    LmHead,
}

impl OperatorKind {
    /// Kinds lowered through the tiled matrix-multiply path.
    pub fn is_gemm_like(self) -> bool {
        matches!(
            self,
            OperatorKind::Gemm
                | OperatorKind::AttentionQK
                | OperatorKind::AttentionPV
                | OperatorKind::LmHead
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "fp16")]
    Fp16,
    #[serde(rename = "int4_w4a16")]
    Int4W4A16,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Operator {
    pub id: String,
    pub kind: OperatorKind,
    pub dims: Dims,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
}

fn default_dtype() -> DType {
    DType::Fp16
}

impl Operator {
    fn dim(&self, name: char) -> Result<u64> {
        let v = match name {
            'm' => self.dims.m,
            'n' => self.dims.n,
            _ => self.dims.k,
        };
        v.ok_or_else(|| {
            Error::invalid(
                "operator",
                format!(
                    "operator `{}` ({:?}) requires dim {name}",
                    self.id, self.kind
                ),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferDecl {
    pub id: String,
    pub space: Space,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorGraph {
    pub buffers: Vec<BufferDecl>,
    pub operators: Vec<Operator>,
}

impl OperatorGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        let graph: OperatorGraph =
            serde_json::from_str(text).map_err(|e| Error::parse("graph", e))?;
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        let mut declared = BTreeSet::new();
        for b in &self.buffers {
            if !declared.insert(b.id.as_str()) {
                return Err(Error::invalid(
                    "graph",
                    format!("duplicate buffer `{}`", b.id),
                ));
            }
            if b.bytes == 0 {
                return Err(Error::invalid(
                    "graph",
                    format!("buffer `{}` has zero bytes", b.id),
                ));
            }
        }
        let mut producer: BTreeMap<&str, usize> = BTreeMap::new();
        let mut op_ids = BTreeSet::new();
        for (i, op) in self.operators.iter().enumerate() {
            if !op_ids.insert(op.id.as_str()) {
                return Err(Error::invalid(
                    "graph",
                    format!("duplicate operator `{}`", op.id),
                ));
            }
            for out in &op.outputs {
                if !declared.contains(out.as_str()) {
                    return Err(Error::DanglingBuffer {
                        operator: op.id.clone(),
                        buffer: out.clone(),
                    });
                }
                producer.entry(out.as_str()).or_insert(i);
            }
        }
        for (i, op) in self.operators.iter().enumerate() {
            for d in [op.dims.m, op.dims.n, op.dims.k].into_iter().flatten() {
                if d == 0 {
                    return Err(Error::invalid(
                        "graph",
                        format!("operator `{}` has a non-positive dim", op.id),
                    ));
                }
            }
            op.dim('m')?;
            op.dim('n')?;
            if op.kind.is_gemm_like() {
                op.dim('k')?;
            }
            let refs = op.inputs.iter().chain(op.weight.iter());
            for r in refs {
                if !declared.contains(r.as_str()) {
                    return Err(Error::DanglingBuffer {
                        operator: op.id.clone(),
                        buffer: r.clone(),
                    });
                }
                if let Some(&p) = producer.get(r.as_str()) {
                    if p >= i {
                        return Err(Error::invalid(
                            "graph",
                            format!("operator `{}` reads `{r}` before it is produced", op.id),
                        ));
                    }
                }
            }
            let (min_in, max_in) = match op.kind {
                OperatorKind::ResidualAdd => (2, 2),
                OperatorKind::Swiglu => (1, 2),
                _ => (1, 1),
            };
            if op.inputs.len() < min_in || op.inputs.len() > max_in {
                return Err(Error::invalid(
                    "graph",
                    format!(
                        "operator `{}` ({:?}) takes {min_in}..={max_in} inputs, got {}",
                        op.id,
                        op.kind,
                        op.inputs.len()
                    ),
                ));
            }
            if op.outputs.len() != 1 {
                return Err(Error::invalid(
                    "graph",
                    format!("operator `{}` must have exactly one output", op.id),
                ));
            }
            if (op.kind.is_gemm_like() || op.kind == OperatorKind::RmsNorm) && op.weight.is_none() {
                return Err(Error::invalid(
                    "graph",
                    format!(
                        "operator `{}` ({:?}) requires a weight buffer",
                        op.id, op.kind
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn buffer_space(&self, id: &str) -> Option<Space> {
        self.buffers.iter().find(|b| b.id == id).map(|b| b.space)
    }
}

pub fn load_graph(path: &Path) -> Result<OperatorGraph> {
    let text = read_file(path)?;
    OperatorGraph::from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            context: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Resident bytes of an operator's weights. Vectors (norm scales) use K = 1.
pub fn weight_bytes(op: &Operator, dtype: DType) -> Result<u64> {
    if op.weight.is_none() {
        return Err(Error::invalid(
            "operator",
            format!("operator `{}` has no weights", op.id),
        ));
    }
    let n = op.dim('n')?;
    let k = op.dims.k.unwrap_or(1);
    Ok(tile_weight_bytes(n, k, dtype))
}

/// Bytes of an `n × k` weight block, including int4 group scales.
pub fn tile_weight_bytes(n: u64, k: u64, dtype: DType) -> u64 {
    match dtype {
        DType::Fp16 => n * k * 2,
        DType::Int4W4A16 => (n * k).div_ceil(2) + n * k.div_ceil(INT4_GROUP) * 2,
    }
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    pub block_m: u64,
    pub block_n: u64,
    pub block_k: u64,
    pub k_split: u64,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            block_m: 16,
            block_n: 64,
            block_k: 64,
            k_split: 1,
        }
    }
}

impl TileConfig {
    pub fn mma() -> Self {
        TileConfig {
            block_m: MMA_M,
            block_n: MMA_N,
            block_k: MMA_K,
            k_split: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.block_m > 0
            && self.block_n > 0
            && self.block_k > 0
            && self.block_m.is_multiple_of(MMA_M)
            && self.block_n.is_multiple_of(MMA_N)
            && self.block_k.is_multiple_of(MMA_K)
            && self.k_split > 0
            && self.block_k.is_multiple_of(self.k_split);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "tile config",
                format!(
                    "{}x{}x{} split {} must be positive MMA-tile multiples with k_split dividing block_k",
                    self.block_m, self.block_n, self.block_k, self.k_split
                ),
            ))
        }
    }

    pub fn k_sub(&self) -> u64 {
        self.block_k / self.k_split
    }

    /// Weight bytes staged by one pipeline iteration.
    pub fn weight_subtile_bytes(&self, dtype: DType) -> u64 {
        tile_weight_bytes(self.block_n, self.k_sub(), dtype)
    }
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

struct Builder<'a> {
    graph_ids: BTreeMap<&'a str, BufferId>,
    trace: MicroOpTrace,
    page_size: u64,
}

impl<'a> Builder<'a> {
    fn new(graph: &'a OperatorGraph, page_size: u64) -> Self {
        let mut trace = MicroOpTrace::default();
        let mut graph_ids = BTreeMap::new();
        for b in &graph.buffers {
            graph_ids.insert(b.id.as_str(), BufferId(trace.buffers.len() as u32));
            trace.buffers.push(BufferInfo {
                name: b.id.clone(),
                space: b.space,
                usage: BufferUse::Graph,
            });
        }
        Builder {
            graph_ids,
            trace,
            page_size,
        }
    }

    fn virtual_buffer(&mut self, name: String, usage: BufferUse) -> BufferId {
        let space = match usage {
            BufferUse::Register => Space::Register,
            BufferUse::Graph => Space::Global,
            _ => Space::SharedPage,
        };
        let id = BufferId(self.trace.buffers.len() as u32);
        self.trace.buffers.push(BufferInfo { name, space, usage });
        id
    }

    fn graph_buffer(&self, op: &Operator, name: &str) -> Result<(BufferId, Space)> {
        let id = *self
            .graph_ids
            .get(name)
            .ok_or_else(|| Error::DanglingBuffer {
                operator: op.id.clone(),
                buffer: name.to_string(),
            })?;
        Ok((id, self.trace.buffers[id.0 as usize].space))
    }

    /// Splits a staged region into page-sized intervals.
    fn paged(&self, buffer: BufferId, offset: u64, bytes: u64) -> Vec<BufferInterval> {
        let mut out = Vec::new();
        let mut done = 0;
        while done < bytes {
            let len = (bytes - done).min(self.page_size);
            out.push(BufferInterval::new(
                buffer,
                offset + done,
                len,
                Space::SharedPage,
            ));
            done += len;
        }
        out
    }

    fn push(&mut self, op: MicroOp) {
        self.trace.ops.push(op);
    }
}

/// Activation tensors use a column-major layout padded to the block rows,
/// so a full-height column range is one contiguous interval.
#[allow(clippy::too_many_arguments)]
fn column_hull(
    buffer: BufferId,
    space: Space,
    rows_padded: u64,
    m0: u64,
    m1: u64,
    c0: u64,
    c1: u64,
    elem: u64,
) -> BufferInterval {
    let start = (c0 * rows_padded + m0) * elem;
    let end = ((c1 - 1) * rows_padded + m1) * elem;
    BufferInterval::new(buffer, start, end - start, space)
}

fn ldmatrix_pattern(row_pitch_bytes: u64) -> AccessPattern {
    AccessPattern {
        element_bytes: 16,
        stride_elements: (row_pitch_bytes / 16).max(1) as u32,
        lanes: 8,
        swizzle_constant: 0,
    }
}

fn pad(b: &mut Builder<'_>, op: &Operator, dim: char, from: u64, block: u64) -> u64 {
    let to = from.div_ceil(block) * block;
    if to != from {
        b.trace.padding.push(Padding {
            operator: op.id.clone(),
            dim,
            from,
            to,
        });
    }
    to
}

fn lower_gemm(b: &mut Builder<'_>, op: &Operator, op_index: u32, tiles: &TileConfig) -> Result<()> {
    let (m, n, k) = (op.dim('m')?, op.dim('n')?, op.dim('k')?);
    let m_pad = pad(b, op, 'm', m, tiles.block_m);
    let n_pad = pad(b, op, 'n', n, tiles.block_n);
    let k_pad = pad(b, op, 'k', k, tiles.block_k);
    let (x, x_space) = b.graph_buffer(op, &op.inputs[0])?;
    let (y, y_space) = b.graph_buffer(op, &op.outputs[0])?;
    let weight_name = op.weight.as_deref().unwrap_or_default();
    let (w, w_space) = b.graph_buffer(op, weight_name)?;

    let smem_w = b.virtual_buffer(format!("{}.smem_w", op.id), BufferUse::WeightStage);
    let smem_a = b.virtual_buffer(format!("{}.smem_a", op.id), BufferUse::ActStage);
    let smem_o = b.virtual_buffer(format!("{}.smem_o", op.id), BufferUse::OutStage);
    let reg_a = b.virtual_buffer(format!("{}.reg_a", op.id), BufferUse::Register);
    let reg_w = b.virtual_buffer(format!("{}.reg_w", op.id), BufferUse::Register);
    let reg_d = b.virtual_buffer(format!("{}.reg_dq", op.id), BufferUse::Register);
    let acc = b.virtual_buffer(format!("{}.acc", op.id), BufferUse::Register);

    let int4 = op.dtype == DType::Int4W4A16;
    let k_sub = tiles.k_sub();
    let w_bytes = tiles.weight_subtile_bytes(op.dtype);
    let a_bytes = tiles.block_m * k_sub * 2;
    let o_bytes = tiles.block_m * tiles.block_n * 2;
    let acc_bytes = tiles.block_m * tiles.block_n * 4;
    let w_pitch = if int4 { k_sub / 2 } else { k_sub * 2 };
    let (mb_count, nb_count, kb_count) = (
        m_pad / tiles.block_m,
        n_pad / tiles.block_n,
        k_pad / tiles.block_k,
    );

    let mut iteration = 0u64;
    for mb in 0..mb_count {
        for nb in 0..nb_count {
            let out_tile = mb * nb_count + nb;
            let acc_iv = BufferInterval::new(acc, out_tile * acc_bytes, acc_bytes, Space::Register);
            for kb in 0..kb_count {
                for ks in 0..tiles.k_split {
                    let coord = TileCoord {
                        m: mb as u32,
                        n: nb as u32,
                        k: (kb * tiles.k_split + ks) as u32,
                    };
                    let k0 = kb * tiles.block_k + ks * k_sub;
                    let w_index = (nb * kb_count + kb) * tiles.k_split + ks;
                    let w_src = BufferInterval::new(w, w_index * w_bytes, w_bytes, w_space);
                    let x_src = column_hull(
                        x,
                        x_space,
                        m_pad,
                        mb * tiles.block_m,
                        (mb + 1) * tiles.block_m,
                        k0,
                        k0 + k_sub,
                        2,
                    );
                    let w_stage = b.paged(smem_w, iteration * w_bytes, w_bytes);
                    let a_stage = BufferInterval::new(
                        smem_a,
                        iteration * a_bytes,
                        a_bytes,
                        Space::SharedPage,
                    );
                    let mut writes = w_stage.clone();
                    writes.push(a_stage);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::GlobalToShared,
                        reads: vec![w_src, x_src],
                        writes,
                        tile: coord,
                        source_operator: op_index,
                        access: None,
                    });
                    let a_reg =
                        BufferInterval::new(reg_a, iteration * a_bytes, a_bytes, Space::Register);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::LoadSharedToReg,
                        reads: vec![a_stage],
                        writes: vec![a_reg],
                        tile: coord,
                        source_operator: op_index,
                        access: Some(ldmatrix_pattern(k_sub * 2)),
                    });
                    let w_reg =
                        BufferInterval::new(reg_w, iteration * w_bytes, w_bytes, Space::Register);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::LoadSharedToReg,
                        reads: w_stage,
                        writes: vec![w_reg],
                        tile: coord,
                        source_operator: op_index,
                        access: Some(ldmatrix_pattern(w_pitch)),
                    });
                    let mut mma_w = w_reg;
                    if int4 {
                        let dq_bytes = tiles.block_n * k_sub * 2;
                        let dq = BufferInterval::new(
                            reg_d,
                            iteration * dq_bytes,
                            dq_bytes,
                            Space::Register,
                        );
                        b.push(MicroOp {
                            id: 0,
                            kind: MicroOpKind::Dequant,
                            reads: vec![w_reg],
                            writes: vec![dq],
                            tile: coord,
                            source_operator: op_index,
                            access: None,
                        });
                        mma_w = dq;
                    }
                    let mut reads = vec![a_reg, mma_w];
                    if kb > 0 || ks > 0 {
                        reads.push(acc_iv);
                    }
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::MmaTile,
                        reads,
                        writes: vec![acc_iv],
                        tile: coord,
                        source_operator: op_index,
                        access: None,
                    });
                    iteration += 1;
                }
            }
            let coord = TileCoord {
                m: mb as u32,
                n: nb as u32,
                k: 0,
            };
            let o_stage =
                BufferInterval::new(smem_o, out_tile * o_bytes, o_bytes, Space::SharedPage);
            b.push(MicroOp {
                id: 0,
                kind: MicroOpKind::Epilogue,
                reads: vec![acc_iv],
                writes: vec![o_stage],
                tile: coord,
                source_operator: op_index,
                access: None,
            });
            let y_dst = column_hull(
                y,
                y_space,
                m_pad,
                mb * tiles.block_m,
                (mb + 1) * tiles.block_m,
                nb * tiles.block_n,
                (nb + 1) * tiles.block_n,
                2,
            );
            b.push(MicroOp {
                id: 0,
                kind: MicroOpKind::RegToGlobal,
                reads: vec![o_stage],
                writes: vec![y_dst],
                tile: coord,
                source_operator: op_index,
                access: None,
            });
        }
    }
    Ok(())
}

/// Element-wise and row-reduction operators, tiled `block_m × block_n`.
fn lower_elementwise(
    b: &mut Builder<'_>,
    op: &Operator,
    op_index: u32,
    tiles: &TileConfig,
) -> Result<()> {
    let (m, n) = (op.dim('m')?, op.dim('n')?);
    let m_pad = pad(b, op, 'm', m, tiles.block_m);
    let n_pad = pad(b, op, 'n', n, tiles.block_n);
    let tw = tiles.block_n;
    let (mb_count, nt_count) = (m_pad / tiles.block_m, n_pad / tw);
    let tile_bytes = tiles.block_m * tw * 2;

    let inputs: Vec<(BufferId, Space)> = op
        .inputs
        .iter()
        .map(|name| b.graph_buffer(op, name))
        .collect::<Result<_>>()?;
    let (y, y_space) = b.graph_buffer(op, &op.outputs[0])?;
    let gamma = match &op.weight {
        Some(w) => Some(b.graph_buffer(op, w)?),
        None => None,
    };
    let smem_a = b.virtual_buffer(format!("{}.smem_a", op.id), BufferUse::ActStage);
    let smem_w = b.virtual_buffer(format!("{}.smem_w", op.id), BufferUse::WeightStage);
    let smem_o = b.virtual_buffer(format!("{}.smem_o", op.id), BufferUse::OutStage);
    let reg = b.virtual_buffer(format!("{}.reg", op.id), BufferUse::Register);
    let reg_r = b.virtual_buffer(format!("{}.reg_r", op.id), BufferUse::Register);
    let stat = b.virtual_buffer(format!("{}.stat", op.id), BufferUse::Register);

    let pattern = ldmatrix_pattern(tw * 2);
    let coord = |mb: u64, t: u64| TileCoord {
        m: mb as u32,
        n: t as u32,
        k: 0,
    };
    // Source interval of input `which` for tile `t`; a fused [up | gate]
    // Swiglu input addresses the gate half at column offset n_pad.
    let source = |which: usize, mb: u64, t: u64| -> BufferInterval {
        let (buf, space) = if op.kind == OperatorKind::Swiglu && inputs.len() == 1 {
            inputs[0]
        } else {
            inputs[which]
        };
        let col0 = if op.kind == OperatorKind::Swiglu && inputs.len() == 1 && which == 1 {
            n_pad
        } else {
            0
        };
        column_hull(
            buf,
            space,
            m_pad,
            mb * tiles.block_m,
            (mb + 1) * tiles.block_m,
            col0 + t * tw,
            col0 + (t + 1) * tw,
            2,
        )
    };

    let emit_tail = |b: &mut Builder<'_>, mb: u64, t: u64, src: BufferInterval| {
        let slot = mb * nt_count + t;
        let o_stage = BufferInterval::new(smem_o, slot * tile_bytes, tile_bytes, Space::SharedPage);
        b.push(MicroOp {
            id: 0,
            kind: MicroOpKind::Epilogue,
            reads: vec![src],
            writes: vec![o_stage],
            tile: coord(mb, t),
            source_operator: op_index,
            access: None,
        });
        let dst = column_hull(
            y,
            y_space,
            m_pad,
            mb * tiles.block_m,
            (mb + 1) * tiles.block_m,
            t * tw,
            (t + 1) * tw,
            2,
        );
        b.push(MicroOp {
            id: 0,
            kind: MicroOpKind::RegToGlobal,
            reads: vec![o_stage],
            writes: vec![dst],
            tile: coord(mb, t),
            source_operator: op_index,
            access: None,
        });
    };

    for mb in 0..mb_count {
        match op.kind {
            OperatorKind::RmsNorm | OperatorKind::Softmax => {
                let stat_iv = BufferInterval::new(stat, mb * 64, 64, Space::Register);
                let mut regs = Vec::new();
                for t in 0..nt_count {
                    let slot = mb * nt_count + t;
                    let a = BufferInterval::new(
                        smem_a,
                        slot * tile_bytes,
                        tile_bytes,
                        Space::SharedPage,
                    );
                    let mut reads = vec![source(0, mb, t)];
                    let mut writes = vec![a];
                    if let Some((g, g_space)) = gamma {
                        reads.push(BufferInterval::new(g, t * tw * 2, tw * 2, g_space));
                        writes.push(BufferInterval::new(
                            smem_w,
                            slot * tw * 2,
                            tw * 2,
                            Space::SharedPage,
                        ));
                    }
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::GlobalToShared,
                        reads,
                        writes: writes.clone(),
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: None,
                    });
                    let r =
                        BufferInterval::new(reg, slot * tile_bytes, tile_bytes, Space::Register);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::LoadSharedToReg,
                        reads: writes,
                        writes: vec![r],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: Some(pattern),
                    });
                    let mut reads = vec![r];
                    if t > 0 {
                        reads.push(stat_iv);
                    }
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::Reduce,
                        reads,
                        writes: vec![stat_iv],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: None,
                    });
                    regs.push(r);
                }
                for (t, r) in regs.into_iter().enumerate() {
                    let t = t as u64;
                    let slot = mb * nt_count + t;
                    let o_stage = BufferInterval::new(
                        smem_o,
                        slot * tile_bytes,
                        tile_bytes,
                        Space::SharedPage,
                    );
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::Epilogue,
                        reads: vec![r, stat_iv],
                        writes: vec![o_stage],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: None,
                    });
                    let dst = column_hull(
                        y,
                        y_space,
                        m_pad,
                        mb * tiles.block_m,
                        (mb + 1) * tiles.block_m,
                        t * tw,
                        (t + 1) * tw,
                        2,
                    );
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::RegToGlobal,
                        reads: vec![o_stage],
                        writes: vec![dst],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: None,
                    });
                }
            }
            OperatorKind::ResidualAdd => {
                let smem_b = b.virtual_buffer(format!("{}.smem_b{mb}", op.id), BufferUse::ActStage);
                for t in 0..nt_count {
                    let slot = mb * nt_count + t;
                    let a = BufferInterval::new(
                        smem_a,
                        slot * tile_bytes,
                        tile_bytes,
                        Space::SharedPage,
                    );
                    let c =
                        BufferInterval::new(smem_b, t * tile_bytes, tile_bytes, Space::SharedPage);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::GlobalToShared,
                        reads: vec![source(0, mb, t), source(1, mb, t)],
                        writes: vec![a, c],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: None,
                    });
                    let r =
                        BufferInterval::new(reg, slot * tile_bytes, tile_bytes, Space::Register);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::LoadSharedToReg,
                        reads: vec![a, c],
                        writes: vec![r],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: Some(pattern),
                    });
                    emit_tail(b, mb, t, r);
                }
            }
            OperatorKind::Swiglu => {
                // Up path for every tile first, then the gate path and the
                // gated combine, so the combine's inputs arrive in order.
                let mut up_regs = Vec::new();
                for t in 0..nt_count {
                    up_regs.push(stage_path(
                        b,
                        op,
                        op_index,
                        smem_a,
                        reg,
                        mb,
                        t,
                        nt_count,
                        tile_bytes,
                        0,
                        source(0, mb, t),
                        pattern,
                        coord(mb, t),
                    ));
                }
                for t in 0..nt_count {
                    let g = stage_path(
                        b,
                        op,
                        op_index,
                        smem_a,
                        reg,
                        mb,
                        t,
                        nt_count,
                        tile_bytes,
                        1,
                        source(1, mb, t),
                        pattern,
                        coord(mb, t),
                    );
                    let slot = mb * nt_count + t;
                    let out =
                        BufferInterval::new(reg_r, slot * tile_bytes, tile_bytes, Space::Register);
                    b.push(MicroOp {
                        id: 0,
                        kind: MicroOpKind::Reduce,
                        reads: vec![up_regs[t as usize], g],
                        writes: vec![out],
                        tile: coord(mb, t),
                        source_operator: op_index,
                        access: None,
                    });
                    emit_tail(b, mb, t, out);
                }
            }
            other => {
                return Err(Error::Unsupported {
                    operator: op.id.clone(),
                    reason: format!("{other:?} is not an element operator"),
                })
            }
        }
    }
    Ok(())
}

/// One staged input path (copy in, load to registers); returns the register tile.
#[allow(clippy::too_many_arguments)]
fn stage_path(
    b: &mut Builder<'_>,
    _op: &Operator,
    op_index: u32,
    smem: BufferId,
    reg: BufferId,
    mb: u64,
    t: u64,
    nt_count: u64,
    tile_bytes: u64,
    path: u64,
    src: BufferInterval,
    pattern: AccessPattern,
    coord: TileCoord,
) -> BufferInterval {
    let slot = (mb * 2 + path) * nt_count + t;
    let s = BufferInterval::new(smem, slot * tile_bytes, tile_bytes, Space::SharedPage);
    b.push(MicroOp {
        id: 0,
        kind: MicroOpKind::GlobalToShared,
        reads: vec![src],
        writes: vec![s],
        tile: coord,
        source_operator: op_index,
        access: None,
    });
    let r = BufferInterval::new(reg, slot * tile_bytes, tile_bytes, Space::Register);
    b.push(MicroOp {
        id: 0,
        kind: MicroOpKind::LoadSharedToReg,
        reads: vec![s],
        writes: vec![r],
        tile: coord,
        source_operator: op_index,
        access: Some(pattern),
    });
    r
}

fn lower_into(b: &mut Builder<'_>, op: &Operator, op_index: u32, tiles: &TileConfig) -> Result<()> {
    tiles.validate()?;
    if op.kind.is_gemm_like() {
        lower_gemm(b, op, op_index, tiles)
    } else {
        lower_elementwise(b, op, op_index, tiles)
    }
}

/// Lowers a single operator of `graph` (by position) on its own.
pub fn lower_operator(
    graph: &OperatorGraph,
    op_index: usize,
    tiles: &TileConfig,
    page_size: u64,
) -> Result<MicroOpTrace> {
    let op = graph
        .operators
        .get(op_index)
        .ok_or_else(|| Error::invalid("operator", format!("no operator at index {op_index}")))?;
    let mut b = Builder::new(graph, page_size);
    lower_into(&mut b, op, op_index as u32, tiles)?;
    b.trace.renumber();
    Ok(b.trace)
}

/// Lowers every operator in graph order into one densely numbered trace.
pub fn lower_graph(
    graph: &OperatorGraph,
    tiles: &TileConfig,
    page_size: u64,
) -> Result<MicroOpTrace> {
    let mut b = Builder::new(graph, page_size);
    for (i, op) in graph.operators.iter().enumerate() {
        lower_into(&mut b, op, i as u32, tiles)?;
    }
    b.trace.renumber();
    Ok(b.trace)
}
