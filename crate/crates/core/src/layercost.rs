//! Closed-form cost model of one layer on one chiplet.
//!
//! The PE array is a `rows x cols` systolic array. Under weight-stationary
//! dataflow a `rows x cols` weight tile is pinned and every input row is
//! streamed through it; under output-stationary dataflow a `rows x cols`
//! output tile is pinned and the reduction dimension is streamed. Each tile
//! pays `rows` cycles of pipeline fill; drain is not modelled.

use serde::Serialize;
use thiserror::Error;

use crate::hw::{ChipletSpec, Dataflow, EnergyModel};
use crate::modelgraph::{LayerNode, LayerOp, MhaItem};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("layer {0} has a zero dimension")]
    ZeroDim(usize),
    #[error("layer {layer} cannot fit a minimal tile in {glb_bytes} bytes of GLB")]
    Infeasible { layer: usize, glb_bytes: u64 },
    #[error("cannot split {cols} output columns across {chips} chiplets")]
    TooManyChips { cols: u64, chips: usize },
    #[error("layer {0} is not a GEMM and cannot be split spatially")]
    NotSplittable(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LayerCost {
    pub cycles: u64,
    pub t_comp: f64,
    pub e_comp: f64,
    pub macs: u64,
    pub glb_read_bytes: u64,
    pub glb_write_bytes: u64,
    pub tile_count: u64,
}

impl LayerCost {
    fn accumulate(&mut self, other: &LayerCost) {
        self.cycles += other.cycles;
        self.t_comp += other.t_comp;
        self.e_comp += other.e_comp;
        self.macs += other.macs;
        self.glb_read_bytes += other.glb_read_bytes;
        self.glb_write_bytes += other.glb_write_bytes;
        self.tile_count += other.tile_count;
    }
}

/// Array tiles and cycles of an `(m x k) . (k x n)` product.
pub fn gemm_cycles(dataflow: Dataflow, m: u64, k: u64, n: u64, rows: u64, cols: u64) -> (u64, u64) {
    match dataflow {
        Dataflow::WS => {
            let tiles = k.div_ceil(rows) * n.div_ceil(cols);
            (tiles, tiles * (m + rows))
        }
        Dataflow::OS => {
            let tiles = m.div_ceil(rows) * n.div_ceil(cols);
            (tiles, tiles * (k + rows))
        }
    }
}

/// GLB `(read, write)` element counts of a GEMM.
///
/// WS reads every weight once and every input row once per column tile;
/// partial sums are spilled and re-read between reduction tiles. OS reads
/// the input rows of an output tile once per column tile and the weights
/// once per row tile, and writes each output once.
fn gemm_glb_elements(dataflow: Dataflow, m: u64, k: u64, n: u64, rows: u64, cols: u64) -> (u64, u64) {
    match dataflow {
        Dataflow::WS => {
            let k_tiles = k.div_ceil(rows);
            let reads = k * n + m * k * n.div_ceil(cols) + m * n * (k_tiles - 1);
            (reads, m * n * k_tiles)
        }
        Dataflow::OS => {
            let reads = m * k * n.div_ceil(cols) + k * n * m.div_ceil(rows);
            (reads, m * n)
        }
    }
}

fn gemm_cost(spec: &ChipletSpec, energy: &EnergyModel, m: u64, k: u64, n: u64, bpe: u64) -> LayerCost {
    let (tiles, cycles) = gemm_cycles(spec.dataflow, m, k, n, spec.array_rows, spec.array_cols);
    let (rd, wr) = gemm_glb_elements(spec.dataflow, m, k, n, spec.array_rows, spec.array_cols);
    let macs = m * k * n;
    let (glb_read_bytes, glb_write_bytes) = (rd * bpe, wr * bpe);
    LayerCost {
        cycles,
        t_comp: cycles as f64 / spec.freq_hz,
        e_comp: macs as f64 * energy.e_mac + (glb_read_bytes + glb_write_bytes) as f64 * energy.e_glb,
        macs,
        glb_read_bytes,
        glb_write_bytes,
        tile_count: tiles,
    }
}

/// Compute latency and energy of `node` on a chiplet, ignoring buffer
/// capacity (see [`tiled_cost`]).
pub fn compute_cost(node: &LayerNode, spec: &ChipletSpec, energy: &EnergyModel) -> Result<LayerCost, CostError> {
    let bpe = node.bytes_per_element;
    match &node.op {
        &LayerOp::Gemm { m, k, n } => {
            if m == 0 || k == 0 || n == 0 {
                return Err(CostError::ZeroDim(node.layer_id));
            }
            Ok(gemm_cost(spec, energy, m, k, n, bpe))
        }
        LayerOp::MhaSplit { heads, head_dim, items } => {
            if *heads == 0 || *head_dim == 0 || items.is_empty() {
                return Err(CostError::ZeroDim(node.layer_id));
            }
            let mut total = LayerCost::default();
            for it in items {
                if it.q_rows == 0 || it.ctx_len == 0 {
                    return Err(CostError::ZeroDim(node.layer_id));
                }
                // scores = Q . K^T, then context = P . V, per head
                let scores = gemm_cost(spec, energy, it.q_rows, *head_dim, it.ctx_len, bpe);
                let context = gemm_cost(spec, energy, it.q_rows, it.ctx_len, *head_dim, bpe);
                for _ in 0..*heads {
                    total.accumulate(&scores);
                    total.accumulate(&context);
                }
            }
            Ok(total)
        }
        &LayerOp::Vector { elements } => {
            if elements == 0 {
                return Err(CostError::ZeroDim(node.layer_id));
            }
            let cycles = elements.div_ceil(spec.vector_ops_per_cycle);
            let (rd, wr) = (node.input_bytes, node.output_bytes);
            Ok(LayerCost {
                cycles,
                t_comp: cycles as f64 / spec.freq_hz,
                e_comp: elements as f64 * energy.e_vector + (rd + wr) as f64 * energy.e_glb,
                macs: 0,
                glb_read_bytes: rd,
                glb_write_bytes: wr,
                tile_count: 1,
            })
        }
    }
}

/// Double-buffered GLB footprint of a GEMM tile.
fn gemm_working_set(m: u64, k: u64, n: u64, bpe: u64) -> u64 {
    2 * bpe * (k * n + m * k + m * n)
}

/// Double-buffered GLB footprint of one attention head of one request.
fn head_working_set(q: u64, ctx: u64, head_dim: u64, bpe: u64) -> u64 {
    2 * bpe * (q * head_dim + 2 * ctx * head_dim + q * ctx)
}

fn split_half(x: u64) -> (u64, u64) {
    (x.div_ceil(2), x / 2)
}

fn tile_gemm(
    m: u64,
    k: u64,
    n: u64,
    bpe: u64,
    glb: u64,
    layer: usize,
    out: &mut Vec<(u64, u64)>,
) -> Result<(), CostError> {
    if gemm_working_set(m, k, n, bpe) <= glb {
        out.push((m, n));
        return Ok(());
    }
    if m <= 1 && n <= 1 {
        return Err(CostError::Infeasible { layer, glb_bytes: glb });
    }
    if m >= n {
        let (a, b) = split_half(m);
        tile_gemm(a, k, n, bpe, glb, layer, out)?;
        tile_gemm(b, k, n, bpe, glb, layer, out)
    } else {
        let (a, b) = split_half(n);
        tile_gemm(m, k, a, bpe, glb, layer, out)?;
        tile_gemm(m, k, b, bpe, glb, layer, out)
    }
}

fn tile_head(
    it: MhaItem,
    head_dim: u64,
    bpe: u64,
    glb: u64,
    layer: usize,
    out: &mut Vec<MhaItem>,
) -> Result<(), CostError> {
    if head_working_set(it.q_rows, it.ctx_len, head_dim, bpe) <= glb {
        out.push(it);
        return Ok(());
    }
    if it.q_rows <= 1 && it.ctx_len <= 1 {
        return Err(CostError::Infeasible { layer, glb_bytes: glb });
    }
    let (a, b) = if it.q_rows >= it.ctx_len {
        let (a, b) = split_half(it.q_rows);
        (MhaItem { q_rows: a, ..it }, MhaItem { q_rows: b, ..it })
    } else {
        let (a, b) = split_half(it.ctx_len);
        (MhaItem { ctx_len: a, ..it }, MhaItem { ctx_len: b, ..it })
    };
    tile_head(a, head_dim, bpe, glb, layer, out)?;
    tile_head(b, head_dim, bpe, glb, layer, out)
}

/// Splits a layer whose double-buffered working set exceeds `glb_bytes` by
/// halving its larger free dimension until every piece fits.
///
/// GEMMs halve the larger of `m`/`n`; attention halves the larger of the
/// query rows / context of the offending request. Vector layers stream and
/// are returned whole.
pub fn temporal_tile(node: &LayerNode, glb_bytes: u64) -> Result<Vec<LayerNode>, CostError> {
    let bpe = node.bytes_per_element;
    match &node.op {
        &LayerOp::Gemm { m, k, n } => {
            if m == 0 || k == 0 || n == 0 {
                return Err(CostError::ZeroDim(node.layer_id));
            }
            let mut pieces = Vec::new();
            tile_gemm(m, k, n, bpe, glb_bytes, node.layer_id, &mut pieces)?;
            if pieces.len() == 1 {
                return Ok(vec![node.clone()]);
            }
            Ok(pieces
                .into_iter()
                .map(|(pm, pn)| LayerNode::gemm(node.layer_id, pm, k, pn, bpe))
                .collect())
        }
        LayerOp::MhaSplit { heads, head_dim, items } => {
            let fits = items
                .iter()
                .all(|it| head_working_set(it.q_rows, it.ctx_len, *head_dim, bpe) <= glb_bytes);
            if fits {
                return Ok(vec![node.clone()]);
            }
            let mut pieces = Vec::new();
            for &it in items {
                tile_head(it, *head_dim, bpe, glb_bytes, node.layer_id, &mut pieces)?;
            }
            Ok(pieces
                .into_iter()
                .map(|it| {
                    let mut sub = node.clone();
                    sub.op = LayerOp::MhaSplit {
                        heads: *heads,
                        head_dim: *head_dim,
                        items: vec![it],
                    };
                    sub.kv.clear();
                    sub
                })
                .collect())
        }
        LayerOp::Vector { .. } => Ok(vec![node.clone()]),
    }
}

/// [`compute_cost`] summed over the temporal tiles that fit the chiplet's GLB.
pub fn tiled_cost(node: &LayerNode, spec: &ChipletSpec, energy: &EnergyModel) -> Result<LayerCost, CostError> {
    let mut total = LayerCost::default();
    for tile in temporal_tile(node, spec.glb_bytes)? {
        total.accumulate(&compute_cost(&tile, spec, energy)?);
    }
    Ok(total)
}

/// Splits a GEMM's output columns across `chips`, remainder to the first
/// parts. Each part's `output_bytes` is what it ships to the gathering
/// successor.
pub fn spatial_split(node: &LayerNode, chips: &[usize]) -> Result<Vec<(usize, LayerNode)>, CostError> {
    let LayerOp::Gemm { m, k, n } = node.op else {
        return Err(CostError::NotSplittable(node.layer_id));
    };
    if chips.is_empty() || (chips.len() as u64) > n {
        return Err(CostError::TooManyChips {
            cols: n,
            chips: chips.len(),
        });
    }
    if chips.len() == 1 {
        return Ok(vec![(chips[0], node.clone())]);
    }
    let parts = chips.len() as u64;
    let (base, extra) = (n / parts, n % parts);
    Ok(chips
        .iter()
        .enumerate()
        .map(|(i, &chip)| {
            let cols = base + u64::from((i as u64) < extra);
            let mut sub = LayerNode::gemm(node.layer_id, m, k, cols, node.bytes_per_element);
            sub.name = format!("{}[{i}]", node.name);
            (chip, sub)
        })
        .collect())
}
