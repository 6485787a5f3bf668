//! Layer DAGs instantiated against concrete batches.
//!
//! Transformer blocks follow the merge-split-merge execution of batched LLM
//! serving: the dense projections run on one matrix holding every token of
//! the batch, attention is split back into per-request kernels, and the
//! results are merged again for the FFN. The FFN is partitioned into
//! `tp` tensor-parallel slices that become sibling layers.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{IterationBatch, WorkItem};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("tensor-parallel degree {tp} does not divide FFN width {ffn}")]
    BadTpDegree { tp: u64, ffn: u64 },
    #[error("batch has no work items")]
    EmptyBatch,
    #[error("toy model needs at least one GEMM and positive dims")]
    BadToy,
    #[error("instance range {start}..{end} out of bounds for {count} instances")]
    BadRange { start: usize, end: usize, count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmArch {
    pub name: String,
    pub num_blocks: u64,
    pub hidden: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    /// FFN inner width as a multiple of `hidden`.
    pub ffn_mult: u64,
    #[serde(default = "default_bpe")]
    pub bytes_per_element: u64,
}

fn default_bpe() -> u64 {
    2
}

impl LlmArch {
    pub fn gpt3_6_7b() -> Self {
        Self {
            name: "gpt3-6.7b".into(),
            num_blocks: 32,
            hidden: 4096,
            num_heads: 32,
            head_dim: 128,
            ffn_mult: 4,
            bytes_per_element: 2,
        }
    }

    pub fn gpt3_13b() -> Self {
        Self {
            name: "gpt3-13b".into(),
            num_blocks: 40,
            hidden: 5120,
            num_heads: 40,
            head_dim: 128,
            ffn_mult: 4,
            bytes_per_element: 2,
        }
    }

    /// Reduced GPT-style model for quick experiments.
    pub fn gpt_desk(num_blocks: u64, hidden: u64) -> Self {
        let head_dim = 64.min(hidden);
        Self {
            name: format!("gpt-desk-{num_blocks}x{hidden}"),
            num_blocks,
            hidden,
            num_heads: hidden / head_dim,
            head_dim,
            ffn_mult: 4,
            bytes_per_element: 2,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "gpt3-6.7b" => Some(Self::gpt3_6_7b()),
            "gpt3-13b" => Some(Self::gpt3_13b()),
            _ => None,
        }
    }

    pub fn ffn_width(&self) -> u64 {
        self.ffn_mult * self.hidden
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let dims = [
            self.num_blocks,
            self.hidden,
            self.num_heads,
            self.head_dim,
            self.ffn_mult,
            self.bytes_per_element,
        ];
        if dims.contains(&0) {
            return Err(GraphError::InvalidArch("all dimensions must be positive".into()));
        }
        if self.num_heads * self.head_dim != self.hidden {
            return Err(GraphError::InvalidArch(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.num_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Layers per transformer block for a given tensor-parallel degree.
    pub fn layers_per_block(tp: u64) -> usize {
        8 + 2 * tp as usize
    }
}

/// One request's attention kernel inside an [`LayerOp::MhaSplit`] layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaItem {
    pub request_id: u64,
    pub q_rows: u64,
    pub ctx_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerOp {
    /// `(m x k) . (k x n)`.
    Gemm { m: u64, k: u64, n: u64 },
    /// Per-request attention, executed kernel after kernel.
    MhaSplit {
        heads: u64,
        head_dim: u64,
        items: Vec<MhaItem>,
    },
    /// Element-wise work on the vector unit.
    Vector { elements: u64 },
}

/// KV-cache traffic of one request at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvAccess {
    pub request_id: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub layer_id: usize,
    pub name: String,
    pub op: LayerOp,
    pub bytes_per_element: u64,
    pub weight_bytes: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    /// Part of `input_bytes` that comes from outside the graph (model input,
    /// block-0 residual) and is always read from DRAM.
    pub external_input_bytes: u64,
    pub kv: Vec<KvAccess>,
    pub mandatory_writeout: bool,
    pub dram_in_id: Option<usize>,
    pub dram_out_id: Option<usize>,
}

impl LayerNode {
    fn new(layer_id: usize, name: String, op: LayerOp, bpe: u64) -> Self {
        Self {
            layer_id,
            name,
            op,
            bytes_per_element: bpe,
            weight_bytes: 0,
            input_bytes: 0,
            output_bytes: 0,
            external_input_bytes: 0,
            kv: Vec::new(),
            mandatory_writeout: false,
            dram_in_id: None,
            dram_out_id: None,
        }
    }

    /// A GEMM node with byte counts derived from its dims.
    pub fn gemm(layer_id: usize, m: u64, k: u64, n: u64, bpe: u64) -> Self {
        let mut node = Self::new(layer_id, format!("gemm{layer_id}"), LayerOp::Gemm { m, k, n }, bpe);
        node.weight_bytes = k * n * bpe;
        node.input_bytes = m * k * bpe;
        node.output_bytes = m * n * bpe;
        node
    }

    pub fn vector(layer_id: usize, elements: u64, bpe: u64) -> Self {
        let mut node = Self::new(layer_id, format!("vec{layer_id}"), LayerOp::Vector { elements }, bpe);
        node.input_bytes = elements * bpe;
        node.output_bytes = elements * bpe;
        node
    }

    pub fn macs(&self) -> u64 {
        match &self.op {
            LayerOp::Gemm { m, k, n } => m * k * n,
            LayerOp::MhaSplit { heads, head_dim, items } => items
                .iter()
                .map(|it| 2 * it.q_rows * it.ctx_len * heads * head_dim)
                .sum(),
            LayerOp::Vector { .. } => 0,
        }
    }

    pub fn kv_read_bytes(&self) -> u64 {
        self.kv.iter().map(|a| a.read_bytes).sum()
    }

    pub fn kv_write_bytes(&self) -> u64 {
        self.kv.iter().map(|a| a.write_bytes).sum()
    }

    pub fn is_gemm(&self) -> bool {
        matches!(self.op, LayerOp::Gemm { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub nodes: Vec<LayerNode>,
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
    pub total_tokens: u64,
}

impl ModelGraph {
    fn from_parts(nodes: Vec<LayerNode>, edges: &[(usize, usize)], total_tokens: u64) -> Self {
        let mut preds = vec![Vec::new(); nodes.len()];
        let mut succs = vec![Vec::new(); nodes.len()];
        for &(p, c) in edges {
            debug_assert!(p < c, "edges follow topological ids");
            preds[c].push(p);
            succs[p].push(c);
        }
        Self {
            nodes,
            preds,
            succs,
            total_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_sink(&self, layer: usize) -> bool {
        self.succs[layer].is_empty()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(LayerNode::macs).sum()
    }

    /// Same node count and edge lists.
    pub fn same_topology(&self, other: &ModelGraph) -> bool {
        self.preds == other.preds
    }
}

/// Something that can produce the layer graph of any contiguous slice of
/// its instances. Micro-batches are such slices.
pub trait GraphSource: Sync {
    fn instance_count(&self) -> usize;
    fn layer_count(&self) -> usize;
    fn graph_for(&self, instances: Range<usize>) -> Result<ModelGraph, GraphError>;

    fn graph(&self) -> Result<ModelGraph, GraphError> {
        self.graph_for(0..self.instance_count())
    }
}

fn check_range(r: &Range<usize>, count: usize) -> Result<(), GraphError> {
    if r.start >= r.end || r.end > count {
        return Err(GraphError::BadRange {
            start: r.start,
            end: r.end,
            count,
        });
    }
    Ok(())
}

/// Builds the transformer layer DAG for `items`.
pub fn instantiate_items(arch: &LlmArch, items: &[WorkItem], tp: u64) -> Result<ModelGraph, GraphError> {
    arch.validate()?;
    let ffn = arch.ffn_width();
    if tp == 0 || !ffn.is_multiple_of(tp) {
        return Err(GraphError::BadTpDegree { tp, ffn });
    }
    if items.is_empty() {
        return Err(GraphError::EmptyBatch);
    }
    let bpe = arch.bytes_per_element;
    let h = arch.hidden;
    let t: u64 = items.iter().map(|i| i.new_tokens).sum();
    let part = ffn / tp;

    let per_block = LlmArch::layers_per_block(tp);
    let mut nodes = Vec::with_capacity(per_block * arch.num_blocks as usize);
    let mut edges = Vec::new();
    let mut prev_out: Option<usize> = None;

    for b in 0..arch.num_blocks {
        let mut push = |mut node: LayerNode, name: &str| -> usize {
            let id = nodes.len();
            node.layer_id = id;
            node.name = format!("b{b}.{name}");
            nodes.push(node);
            id
        };

        let mut norm1 = LayerNode::vector(0, t * h, bpe);
        if prev_out.is_none() {
            norm1.external_input_bytes = norm1.input_bytes;
        }
        let norm1 = push(norm1, "norm1");

        let mut qkv = LayerNode::gemm(0, t, h, 3 * h, bpe);
        qkv.mandatory_writeout = true;
        qkv.kv = items
            .iter()
            .map(|it| KvAccess {
                request_id: it.request_id,
                read_bytes: 0,
                write_bytes: 2 * it.new_tokens * h * bpe,
            })
            .collect();
        let qkv = push(qkv, "qkv");

        let mha_items: Vec<MhaItem> = items
            .iter()
            .map(|it| MhaItem {
                request_id: it.request_id,
                q_rows: it.new_tokens,
                ctx_len: it.context_len + it.new_tokens,
            })
            .collect();
        let mut mha = LayerNode::new(
            0,
            String::new(),
            LayerOp::MhaSplit {
                heads: arch.num_heads,
                head_dim: arch.head_dim,
                items: mha_items.clone(),
            },
            bpe,
        );
        mha.input_bytes = t * 3 * h * bpe;
        mha.output_bytes = t * h * bpe;
        mha.kv = mha_items
            .iter()
            .map(|it| KvAccess {
                request_id: it.request_id,
                read_bytes: 2 * it.ctx_len * h * bpe,
                write_bytes: 0,
            })
            .collect();
        let mha = push(mha, "mha");

        let proj = push(LayerNode::gemm(0, t, h, h, bpe), "proj");

        let mut res1 = LayerNode::vector(0, t * h, bpe);
        res1.input_bytes = 2 * t * h * bpe;
        if prev_out.is_none() {
            res1.external_input_bytes = t * h * bpe;
        }
        let res1 = push(res1, "res1");
        let norm2 = push(LayerNode::vector(0, t * h, bpe), "norm2");

        let mut downs = Vec::with_capacity(tp as usize);
        for p in 0..tp {
            let up = push(LayerNode::gemm(0, t, h, part, bpe), &format!("up{p}"));
            let down = push(LayerNode::gemm(0, t, part, h, bpe), &format!("down{p}"));
            edges.push((norm2, up));
            edges.push((up, down));
            downs.push(down);
        }

        let mut merge = LayerNode::vector(0, tp * t * h, bpe);
        merge.output_bytes = t * h * bpe;
        let merge = push(merge, "merge");
        let mut res2 = LayerNode::vector(0, t * h, bpe);
        res2.input_bytes = 2 * t * h * bpe;
        let res2 = push(res2, "res2");

        if let Some(prev) = prev_out {
            edges.push((prev, norm1));
            edges.push((prev, res1));
        }
        edges.extend([(norm1, qkv), (qkv, mha), (mha, proj), (proj, res1), (res1, norm2)]);
        edges.extend(downs.iter().map(|&d| (d, merge)));
        edges.extend([(merge, res2), (res1, res2)]);
        prev_out = Some(res2);
    }

    let mut edges_sorted = edges;
    edges_sorted.sort_unstable_by_key(|&(p, c)| (c, p));
    Ok(ModelGraph::from_parts(nodes, &edges_sorted, t))
}

pub fn instantiate(arch: &LlmArch, batch: &IterationBatch, tp: u64) -> Result<ModelGraph, GraphError> {
    instantiate_items(arch, &batch.items, tp)
}

/// An LLM architecture applied to one iteration batch.
#[derive(Debug, Clone)]
pub struct LlmBatch {
    pub arch: LlmArch,
    pub batch: IterationBatch,
    pub tp: u64,
}

impl GraphSource for LlmBatch {
    fn instance_count(&self) -> usize {
        self.batch.items.len()
    }

    fn layer_count(&self) -> usize {
        LlmArch::layers_per_block(self.tp) * self.arch.num_blocks as usize
    }

    fn graph_for(&self, instances: Range<usize>) -> Result<ModelGraph, GraphError> {
        check_range(&instances, self.instance_count())?;
        instantiate_items(&self.arch, &self.batch.items[instances], self.tp)
    }
}

/// A chain of GEMMs over a batch of instances with per-instance row counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModel {
    /// `(k, n)` of each GEMM; consecutive layers should chain `n -> k`.
    pub layers: Vec<(u64, u64)>,
    /// Rows each instance contributes to every GEMM.
    pub instance_rows: Vec<u64>,
    #[serde(default = "default_bpe")]
    pub bytes_per_element: u64,
}

impl ToyModel {
    pub fn new(layers: Vec<(u64, u64)>, instance_rows: Vec<u64>) -> Result<Self, GraphError> {
        let toy = Self {
            layers,
            instance_rows,
            bytes_per_element: 2,
        };
        toy.validate()?;
        Ok(toy)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let dims_ok = self.layers.iter().all(|&(k, n)| k > 0 && n > 0);
        if self.layers.is_empty()
            || self.instance_rows.is_empty()
            || !dims_ok
            || self.instance_rows.contains(&0)
            || self.bytes_per_element == 0
        {
            return Err(GraphError::BadToy);
        }
        Ok(())
    }
}

/// `num_gemms` square `width x width` GEMMs chained over instances with the
/// given row counts.
pub fn toy_model(num_gemms: usize, instance_rows: &[u64], width: u64) -> Result<ToyModel, GraphError> {
    ToyModel::new(vec![(width, width); num_gemms], instance_rows.to_vec())
}

impl GraphSource for ToyModel {
    fn instance_count(&self) -> usize {
        self.instance_rows.len()
    }

    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn graph_for(&self, instances: Range<usize>) -> Result<ModelGraph, GraphError> {
        self.validate()?;
        check_range(&instances, self.instance_count())?;
        let m: u64 = self.instance_rows[instances].iter().sum();
        let nodes: Vec<LayerNode> = self
            .layers
            .iter()
            .enumerate()
            .map(|(id, &(k, n))| {
                let mut node = LayerNode::gemm(id, m, k, n, self.bytes_per_element);
                if id == 0 {
                    node.external_input_bytes = node.input_bytes;
                }
                node
            })
            .collect();
        let edges: Vec<(usize, usize)> = (1..nodes.len()).map(|i| (i - 1, i)).collect();
        Ok(ModelGraph::from_parts(nodes, &edges, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Strategy, WorkKind};

    fn decode(id: u64, ctx: u64) -> WorkItem {
        WorkItem {
            request_id: id,
            kind: WorkKind::DecodeStep,
            new_tokens: 1,
            context_len: ctx,
            prompt_len: 1,
        }
    }

    fn prefill(id: u64, len: u64) -> WorkItem {
        WorkItem {
            request_id: id,
            kind: WorkKind::FullPrefill,
            new_tokens: len,
            context_len: 0,
            prompt_len: len,
        }
    }

    fn tiny_arch() -> LlmArch {
        LlmArch {
            name: "tiny".into(),
            num_blocks: 1,
            hidden: 4,
            num_heads: 1,
            head_dim: 4,
            ffn_mult: 4,
            bytes_per_element: 2,
        }
    }

    #[test]
    fn single_decode_token_dims() {
        let g = instantiate_items(&tiny_arch(), &[decode(0, 3)], 1).unwrap();
        assert_eq!(g.nodes[1].op, LayerOp::Gemm { m: 1, k: 4, n: 12 });
        match &g.nodes[2].op {
            LayerOp::MhaSplit { items, .. } => {
                let pairs: Vec<_> = items.iter().map(|i| (i.q_rows, i.ctx_len)).collect();
                assert_eq!(pairs, vec![(1, 4)]);
            }
            other => panic!("expected MhaSplit, got {other:?}"),
        }
        assert_eq!(g.len(), 10);
    }

    #[test]
    fn gpt3_tp8_partitions() {
        let arch = LlmArch::gpt3_6_7b();
        let g = instantiate_items(&arch, &[decode(0, 10)], 8).unwrap();
        assert_eq!(g.len(), 32 * (8 + 16));
        let ups: Vec<_> = g.nodes.iter().filter(|n| n.name.starts_with("b0.up")).collect();
        assert_eq!(ups.len(), 8);
        for u in ups {
            assert_eq!(u.op, LayerOp::Gemm { m: 1, k: 4096, n: 2048 });
            assert_eq!(u.weight_bytes, 4096 * 2048 * 2);
        }
    }

    #[test]
    fn merged_rows_count_every_token() {
        let arch = LlmArch::gpt_desk(2, 256);
        let g = instantiate_items(&arch, &[prefill(0, 78), decode(1, 5), decode(2, 9)], 2).unwrap();
        assert_eq!(g.total_tokens, 80);
        assert_eq!(g.nodes[1].op, LayerOp::Gemm { m: 80, k: 256, n: 768 });
    }

    #[test]
    fn tp_must_divide_ffn() {
        let e = instantiate_items(&tiny_arch(), &[decode(0, 1)], 3).unwrap_err();
        assert_eq!(e, GraphError::BadTpDegree { tp: 3, ffn: 16 });
        assert_eq!(
            instantiate_items(&tiny_arch(), &[], 1).unwrap_err(),
            GraphError::EmptyBatch
        );
    }

    #[test]
    fn dag_shape() {
        let arch = LlmArch::gpt_desk(3, 128);
        let g = instantiate_items(&arch, &[prefill(0, 7), decode(1, 2)], 4).unwrap();
        assert!(g.preds[0].is_empty());
        let sinks: Vec<_> = (0..g.len()).filter(|&l| g.is_sink(l)).collect();
        assert_eq!(sinks, vec![g.len() - 1]);
        for (c, ps) in g.preds.iter().enumerate() {
            assert!(ps.iter().all(|&p| p < c));
            for &p in ps {
                assert!(g.succs[p].contains(&c));
            }
        }
        for l in 1..g.len() {
            assert!(!g.preds[l].is_empty(), "layer {l} unreachable");
        }
    }

    #[test]
    fn merge_split_merge_around_attention() {
        let arch = LlmArch::gpt_desk(2, 128);
        let items = [prefill(0, 12), decode(1, 40), decode(2, 3)];
        let g = instantiate_items(&arch, &items, 2).unwrap();
        for (l, node) in g.nodes.iter().enumerate() {
            if let LayerOp::MhaSplit { items: its, .. } = &node.op {
                assert_eq!(its.len(), items.len());
                assert_eq!(its.iter().map(|i| i.q_rows).sum::<u64>(), g.total_tokens);
                for nb in [l - 1, l + 1] {
                    match g.nodes[nb].op {
                        LayerOp::Gemm { m, .. } => assert_eq!(m, g.total_tokens),
                        _ => panic!("attention neighbours must be merged GEMMs"),
                    }
                }
            }
        }
    }

    #[test]
    fn kv_traffic() {
        let arch = tiny_arch();
        let g = instantiate_items(&arch, &[decode(0, 3), prefill(1, 5)], 1).unwrap();
        assert_eq!(g.nodes[1].kv_write_bytes(), 2 * 6 * 4 * 2);
        assert!(g.nodes[1].mandatory_writeout);
        assert_eq!(g.nodes[2].kv_read_bytes(), 2 * (4 + 5) * 4 * 2);
        assert_eq!(g.nodes[2].weight_bytes, 0);
    }

    #[test]
    fn toy_models() {
        let toy = toy_model(4, &[3, 1, 4, 1, 5, 9, 2, 6], 16).unwrap();
        let g = toy.graph().unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.preds, vec![vec![], vec![0], vec![1], vec![2]]);

        let one = toy_model(1, &[2], 8).unwrap().graph().unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.preds[0].is_empty() && one.succs[0].is_empty());

        let two = toy_model(2, &[3, 5], 8).unwrap().graph().unwrap();
        for n in &two.nodes {
            assert!(matches!(n.op, LayerOp::Gemm { m: 8, .. }));
        }
        assert!(toy_model(0, &[1], 8).is_err());
        assert!(toy.graph_for(3..9).is_err());
        assert_eq!(toy.graph_for(2..4).unwrap().total_tokens, 5);
    }

    #[test]
    fn llm_batch_slices() {
        let batch = IterationBatch {
            items: vec![prefill(0, 6), decode(1, 4), decode(2, 8), decode(3, 1)],
            strategy: Strategy::Orca,
        };
        let src = LlmBatch {
            arch: LlmArch::gpt_desk(1, 64),
            batch,
            tp: 2,
        };
        let whole = src.graph().unwrap();
        let part = src.graph_for(1..3).unwrap();
        assert_eq!(whole.len(), src.layer_count());
        assert!(whole.same_topology(&part));
        assert_eq!(part.total_tokens, 2);
    }
}
