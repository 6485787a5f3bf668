//! Mapping evaluation: data-access analysis, timeline simulation and the
//! latency / energy / EDP roll-up.
//!
//! A layer's processing time is the slowest of its compute, DRAM and NoP
//! components (transfers are double-buffered against compute). It starts
//! once its predecessors in the same micro-batch have finished and the
//! chiplet it is mapped to has finished the previously scheduled cell.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hw::{AcceleratorConfig, HwError};
use crate::layercost::{tiled_cost, CostError, LayerCost};
use crate::mapping::{schedule_order, validate, MappingEncoding, ScheduledCell, Violation};
use crate::modelgraph::{GraphError, GraphSource, LayerNode, ModelGraph};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid mapping: {0:?}")]
    Mapping(Vec<Violation>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error("schedule does not match graph: {0}")]
    OrderMismatch(String),
    #[error("batches disagree on layer count ({0} vs {1})")]
    LayerMismatch(usize, usize),
    #[error("batch of {count} instances does not fit {slots} slots with micro-batch size {mb}")]
    Slots { count: usize, slots: usize, mb: usize },
    #[error("no batches to evaluate")]
    NoBatches,
}

/// Where a consumer finds one predecessor's activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActSource {
    /// Still in the consumer chiplet's own buffer.
    Local,
    /// Held by another chiplet and shipped over the NoP.
    Nop { from: usize },
    /// Spilled to DRAM.
    Dram,
}

/// Per-cell outcome of the data-access scan, indexed `[row][layer]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessFlags {
    /// The chiplet already holds this layer's weights from another micro-batch.
    pub weights_resident: Vec<Vec<bool>>,
    pub write_out: Vec<Vec<bool>>,
    /// `(pred, source)` for every predecessor of the cell.
    pub act_source: Vec<Vec<Vec<(usize, ActSource)>>>,
    /// Predecessors never found on-chip (served from DRAM).
    pub layers_prev: Vec<Vec<Vec<usize>>>,
    /// Successors that did not find the layer on-chip.
    pub layers_next: Vec<Vec<Vec<usize>>>,
}

/// Determines weight residency, write-out and activation sources by
/// replaying `order` against a one-slot-per-chiplet state table.
///
/// Each chiplet remembers the last (micro-batch, layer) cell it ran. When a
/// cell is scheduled, any chiplet still holding a predecessor from the same
/// micro-batch serves it on-chip and the pair is struck from both
/// predecessor and successor sets; a layer whose successor set empties
/// while it is still held never needs to be written back. A cell that
/// follows the same layer of another micro-batch on the same chiplet reuses
/// its weights. Sinks and layers with a mandatory write-out are always
/// written back.
///
/// Only chiplets holding the current micro-batch (plus the target chiplet,
/// for the weight check) can satisfy either condition, so those are the only
/// ones visited.
pub fn data_access_flags(
    order: &[ScheduledCell],
    graph: &ModelGraph,
    rows: usize,
    chips: usize,
) -> Result<AccessFlags, EvalError> {
    let m = graph.len();
    let mut weights_resident = vec![vec![false; m]; rows];
    let mut write_out = vec![vec![true; m]; rows];
    let mut act_source: Vec<Vec<Vec<(usize, ActSource)>>> = vec![vec![Vec::new(); m]; rows];
    let mut layers_prev: Vec<Vec<Vec<usize>>> = vec![graph.preds.clone(); rows];
    let mut layers_next: Vec<Vec<Vec<usize>>> = vec![graph.succs.clone(); rows];

    let mut seen = vec![vec![false; m]; rows];
    let mut chip_state: Vec<Option<(usize, usize)>> = vec![None; chips];
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); rows];

    for cell in order {
        let (j, cur, chip) = (cell.row, cell.layer, cell.chip);
        if j >= rows || cur >= m || chip >= chips {
            return Err(EvalError::OrderMismatch(format!("cell {cell:?} out of range")));
        }
        if seen[j][cur] {
            return Err(EvalError::OrderMismatch(format!("cell ({j}, {cur}) scheduled twice")));
        }
        if let Some(&p) = graph.preds[cur].iter().find(|&&p| !seen[j][p]) {
            return Err(EvalError::OrderMismatch(format!(
                "cell ({j}, {cur}) scheduled before its predecessor {p}"
            )));
        }
        seen[j][cur] = true;

        if let Some((pm, pl)) = chip_state[chip] {
            if pl == cur && pm != j {
                weights_resident[j][cur] = true;
            }
        }
        let mut found: Vec<(usize, ActSource)> = Vec::new();
        for &c in &holders[j] {
            let (_, pl) = chip_state[c].expect("holder has state");
            let next = &mut layers_next[j][pl];
            next.retain(|&s| s != cur);
            if next.is_empty() {
                write_out[j][pl] = false;
            }
            let prev = &mut layers_prev[j][cur];
            if let Some(pos) = prev.iter().position(|&p| p == pl) {
                prev.remove(pos);
                let src = if c == chip {
                    ActSource::Local
                } else {
                    ActSource::Nop { from: c }
                };
                found.push((pl, src));
            }
        }
        let sources = graph.preds[cur]
            .iter()
            .map(|&p| {
                found
                    .iter()
                    .find(|(q, _)| *q == p)
                    .copied()
                    .unwrap_or((p, ActSource::Dram))
            })
            .collect();
        act_source[j][cur] = sources;

        if let Some((old_row, _)) = chip_state[chip] {
            holders[old_row].retain(|&c| c != chip);
        }
        chip_state[chip] = Some((j, cur));
        holders[j].push(chip);
    }

    for row in write_out.iter_mut() {
        for (l, flag) in row.iter_mut().enumerate() {
            if graph.is_sink(l) || graph.nodes[l].mandatory_writeout {
                *flag = true;
            }
        }
    }

    Ok(AccessFlags {
        weights_resident,
        write_out,
        act_source,
        layers_prev,
        layers_next,
    })
}

/// Latency and energy components of one scheduled cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LayerTimes {
    pub t_comp: f64,
    pub t_dram: f64,
    pub t_nop: f64,
    pub e_comp: f64,
    pub e_dram: f64,
    pub e_nop: f64,
    pub dram_bytes: u64,
    /// DRAM bytes moving inter-layer activations (spilled outputs of
    /// non-sink layers and their re-reads).
    pub act_dram_bytes: u64,
    pub nop_bytes: u64,
    pub nop_byte_hops: u64,
    pub weight_load: bool,
}

impl LayerTimes {
    pub fn t_proc(&self) -> f64 {
        self.t_comp.max(self.t_dram).max(self.t_nop)
    }

    pub fn e_proc(&self) -> f64 {
        self.e_comp + self.e_dram + self.e_nop
    }
}

fn die_of(id: Option<usize>, layer: usize, dies: usize) -> usize {
    id.unwrap_or(layer % dies)
}

/// Combines the compute cost of a cell with its DRAM and NoP traffic.
///
/// `comp` is the (temporally tiled) compute cost on the assigned chiplet;
/// `dram_scratch` must hold one counter per DRAM die.
#[allow(clippy::too_many_arguments)]
pub fn layer_times(
    graph: &ModelGraph,
    layer: usize,
    chip: usize,
    weights_resident: bool,
    write_out: bool,
    sources: &[(usize, ActSource)],
    comp: &LayerCost,
    cfg: &AcceleratorConfig,
    dram_scratch: &mut [u64],
) -> Result<LayerTimes, EvalError> {
    let node: &LayerNode = &graph.nodes[layer];
    let dies = cfg.dram_dies;
    dram_scratch.iter_mut().for_each(|b| *b = 0);
    let in_die = die_of(node.dram_in_id, layer, dies);
    let out_die = die_of(node.dram_out_id, layer, dies);
    let mut act_dram = 0;

    let weight_load = !weights_resident && node.weight_bytes > 0;
    if weight_load {
        dram_scratch[in_die] += node.weight_bytes;
    }
    dram_scratch[in_die] += node.external_input_bytes;

    let mut nop_bytes = 0u64;
    let mut nop_byte_hops = 0u64;
    let mut max_hops = 0u32;
    for &(pred, src) in sources {
        let p = &graph.nodes[pred];
        match src {
            ActSource::Local => {}
            ActSource::Dram => {
                dram_scratch[die_of(p.dram_out_id, pred, dies)] += p.output_bytes;
                act_dram += p.output_bytes;
            }
            ActSource::Nop { from } => {
                let hops = cfg.hop_count(from, chip)?;
                nop_bytes += p.output_bytes;
                nop_byte_hops += p.output_bytes * u64::from(hops);
                max_hops = max_hops.max(hops);
            }
        }
    }
    if write_out {
        dram_scratch[out_die] += node.output_bytes;
        if !graph.is_sink(layer) {
            act_dram += node.output_bytes;
        }
    }
    for kv in &node.kv {
        dram_scratch[(kv.request_id % dies as u64) as usize] += kv.read_bytes + kv.write_bytes;
    }

    let freq = cfg.chiplets[chip].freq_hz;
    let hop_time = cfg.nop_hop_latency as f64 / freq;
    let e = &cfg.energy;

    let mut dram_bytes = 0u64;
    let mut t_dram_xfer = 0f64;
    let mut dram_hops = 0u32;
    let mut e_dram = 0f64;
    for (die, &bytes) in dram_scratch.iter().enumerate() {
        if bytes == 0 {
            continue;
        }
        let route = cfg.dram_route(chip, die)?;
        dram_bytes += bytes;
        t_dram_xfer = t_dram_xfer.max(bytes as f64 / cfg.dram_bw_per_die);
        dram_hops = dram_hops.max(route.hops);
        e_dram += bytes as f64 * (e.e_dram + f64::from(route.hops) * e.e_nop_hop);
    }
    let t_dram = if dram_bytes > 0 {
        t_dram_xfer + f64::from(dram_hops) * hop_time
    } else {
        0.0
    };
    let t_nop = if nop_bytes > 0 {
        nop_bytes as f64 / cfg.nop_link_bw + f64::from(max_hops) * hop_time
    } else {
        0.0
    };

    Ok(LayerTimes {
        t_comp: comp.t_comp,
        t_dram,
        t_nop,
        e_comp: comp.e_comp,
        e_dram,
        e_nop: nop_byte_hops as f64 * e.e_nop_hop,
        dram_bytes,
        act_dram_bytes: act_dram,
        nop_bytes,
        nop_byte_hops,
        weight_load,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub chiplet_id: usize,
    pub row: usize,
    pub layer_id: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub t_comp: f64,
    pub t_dram: f64,
    pub t_nop: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub dram_bytes: u64,
    pub act_dram_bytes: u64,
    pub nop_byte_hops: u64,
    pub weight_reload_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub latency: f64,
    pub energy: f64,
    pub edp: f64,
    pub timeline: Vec<TimelineEntry>,
    pub traffic: Traffic,
}

/// Mean metrics over a set of batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub latency: f64,
    pub energy: f64,
    pub edp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub mean: Metrics,
    pub per_batch: Vec<Metrics>,
}

/// One batch cut into micro-batch rows, with compute costs precomputed for
/// every (row, layer, chiplet class).
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    rows: Vec<Option<ModelGraph>>,
    topology: ModelGraph,
    comp: Vec<Vec<Vec<LayerCost>>>,
}

impl PreparedBatch {
    pub fn layers(&self) -> usize {
        self.topology.len()
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_graph(&self, row: usize) -> Option<&ModelGraph> {
        self.rows[row].as_ref()
    }
}

/// Evaluates mappings of a fixed micro-batch size over a set of batches on
/// one accelerator.
///
/// Batches may hold fewer instances than `slots`; instance `i` occupies row
/// `i / mb` and rows without instances are skipped.
#[derive(Debug, Clone)]
pub struct Evaluator {
    cfg: AcceleratorConfig,
    class_of_chip: Vec<usize>,
    slots: usize,
    mb: usize,
    batches: Vec<PreparedBatch>,
}

impl Evaluator {
    pub fn new(
        sources: &[&dyn GraphSource],
        slots: usize,
        mb: usize,
        cfg: &AcceleratorConfig,
    ) -> Result<Self, EvalError> {
        cfg.validate()?;
        if sources.is_empty() {
            return Err(EvalError::NoBatches);
        }
        let (classes, class_of_chip) = cfg.spec_classes();
        let mut batches = Vec::with_capacity(sources.len());
        for src in sources {
            let count = src.instance_count();
            if mb == 0 || !slots.is_multiple_of(mb) || count > slots || count == 0 {
                return Err(EvalError::Slots { count, slots, mb });
            }
            let n_rows = slots / mb;
            let mut rows = Vec::with_capacity(n_rows);
            let mut comp = Vec::with_capacity(n_rows);
            for r in 0..n_rows {
                let start = r * mb;
                if start >= count {
                    rows.push(None);
                    comp.push(Vec::new());
                    continue;
                }
                let g = src.graph_for(start..(start + mb).min(count))?;
                let costs = g
                    .nodes
                    .iter()
                    .map(|node| {
                        classes
                            .iter()
                            .map(|spec| tiled_cost(node, spec, &cfg.energy))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                rows.push(Some(g));
                comp.push(costs);
            }
            let topology = rows[0].clone().expect("row 0 holds instance 0");
            batches.push(PreparedBatch { rows, topology, comp });
        }
        let m0 = batches[0].layers();
        if let Some(b) = batches.iter().find(|b| b.layers() != m0) {
            return Err(EvalError::LayerMismatch(m0, b.layers()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            class_of_chip,
            slots,
            mb,
            batches,
        })
    }

    pub fn layers(&self) -> usize {
        self.batches[0].layers()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn micro_batch_size(&self) -> usize {
        self.mb
    }

    pub fn chips(&self) -> usize {
        self.cfg.chip_count()
    }

    pub fn config(&self) -> &AcceleratorConfig {
        &self.cfg
    }

    pub fn batches(&self) -> &[PreparedBatch] {
        &self.batches
    }

    pub fn check(&self, enc: &MappingEncoding) -> Result<(), EvalError> {
        if enc.micro_batch_size != self.mb {
            return Err(EvalError::Mapping(vec![Violation::Divisibility {
                mb: enc.micro_batch_size,
                n: self.slots,
            }]));
        }
        validate(enc, self.slots, self.layers(), self.chips()).map_err(EvalError::Mapping)
    }

    /// Schedule order restricted to rows that hold instances in `batch`.
    pub fn active_order(&self, batch: usize, enc: &MappingEncoding) -> Vec<ScheduledCell> {
        let b = &self.batches[batch];
        schedule_order(enc)
            .into_iter()
            .filter(|c| b.rows[c.row].is_some())
            .collect()
    }

    pub fn flags(&self, batch: usize, enc: &MappingEncoding) -> Result<AccessFlags, EvalError> {
        self.check(enc)?;
        let b = &self.batches[batch];
        data_access_flags(&self.active_order(batch, enc), &b.topology, b.rows(), self.chips())
    }

    /// Simulates one batch; the timeline is only recorded on request.
    pub fn simulate_batch(&self, batch: usize, enc: &MappingEncoding, record: bool) -> Result<EvalResult, EvalError> {
        self.check(enc)?;
        let b = &self.batches[batch];
        let order = self.active_order(batch, enc);
        let flags = data_access_flags(&order, &b.topology, b.rows(), self.chips())?;

        let m = b.layers();
        let mut end = vec![vec![0f64; m]; b.rows()];
        let mut cursor = vec![0f64; self.chips()];
        let mut scratch = vec![0u64; self.cfg.dram_dies];
        let mut timeline = Vec::with_capacity(if record { order.len() } else { 0 });
        let mut traffic = Traffic::default();
        let (mut latency, mut energy) = (0f64, 0f64);

        for cell in &order {
            let (r, l, chip) = (cell.row, cell.layer, cell.chip);
            let graph = b.rows[r].as_ref().expect("active row");
            let comp = &b.comp[r][l][self.class_of_chip[chip]];
            let times = layer_times(
                graph,
                l,
                chip,
                flags.weights_resident[r][l],
                flags.write_out[r][l],
                &flags.act_source[r][l],
                comp,
                &self.cfg,
                &mut scratch,
            )?;
            let ready = graph.preds[l].iter().map(|&p| end[r][p]).fold(0f64, f64::max);
            let t_start = ready.max(cursor[chip]);
            let t_end = t_start + times.t_proc();
            end[r][l] = t_end;
            cursor[chip] = t_end;
            latency = latency.max(t_end);
            energy += times.e_proc();
            traffic.dram_bytes += times.dram_bytes;
            traffic.act_dram_bytes += times.act_dram_bytes;
            traffic.nop_byte_hops += times.nop_byte_hops;
            traffic.weight_reload_count += u64::from(times.weight_load);
            if record {
                timeline.push(TimelineEntry {
                    chiplet_id: chip,
                    row: r,
                    layer_id: l,
                    t_start,
                    t_end,
                    t_comp: times.t_comp,
                    t_dram: times.t_dram,
                    t_nop: times.t_nop,
                });
            }
        }

        Ok(EvalResult {
            latency,
            energy,
            edp: energy * latency,
            timeline,
            traffic,
        })
    }

    /// Mean latency, energy and EDP over every prepared batch.
    pub fn evaluate(&self, enc: &MappingEncoding) -> Result<Expected, EvalError> {
        let per_batch = (0..self.batches.len())
            .map(|b| {
                self.simulate_batch(b, enc, false).map(|r| Metrics {
                    latency: r.latency,
                    energy: r.energy,
                    edp: r.edp,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Expected {
            mean: mean_metrics(&per_batch),
            per_batch,
        })
    }
}

pub fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        latency: ms.iter().map(|m| m.latency).sum::<f64>() / n,
        energy: ms.iter().map(|m| m.energy).sum::<f64>() / n,
        edp: ms.iter().map(|m| m.edp).sum::<f64>() / n,
    }
}

/// Simulates `enc` on one workload whose instance count is the batch size.
pub fn simulate(
    source: &dyn GraphSource,
    enc: &MappingEncoding,
    cfg: &AcceleratorConfig,
) -> Result<EvalResult, EvalError> {
    let ev = Evaluator::new(&[source], source.instance_count(), enc.micro_batch_size, cfg)?;
    ev.simulate_batch(0, enc, true)
}

/// Expected cost of `enc` over several workloads sharing one slot count.
pub fn evaluate_expectation(
    sources: &[&dyn GraphSource],
    slots: usize,
    enc: &MappingEncoding,
    cfg: &AcceleratorConfig,
) -> Result<Expected, EvalError> {
    Evaluator::new(sources, slots, enc.micro_batch_size, cfg)?.evaluate(enc)
}

/// `chiplet,row,layer,t_start,t_end,t_comp,t_dram,t_nop` records.
pub fn timeline_csv(entries: &[TimelineEntry]) -> String {
    let mut out = String::from("chiplet,row,layer,t_start,t_end,t_comp,t_dram,t_nop\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{:e}",
            e.chiplet_id, e.row, e.layer_id, e.t_start, e.t_end, e.t_comp, e.t_dram, e.t_nop
        );
    }
    out
}
