//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes plain values and returns a JSON string; the
//! `*_json` functions hold the logic so they can be tested natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use chiplet_mse::evaluator::Evaluator;
use chiplet_mse::hw::{AcceleratorConfig, ChipletSpec, Dataflow};
use chiplet_mse::mapping::{canonical, partition, schedule_order, MappingEncoding, Parallelism};
use chiplet_mse::modelgraph::{toy_model, GraphSource};
use chiplet_mse::trace::{form_batches, parse_trace, BatchingParams};

/// Per-instance row counts of the demo toy model.
pub const TOY_ROWS: [u64; 8] = [16, 48, 8, 96, 24, 64, 32, 4];
pub const TOY_LAYERS: usize = 4;
pub const TOY_CHIPS: usize = 4;

const DEMO_TRACE: &str = "512 128\n96 300\n1024 64\n200 200\n48 512\n700 90\n300 40\n64 256\n";

fn parse_mapping(text: &str) -> Result<MappingEncoding, String> {
    text.trim()
        .parse()
        .map_err(|e: chiplet_mse::mapping::MappingError| e.to_string())
}

/// Schedule order and subgraph partition of a mapping.
pub fn schedule_json(mapping: &str) -> Result<String, String> {
    let enc = parse_mapping(mapping)?;
    if enc.layer_to_chip.iter().any(|r| r.len() != enc.layers()) {
        return Err("every row needs one chip per layer".into());
    }
    let order: Vec<Value> = schedule_order(&enc)
        .iter()
        .map(|c| json!({ "row": c.row, "layer": c.layer, "chip": c.chip }))
        .collect();
    let subgraphs: Vec<Value> = partition(&enc)
        .iter()
        .map(|s| json!({ "segment": s.seg_index, "row": s.micro_batch_id, "start": s.layer_span.start, "end": s.layer_span.end }))
        .collect();
    Ok(json!({ "rows": enc.rows(), "layers": enc.layers(), "order": order, "subgraphs": subgraphs }).to_string())
}

/// The data-, model- or pipeline-parallel toy mapping in text form.
pub fn canonical_text(kind: &str) -> Result<String, String> {
    let kind = match kind {
        "dp" => Parallelism::DataParallel,
        "mp" => Parallelism::ModelParallel,
        "pp" => Parallelism::Pipeline,
        _ => return Err(format!("unknown pattern `{kind}`")),
    };
    canonical(kind, TOY_ROWS.len(), TOY_LAYERS, TOY_CHIPS)
        .map(|e| e.to_string())
        .map_err(|e| e.to_string())
}

/// Simulates a mapping of the toy model on a 2x2 package of the given
/// dataflow and returns the timeline, metrics and traffic.
pub fn simulate_json(mapping: &str, dataflow: &str) -> Result<String, String> {
    let enc = parse_mapping(mapping)?;
    let df = match dataflow.to_ascii_uppercase().as_str() {
        "WS" => Dataflow::WS,
        "OS" => Dataflow::OS,
        _ => return Err(format!("unknown dataflow `{dataflow}`")),
    };
    let toy = toy_model(TOY_LAYERS, &TOY_ROWS, 256).map_err(|e| e.to_string())?;
    let hw = AcceleratorConfig::uniform(2, 2, ChipletSpec::default_with(df));
    let ev = Evaluator::new(&[&toy as &dyn GraphSource], TOY_ROWS.len(), enc.micro_batch_size, &hw)
        .map_err(|e| e.to_string())?;
    let res = ev.simulate_batch(0, &enc, true).map_err(|e| e.to_string())?;
    Ok(json!({
        "latency": res.latency,
        "energy": res.energy,
        "edp": res.edp,
        "traffic": res.traffic,
        "timeline": res.timeline,
    })
    .to_string())
}

/// Forms iteration batches from a small built-in trace.
pub fn batches_json(
    strategy: &str,
    prefill_bs: usize,
    decode_bs: usize,
    chunk_budget: u64,
    count: usize,
    seed: u64,
) -> Result<String, String> {
    let params = BatchingParams {
        strategy: strategy
            .parse()
            .map_err(|e: chiplet_mse::trace::TraceError| e.to_string())?,
        prefill_bs,
        decode_bs,
        chunk_budget,
    };
    let trace = parse_trace(DEMO_TRACE).map_err(|e| e.to_string())?;
    let batches = form_batches(&trace, &params, count.min(64), seed).map_err(|e| e.to_string())?;
    serde_json::to_string(&batches).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn schedule(mapping: &str) -> Result<String, JsError> {
    schedule_json(mapping).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn canonical_mapping(kind: &str) -> Result<String, JsError> {
    canonical_text(kind).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simulate(mapping: &str, dataflow: &str) -> Result<String, JsError> {
    simulate_json(mapping, dataflow).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn batches(
    strategy: &str,
    prefill_bs: usize,
    decode_bs: usize,
    chunk_budget: u32,
    count: usize,
    seed: u32,
) -> Result<String, JsError> {
    batches_json(strategy, prefill_bs, decode_bs, chunk_budget.into(), count, seed.into()).map_err(|e| JsError::new(&e))
}
