//! Sequence-length traces and iteration-batch formation.
//!
//! A trace is a list of `(input_len, output_len)` pairs. [`form_batches`]
//! turns a trace into the iteration batches an iteration-level scheduler
//! would hand to the accelerator under one of three serving strategies:
//!
//! * [`Strategy::Vllm`]: prefill pauses decoding, so batches are type-pure.
//! * [`Strategy::Orca`]: new prefills ride along with in-flight decodes.
//! * [`Strategy::ChunkedPrefill`]: prompts are cut into fixed token budgets
//!   and one chunk is co-scheduled with the decodes each iteration.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace contains no requests")]
    Empty,
    #[error("unknown serving strategy `{0}` (expected vllm, orca or chunked)")]
    UnknownStrategy(String),
    #[error("{0} must be at least 1")]
    ZeroCap(&'static str),
}

/// One request of a sequence-length trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEntry {
    pub input_len: u64,
    pub output_len: u64,
}

impl TraceEntry {
    pub fn new(input_len: u64, output_len: u64) -> Self {
        Self { input_len, output_len }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Vllm,
    Orca,
    ChunkedPrefill,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vllm => "vllm",
            Strategy::Orca => "orca",
            Strategy::ChunkedPrefill => "chunked",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vllm" => Ok(Strategy::Vllm),
            "orca" => Ok(Strategy::Orca),
            "chunked" | "chunkedprefill" | "chunked_prefill" | "chunked-prefill" => Ok(Strategy::ChunkedPrefill),
            _ => Err(TraceError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkKind {
    FullPrefill,
    PrefillChunk,
    DecodeStep,
}

/// The slice of one request processed in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub request_id: u64,
    pub kind: WorkKind,
    /// Tokens processed by this iteration.
    pub new_tokens: u64,
    /// Tokens already resident in the KV cache before this iteration.
    pub context_len: u64,
    /// Prompt length of the owning request.
    pub prompt_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationBatch {
    pub items: Vec<WorkItem>,
    pub strategy: Strategy,
}

impl IterationBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.items.iter().map(|i| i.new_tokens).sum()
    }
}

/// Parses trace text. Lines hold two positive integers separated by
/// whitespace and/or a comma; blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>, TraceError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 2 {
            return Err(TraceError::Parse {
                line: line_no,
                msg: format!("expected `input_len output_len`, got `{line}`"),
            });
        }
        let parse = |f: &str| -> Result<u64, TraceError> {
            match f.parse::<u64>() {
                Ok(0) => Err(TraceError::Parse {
                    line: line_no,
                    msg: "sequence lengths must be positive".into(),
                }),
                Ok(v) => Ok(v),
                Err(e) => Err(TraceError::Parse {
                    line: line_no,
                    msg: format!("`{f}`: {e}"),
                }),
            }
        };
        entries.push(TraceEntry::new(parse(fields[0])?, parse(fields[1])?));
    }
    if entries.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(entries)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEntry>, TraceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(&text)
}

/// Batch caps for [`form_batches`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchingParams {
    pub strategy: Strategy,
    pub prefill_bs: usize,
    pub decode_bs: usize,
    /// Token budget per prefill chunk; only read by chunked prefill.
    pub chunk_budget: u64,
}

impl BatchingParams {
    fn check(&self) -> Result<(), TraceError> {
        if self.prefill_bs == 0 {
            return Err(TraceError::ZeroCap("prefill_bs"));
        }
        if self.decode_bs == 0 {
            return Err(TraceError::ZeroCap("decode_bs"));
        }
        if self.strategy == Strategy::ChunkedPrefill && self.chunk_budget == 0 {
            return Err(TraceError::ZeroCap("chunk_budget"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    id: u64,
    prompt_len: u64,
    context_len: u64,
    remaining: u64,
}

#[derive(Debug, Clone, Copy)]
struct Chunking {
    id: u64,
    prompt_len: u64,
    output_len: u64,
    done: u64,
}

/// Steady-state request pool driving batch formation.
struct Pool<'a> {
    trace: &'a [TraceEntry],
    rng: ChaCha8Rng,
    next_id: u64,
    decoding: VecDeque<InFlight>,
    chunking: Option<Chunking>,
}

impl<'a> Pool<'a> {
    fn new(trace: &'a [TraceEntry], seed: u64) -> Self {
        Self {
            trace,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
            decoding: VecDeque::new(),
            chunking: None,
        }
    }

    fn sample(&mut self) -> (u64, TraceEntry) {
        let entry = self.trace[self.rng.gen_range(0..self.trace.len())];
        let id = self.next_id;
        self.next_id += 1;
        (id, entry)
    }

    /// Tops the decode pool up with requests caught mid-generation.
    fn top_up(&mut self, n: usize) {
        while self.decoding.len() < n {
            let (id, e) = self.sample();
            let pos = self.rng.gen_range(e.input_len..e.input_len + e.output_len);
            self.decoding.push_back(InFlight {
                id,
                prompt_len: e.input_len,
                context_len: pos,
                remaining: e.input_len + e.output_len - pos,
            });
        }
    }

    fn admit(&mut self, id: u64, prompt_len: u64, output_len: u64) {
        self.decoding.push_back(InFlight {
            id,
            prompt_len,
            context_len: prompt_len,
            remaining: output_len,
        });
    }

    /// Emits `n` decode steps, rotating served requests to the back.
    fn decode_steps(&mut self, n: usize, out: &mut Vec<WorkItem>) {
        if n == 0 {
            return;
        }
        self.top_up(n);
        for _ in 0..n {
            let mut r = self.decoding.pop_front().expect("pool topped up");
            out.push(WorkItem {
                request_id: r.id,
                kind: WorkKind::DecodeStep,
                new_tokens: 1,
                context_len: r.context_len,
                prompt_len: r.prompt_len,
            });
            r.context_len += 1;
            r.remaining -= 1;
            if r.remaining > 0 {
                self.decoding.push_back(r);
            }
        }
    }

    fn full_prefills(&mut self, n: usize, out: &mut Vec<WorkItem>) -> Vec<(u64, TraceEntry)> {
        let mut admitted = Vec::with_capacity(n);
        for _ in 0..n {
            let (id, e) = self.sample();
            out.push(WorkItem {
                request_id: id,
                kind: WorkKind::FullPrefill,
                new_tokens: e.input_len,
                context_len: 0,
                prompt_len: e.input_len,
            });
            admitted.push((id, e));
        }
        admitted
    }

    fn next_chunk(&mut self, budget: u64, out: &mut Vec<WorkItem>) {
        let mut c = match self.chunking.take() {
            Some(c) => c,
            None => {
                let (id, e) = self.sample();
                Chunking {
                    id,
                    prompt_len: e.input_len,
                    output_len: e.output_len,
                    done: 0,
                }
            }
        };
        let take = budget.min(c.prompt_len - c.done);
        out.push(WorkItem {
            request_id: c.id,
            kind: WorkKind::PrefillChunk,
            new_tokens: take,
            context_len: c.done,
            prompt_len: c.prompt_len,
        });
        c.done += take;
        if c.done < c.prompt_len {
            self.chunking = Some(c);
        } else {
            // prompt complete: the request starts decoding next iteration
            self.admit(c.id, c.prompt_len, c.output_len);
        }
    }
}

/// Forms `num_batches` iteration batches by simulating a request pool fed
/// with uniform samples (with replacement) from `trace`.
///
/// Decode slots that the pool cannot fill are topped up with freshly
/// sampled requests placed at a uniform position of their generation
/// phase, so every batch reflects the steady state of the trace.
pub fn form_batches(
    trace: &[TraceEntry],
    params: &BatchingParams,
    num_batches: usize,
    seed: u64,
) -> Result<Vec<IterationBatch>, TraceError> {
    params.check()?;
    if trace.is_empty() {
        return Err(TraceError::Empty);
    }
    let mut pool = Pool::new(trace, seed);
    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let mut items = Vec::new();
        match params.strategy {
            Strategy::Vllm => {
                if b % 2 == 0 {
                    let admitted = pool.full_prefills(params.prefill_bs, &mut items);
                    for (id, e) in admitted {
                        pool.admit(id, e.input_len, e.output_len);
                    }
                } else {
                    pool.decode_steps(params.decode_bs, &mut items);
                }
            }
            Strategy::Orca => {
                let admitted = pool.full_prefills(params.prefill_bs, &mut items);
                let decodes = params.decode_bs.saturating_sub(params.prefill_bs);
                pool.decode_steps(decodes, &mut items);
                for (id, e) in admitted {
                    pool.admit(id, e.input_len, e.output_len);
                }
            }
            Strategy::ChunkedPrefill => {
                pool.next_chunk(params.chunk_budget, &mut items);
                pool.decode_steps(params.decode_bs.saturating_sub(1), &mut items);
            }
        }
        batches.push(IterationBatch {
            items,
            strategy: params.strategy,
        });
    }
    Ok(batches)
}
