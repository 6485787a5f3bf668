//! Genetic-algorithm mapping search and the outer grid over micro-batch
//! size and tensor-parallel degree.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{EvalError, Evaluator, Metrics};
use crate::hw::AcceleratorConfig;
use crate::mapping::{canonical_at, partition, segment_spans, MappingEncoding, Parallelism};
use crate::modelgraph::{GraphSource, LlmArch, LlmBatch, ToyModel};
use crate::trace::IterationBatch;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("empty population")]
    EmptyPopulation,
    #[error("tournament size {k} invalid for population {pop}")]
    Tournament { k: usize, pop: usize },
    #[error("parents have different shapes")]
    ShapeMismatch,
    #[error("invalid GA config: {0}")]
    Config(String),
    #[error("no feasible (micro_batch_size, tp) candidate: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub encoding: MappingEncoding,
    /// Expected EDP in J*s; lower is better.
    pub fitness: f64,
    /// Generation the individual was created in.
    pub age: usize,
}

/// Relative weights of the three mutation categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryWeights {
    /// Operators 1-3 (single cells).
    pub layer: f64,
    /// Operators 4-5 (one subgraph).
    pub subgraph: f64,
    /// Operators 6-7 (whole rows or segment columns).
    pub graph: f64,
}

/// Linear schedule moving weight from graph-level to layer-level mutations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationSchedule {
    pub layer_start: f64,
    pub layer_end: f64,
    pub subgraph: f64,
    pub graph_start: f64,
    pub graph_end: f64,
}

impl Default for MutationSchedule {
    fn default() -> Self {
        Self {
            layer_start: 0.2,
            layer_end: 0.6,
            subgraph: 0.3,
            graph_start: 0.5,
            graph_end: 0.1,
        }
    }
}

pub fn mutation_schedule(generation: usize, total: usize, s: &MutationSchedule) -> CategoryWeights {
    let t = if total <= 1 {
        0.0
    } else {
        generation.min(total - 1) as f64 / (total - 1) as f64
    };
    let layer = s.layer_start + (s.layer_end - s.layer_start) * t;
    let graph = s.graph_start + (s.graph_end - s.graph_start) * t;
    let sum = layer + s.subgraph + graph;
    CategoryWeights {
        layer: layer / sum,
        subgraph: s.subgraph / sum,
        graph: graph / sum,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    /// Probability that a segmentation mutation is a bit-flip rather than a swap.
    pub seg_flip_prob: f64,
    pub elitism: usize,
    pub schedule: MutationSchedule,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 120,
            generations: 200,
            tournament_size: 4,
            crossover_rate: 0.9,
            seg_flip_prob: 0.5,
            elitism: 1,
            schedule: MutationSchedule::default(),
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.tournament_size < 2 || self.tournament_size > self.population {
            return bad("tournament size must be in 2..=population");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.seg_flip_prob) {
            return bad("rates must lie in [0, 1]");
        }
        if self.elitism == 0 || self.elitism >= self.population {
            return bad("elitism must be in 1..population");
        }
        Ok(())
    }
}

/// Which part of the encoding space the GA may visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchSpace {
    /// Every micro-batch size, segmentation and cell assignment.
    Full,
    /// Each instance mapped as a separate model: one instance per row, no
    /// segmentation, free per-cell chip choice.
    PerInstance,
}

/// Samples `k` distinct individuals and returns the fittest.
pub fn tournament_select<'a, R: Rng>(
    pop: &'a [Individual],
    k: usize,
    rng: &mut R,
) -> Result<&'a Individual, SearchError> {
    if pop.is_empty() {
        return Err(SearchError::EmptyPopulation);
    }
    if k < 2 || k > pop.len() {
        return Err(SearchError::Tournament { k, pop: pop.len() });
    }
    let winner = sample(rng, pop.len(), k)
        .into_iter()
        .min_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)))
        .expect("k >= 2");
    Ok(&pop[winner])
}

fn same_shape(a: &MappingEncoding, b: &MappingEncoding) -> bool {
    a.micro_batch_size == b.micro_batch_size
        && a.segmentation.len() == b.segmentation.len()
        && a.rows() == b.rows()
        && a.layer_to_chip
            .iter()
            .zip(&b.layer_to_chip)
            .all(|(x, y)| x.len() == y.len())
}

/// Bit-wise segmentation crossover followed by subgraph-wise inheritance of
/// chip assignments, using the child's own segmentation.
pub fn crossover<R: Rng>(
    a: &MappingEncoding,
    b: &MappingEncoding,
    rng: &mut R,
) -> Result<MappingEncoding, SearchError> {
    if !same_shape(a, b) {
        return Err(SearchError::ShapeMismatch);
    }
    let segmentation: Vec<bool> = a
        .segmentation
        .iter()
        .zip(&b.segmentation)
        .map(|(&x, &y)| if rng.gen::<bool>() { x } else { y })
        .collect();
    let mut child = MappingEncoding {
        micro_batch_size: a.micro_batch_size,
        segmentation,
        layer_to_chip: a.layer_to_chip.clone(),
    };
    for sg in partition(&child) {
        if rng.gen::<bool>() {
            let row = sg.micro_batch_id;
            child.layer_to_chip[row][sg.layer_span.clone()].copy_from_slice(&b.layer_to_chip[row][sg.layer_span]);
        }
    }
    Ok(child)
}

pub fn flip_bit(enc: &mut MappingEncoding, i: usize) {
    enc.segmentation[i] = !enc.segmentation[i];
}

/// Swaps bit `i` with a neighbour: the next one at index 0, the previous
/// one at the last index, otherwise either with equal probability.
pub fn swap_bit<R: Rng>(enc: &mut MappingEncoding, i: usize, rng: &mut R) {
    let len = enc.segmentation.len();
    if len < 2 {
        return;
    }
    let j = neighbour(i, len, rng);
    enc.segmentation.swap(i, j);
}

/// Applies one bit-flip or one bit-swap at a random position.
pub fn mutate_segmentation<R: Rng>(enc: &mut MappingEncoding, flip_prob: f64, rng: &mut R) {
    let len = enc.segmentation.len();
    if len == 0 {
        return;
    }
    let i = rng.gen_range(0..len);
    if rng.gen_bool(flip_prob) {
        flip_bit(enc, i);
    } else {
        swap_bit(enc, i, rng);
    }
}

fn random_subgraph<R: Rng>(enc: &MappingEncoding, rng: &mut R) -> (usize, std::ops::Range<usize>) {
    let spans = segment_spans(&enc.segmentation);
    let span = spans[rng.gen_range(0..spans.len())].clone();
    (rng.gen_range(0..enc.rows()), span)
}

/// Applies layer_to_chip mutation operator `op` (1-7):
///
/// 1. one cell gets a random chiplet
/// 2. one cell swaps with its neighbour along the layer axis
/// 3. one cell swaps with its neighbour along the micro-batch axis
/// 4. the cells of one subgraph are shuffled
/// 5. the cells of one subgraph all get random chiplets
/// 6. two segment columns exchange their cells row by row (over the shorter span)
/// 7. two micro-batch rows are exchanged
///
/// Degenerate shapes (a single row, layer or segment) leave the encoding
/// unchanged for the operators that need two of them.
pub fn mutate_layer_to_chip<R: Rng>(enc: &mut MappingEncoding, op: u8, chips: usize, rng: &mut R) {
    let rows = enc.rows();
    let m = enc.layers();
    match op {
        1 => {
            let (r, l) = (rng.gen_range(0..rows), rng.gen_range(0..m));
            enc.layer_to_chip[r][l] = rng.gen_range(0..chips);
        }
        2 => {
            if m < 2 {
                return;
            }
            let (r, l) = (rng.gen_range(0..rows), rng.gen_range(0..m));
            let other = neighbour(l, m, rng);
            enc.layer_to_chip[r].swap(l, other);
        }
        3 => {
            if rows < 2 {
                return;
            }
            let (r, l) = (rng.gen_range(0..rows), rng.gen_range(0..m));
            let other = neighbour(r, rows, rng);
            let tmp = enc.layer_to_chip[r][l];
            enc.layer_to_chip[r][l] = enc.layer_to_chip[other][l];
            enc.layer_to_chip[other][l] = tmp;
        }
        4 => {
            let (r, span) = random_subgraph(enc, rng);
            enc.layer_to_chip[r][span].shuffle(rng);
        }
        5 => {
            let (r, span) = random_subgraph(enc, rng);
            for cell in &mut enc.layer_to_chip[r][span] {
                *cell = rng.gen_range(0..chips);
            }
        }
        6 => {
            let spans = segment_spans(&enc.segmentation);
            if spans.len() < 2 {
                return;
            }
            let pick = sample(rng, spans.len(), 2);
            let (a, b) = (spans[pick.index(0)].clone(), spans[pick.index(1)].clone());
            let width = a.len().min(b.len());
            for row in &mut enc.layer_to_chip {
                for t in 0..width {
                    row.swap(a.start + t, b.start + t);
                }
            }
        }
        7 => {
            if rows < 2 {
                return;
            }
            let pick = sample(rng, rows, 2);
            enc.layer_to_chip.swap(pick.index(0), pick.index(1));
        }
        _ => panic!("mutation operator {op} outside 1..=7"),
    }
}

fn neighbour<R: Rng>(i: usize, len: usize, rng: &mut R) -> usize {
    if i == 0 {
        1
    } else if i == len - 1 || rng.gen::<bool>() {
        i - 1
    } else {
        i + 1
    }
}

fn pick_operator<R: Rng>(w: CategoryWeights, rng: &mut R) -> u8 {
    let x: f64 = rng.gen();
    if x < w.layer {
        rng.gen_range(1..=3)
    } else if x < w.layer + w.subgraph {
        rng.gen_range(4..=5)
    } else {
        rng.gen_range(6..=7)
    }
}

pub fn random_encoding<R: Rng>(
    slots: usize,
    mb: usize,
    layers: usize,
    chips: usize,
    space: SearchSpace,
    rng: &mut R,
) -> MappingEncoding {
    let rows = slots / mb;
    let segmentation = match space {
        SearchSpace::Full => (0..layers - 1).map(|_| rng.gen()).collect(),
        SearchSpace::PerInstance => vec![false; layers - 1],
    };
    let layer_to_chip = (0..rows)
        .map(|_| (0..layers).map(|_| rng.gen_range(0..chips)).collect())
        .collect();
    MappingEncoding {
        micro_batch_size: mb,
        segmentation,
        layer_to_chip,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    pub best: Individual,
    /// Best fitness after initialisation and after every generation.
    pub series: Vec<f64>,
}

fn fitness_of(ev: &Evaluator, encs: &[MappingEncoding]) -> Result<Vec<f64>, SearchError> {
    let eval = |e: &MappingEncoding| ev.evaluate(e).map(|x| x.mean.edp);
    #[cfg(feature = "parallel")]
    let out: Result<Vec<f64>, EvalError> = {
        use rayon::prelude::*;
        encs.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let out: Result<Vec<f64>, EvalError> = encs.iter().map(eval).collect();
    Ok(out?)
}

fn best_of(pop: &[Individual]) -> &Individual {
    pop.iter()
        .min_by(|a, b| a.fitness.total_cmp(&b.fitness))
        .expect("non-empty population")
}

/// Evolves encodings of the evaluator's micro-batch size.
///
/// The initial population holds the data-, model- and pipeline-parallel
/// patterns (those allowed by `space`) plus random encodings. Each
/// generation keeps the elite, then breeds children by tournament
/// selection, crossover and one segmentation plus one layer_to_chip
/// mutation. Fitness is the mean EDP over the evaluator's batches; results
/// are independent of thread count.
pub fn run_ga(ev: &Evaluator, ga: &GaConfig, space: SearchSpace) -> Result<GaOutcome, SearchError> {
    ga.validate()?;
    let (slots, mb, m, c) = (ev.slots(), ev.micro_batch_size(), ev.layers(), ev.chips());
    if space == SearchSpace::PerInstance && mb != 1 {
        return Err(SearchError::Infeasible(
            "per-instance space requires micro_batch_size 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ga.seed);

    let mut encs: Vec<MappingEncoding> = Parallelism::ALL
        .iter()
        .filter(|&&k| space == SearchSpace::Full || k != Parallelism::Pipeline || m == 1)
        .filter_map(|&k| canonical_at(k, slots, m, c, mb).ok())
        .collect();
    encs.truncate(ga.population);
    while encs.len() < ga.population {
        encs.push(random_encoding(slots, mb, m, c, space, &mut rng));
    }
    let fit = fitness_of(ev, &encs)?;
    let mut pop: Vec<Individual> = encs
        .into_iter()
        .zip(fit)
        .map(|(encoding, fitness)| Individual {
            encoding,
            fitness,
            age: 0,
        })
        .collect();
    let mut series = vec![best_of(&pop).fitness];

    for g in 0..ga.generations {
        let weights = mutation_schedule(g, ga.generations, &ga.schedule);
        let mut ranked: Vec<usize> = (0..pop.len()).collect();
        ranked.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)));
        let mut next: Vec<Individual> = ranked[..ga.elitism].iter().map(|&i| pop[i].clone()).collect();

        let mut children = Vec::with_capacity(ga.population - next.len());
        while next.len() + children.len() < ga.population {
            let a = tournament_select(&pop, ga.tournament_size, &mut rng)?;
            let b = tournament_select(&pop, ga.tournament_size, &mut rng)?;
            let mut child = if rng.gen_bool(ga.crossover_rate) {
                crossover(&a.encoding, &b.encoding, &mut rng)?
            } else {
                a.encoding.clone()
            };
            if space == SearchSpace::Full {
                mutate_segmentation(&mut child, ga.seg_flip_prob, &mut rng);
            }
            let op = pick_operator(weights, &mut rng);
            mutate_layer_to_chip(&mut child, op, c, &mut rng);
            children.push(child);
        }
        let fit = fitness_of(ev, &children)?;
        next.extend(children.into_iter().zip(fit).map(|(encoding, fitness)| Individual {
            encoding,
            fitness,
            age: g + 1,
        }));
        pop = next;
        series.push(best_of(&pop).fitness);
    }

    Ok(GaOutcome {
        best: best_of(&pop).clone(),
        series,
    })
}

/// The model half of a search problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Llm(LlmArch),
    /// A GEMM chain; tensor parallelism does not apply.
    Toy(ToyModel),
}

/// Workload and hardware a search runs against.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ModelSpec,
    /// Iteration batches for LLM models; ignored for toy models.
    pub batches: Vec<IterationBatch>,
    pub hw: AcceleratorConfig,
}

impl Problem {
    /// Instance slots of the encoding: the largest batch.
    pub fn slots(&self) -> usize {
        match &self.model {
            ModelSpec::Llm(_) => self.batches.iter().map(IterationBatch::len).max().unwrap_or(0),
            ModelSpec::Toy(t) => t.instance_rows.len(),
        }
    }

    pub fn evaluator(&self, mb: usize, tp: u64) -> Result<Evaluator, EvalError> {
        match &self.model {
            ModelSpec::Llm(arch) => {
                let sources: Vec<LlmBatch> = self
                    .batches
                    .iter()
                    .map(|b| LlmBatch {
                        arch: arch.clone(),
                        batch: b.clone(),
                        tp,
                    })
                    .collect();
                let refs: Vec<&dyn GraphSource> = sources.iter().map(|s| s as &dyn GraphSource).collect();
                Evaluator::new(&refs, self.slots(), mb, &self.hw)
            }
            ModelSpec::Toy(t) => Evaluator::new(&[t as &dyn GraphSource], self.slots(), mb, &self.hw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub mb: usize,
    pub tp: u64,
    pub metrics: Metrics,
    pub encoding: MappingEncoding,
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridCell,
    pub table: Vec<GridCell>,
}

/// Runs the GA for every feasible `(mb, tp)` pair and keeps the best.
///
/// Micro-batch sizes that do not divide the slot count are dropped; toy
/// models only use `tp = 1`. The per-instance space only uses `mb = 1`.
pub fn grid_search(
    problem: &Problem,
    mb_candidates: &[usize],
    tp_candidates: &[u64],
    ga: &GaConfig,
    space: SearchSpace,
) -> Result<GridResult, SearchError> {
    let slots = problem.slots();
    let mbs: Vec<usize> = match space {
        SearchSpace::Full => mb_candidates
            .iter()
            .copied()
            .filter(|&mb| mb > 0 && slots.is_multiple_of(mb))
            .collect(),
        SearchSpace::PerInstance => vec![1],
    };
    let tps: Vec<u64> = match problem.model {
        ModelSpec::Llm(_) => tp_candidates.to_vec(),
        ModelSpec::Toy(_) => vec![1],
    };
    if mbs.is_empty() || tps.is_empty() || slots == 0 {
        return Err(SearchError::Infeasible(format!(
            "no micro_batch_size in {mb_candidates:?} divides {slots}"
        )));
    }
    let mut table = Vec::new();
    let mut last_err = None;
    for &tp in &tps {
        for &mb in &mbs {
            let ev = match problem.evaluator(mb, tp) {
                Ok(ev) => ev,
                Err(e) => {
                    last_err = Some(e.to_string());
                    continue;
                }
            };
            let out = run_ga(&ev, ga, space)?;
            let exp = ev.evaluate(&out.best.encoding)?;
            table.push(GridCell {
                mb,
                tp,
                metrics: exp.mean,
                encoding: out.best.encoding,
                series: out.series,
            });
        }
    }
    let best = table
        .iter()
        .min_by(|a, b| a.metrics.edp.total_cmp(&b.metrics.edp))
        .cloned()
        .ok_or_else(|| SearchError::Infeasible(last_err.unwrap_or_default()))?;
    Ok(GridResult { best, table })
}
