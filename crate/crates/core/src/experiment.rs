//! Experiment configuration and the `run` / `eval` / `compare` drivers.
//!
//! A config is one TOML file:
//!
//! ```toml
//! scenario = "desk-chunked"        # optional; defaults to "<model>/<strategy>"
//! out_dir = "out/desk"             # optional; defaults to "out"
//!
//! [hardware]
//! preset = "WS"                    # or an inline [hardware.inline] table
//!
//! [model]
//! desk = { blocks = 4, hidden = 512 }   # or name = "gpt3-6.7b", arch = {...}, toy = {...}
//!
//! [workload]                       # required for LLM models
//! trace_path = "traces/sharegpt_like.txt"   # relative to the config file
//! strategy = "chunked"
//! prefill_bs = 2
//! decode_bs = 8
//! chunk_budget = 64
//! search_batches = 2
//! validation_batches = 2
//!
//! [search]
//! mb_candidates = [1, 2, 4]
//! tp_candidates = [1, 2]
//! space = "Full"                   # or "PerInstance"
//! search_seed = 1
//! validation_seed = 2
//! [search.ga]
//! population = 40
//! generations = 30
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{timeline_csv, EvalError, Evaluator, Metrics};
use crate::hw::{AcceleratorConfig, HwError, Preset};
use crate::mapping::MappingEncoding;
use crate::modelgraph::{LlmArch, ToyModel};
use crate::search::{grid_search, GaConfig, GridResult, ModelSpec, Problem, SearchError, SearchSpace};
use crate::trace::{form_batches, load_trace, BatchingParams, IterationBatch, Strategy, TraceError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("mapping: {0}")]
    Mapping(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("compare: {0}")]
    Compare(String),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config(msg.into()))
}

fn read(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    pub preset: Option<Preset>,
    pub inline: Option<AcceleratorConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskModel {
    pub blocks: u64,
    pub hidden: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: Option<String>,
    pub desk: Option<DeskModel>,
    pub arch: Option<LlmArch>,
    pub toy: Option<ToyModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub trace_path: PathBuf,
    pub strategy: String,
    pub prefill_bs: usize,
    pub decode_bs: usize,
    #[serde(default = "default_chunk")]
    pub chunk_budget: u64,
    #[serde(default = "default_batches")]
    pub search_batches: usize,
    #[serde(default = "default_batches")]
    pub validation_batches: usize,
}

fn default_chunk() -> u64 {
    256
}

fn default_batches() -> usize {
    4
}

fn default_tp() -> Vec<u64> {
    vec![1]
}

fn default_space() -> SearchSpace {
    SearchSpace::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub mb_candidates: Vec<usize>,
    #[serde(default = "default_tp")]
    pub tp_candidates: Vec<u64>,
    #[serde(default = "default_space")]
    pub space: SearchSpace,
    pub search_seed: u64,
    pub validation_seed: u64,
    #[serde(default)]
    pub ga: GaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Option<String>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub hardware: HardwareSection,
    pub model: ModelSection,
    pub workload: Option<WorkloadSection>,
    pub search: SearchSection,
    /// Directory relative paths resolve against; set by [`load_config`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub strategy: Option<Strategy>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.base_dir = base_dir.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ExperimentError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    parse_config(&read(path)?, &base)
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<(), ExperimentError> {
        if let Some(p) = o.preset {
            self.hardware = HardwareSection {
                preset: Some(p),
                inline: None,
            };
        }
        if let Some(s) = o.strategy {
            match self.workload.as_mut() {
                Some(w) => w.strategy = s.name().to_string(),
                None => return config_err("--strategy needs a [workload] section"),
            }
        }
        if let Some(seed) = o.seed {
            self.search.search_seed = seed;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        match (&self.hardware.preset, &self.hardware.inline) {
            (Some(_), None) => {}
            (None, Some(hw)) => hw.validate()?,
            _ => return config_err("[hardware] needs exactly one of `preset` or `inline`"),
        }
        let m = &self.model;
        let given = [m.name.is_some(), m.desk.is_some(), m.arch.is_some(), m.toy.is_some()];
        if given.iter().filter(|&&g| g).count() != 1 {
            return config_err("[model] needs exactly one of `name`, `desk`, `arch` or `toy`");
        }
        if let Some(name) = &m.name {
            if LlmArch::by_name(name).is_none() {
                return config_err(format!("unknown model `{name}`"));
            }
        }
        if let Some(a) = &m.arch {
            a.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if let Some(t) = &m.toy {
            t.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        } else {
            let Some(w) = &self.workload else {
                return config_err("LLM models need a [workload] section");
            };
            w.strategy.parse::<Strategy>()?;
            if w.search_batches == 0 || w.validation_batches == 0 {
                return config_err("batch counts must be positive");
            }
        }
        let s = &self.search;
        if s.mb_candidates.is_empty() || s.tp_candidates.is_empty() {
            return config_err("mb_candidates and tp_candidates must be non-empty");
        }
        if s.mb_candidates.contains(&0) || s.tp_candidates.contains(&0) {
            return config_err("candidates must be positive");
        }
        if s.search_seed == s.validation_seed {
            return config_err("search_seed and validation_seed must differ");
        }
        s.ga.validate()?;
        Ok(())
    }

    pub fn hardware(&self) -> AcceleratorConfig {
        match (&self.hardware.preset, &self.hardware.inline) {
            (Some(p), _) => p.config(),
            (None, Some(hw)) => hw.clone(),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn model(&self) -> ModelSpec {
        let m = &self.model;
        if let Some(t) = &m.toy {
            ModelSpec::Toy(t.clone())
        } else if let Some(a) = &m.arch {
            ModelSpec::Llm(a.clone())
        } else if let Some(d) = m.desk {
            ModelSpec::Llm(LlmArch::gpt_desk(d.blocks, d.hidden))
        } else {
            ModelSpec::Llm(LlmArch::by_name(m.name.as_deref().unwrap_or_default()).expect("validated"))
        }
    }

    pub fn model_name(&self) -> String {
        match self.model() {
            ModelSpec::Llm(a) => a.name,
            ModelSpec::Toy(t) => format!("toy-{}", t.layers.len()),
        }
    }

    pub fn strategy_name(&self) -> String {
        match (&self.model.toy, &self.workload) {
            (None, Some(w)) => w.strategy.clone(),
            _ => "none".into(),
        }
    }

    pub fn scenario(&self) -> String {
        self.scenario
            .clone()
            .unwrap_or_else(|| format!("{}/{}", self.model_name(), self.strategy_name()))
    }

    fn batches(
        &self,
        seed: u64,
        count: impl Fn(&WorkloadSection) -> usize,
    ) -> Result<Vec<IterationBatch>, ExperimentError> {
        let Some(w) = self.workload.as_ref().filter(|_| self.model.toy.is_none()) else {
            return Ok(Vec::new());
        };
        let trace = load_trace(self.base_dir.join(&w.trace_path))?;
        let params = BatchingParams {
            strategy: w.strategy.parse()?,
            prefill_bs: w.prefill_bs,
            decode_bs: w.decode_bs,
            chunk_budget: w.chunk_budget,
        };
        Ok(form_batches(&trace, &params, count(w), seed)?)
    }

    /// The search and validation problems, built from disjoint seeds.
    pub fn problems(&self) -> Result<(Problem, Problem), ExperimentError> {
        let hw = self.hardware();
        let search = Problem {
            model: self.model(),
            batches: self.batches(self.search.search_seed, |w| w.search_batches)?,
            hw: hw.clone(),
        };
        let validation = Problem {
            model: self.model(),
            batches: self.batches(self.search.validation_seed, |w| w.validation_batches)?,
            hw,
        };
        if validation.slots() != search.slots() {
            return config_err(format!(
                "validation batches hold {} instances but search batches hold {}",
                validation.slots(),
                search.slots()
            ));
        }
        Ok((search, validation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub mb: usize,
    pub tp: u64,
    pub latency: f64,
    pub energy: f64,
    pub edp: f64,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: String,
    pub hardware: String,
    pub model: String,
    pub strategy: String,
    pub micro_batch_size: usize,
    pub tp: u64,
    pub mapping: String,
    pub search: Metrics,
    pub validation: Metrics,
    pub grid: Vec<GridRow>,
}

fn grid_csv(g: &GridResult) -> String {
    let mut s = String::from("mb,tp,latency,energy,edp\n");
    for c in &g.table {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e}",
            c.mb, c.tp, c.metrics.latency, c.metrics.energy, c.metrics.edp
        );
    }
    s
}

fn convergence_csv(series: &[f64]) -> String {
    let mut s = String::from("generation,best_edp\n");
    for (g, v) in series.iter().enumerate() {
        let _ = writeln!(s, "{g},{v:e}");
    }
    s
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn check_roundtrip(enc: &MappingEncoding, ev: &Evaluator) -> Result<(), ExperimentError> {
    let back: MappingEncoding = enc
        .to_string()
        .parse()
        .map_err(|e: crate::mapping::MappingError| ExperimentError::Mapping(e.to_string()))?;
    if &back != enc {
        return Err(ExperimentError::Mapping("serialization does not round-trip".into()));
    }
    ev.check(&back)?;
    Ok(())
}

/// Runs the grid search and writes `best_mapping.txt`, `result.json`,
/// `timeline.csv`, `convergence.csv` and `grid.csv` into `cfg.out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    let (search_p, valid_p) = cfg.problems()?;
    let mut ga = cfg.search.ga.clone();
    ga.seed = cfg.search.search_seed;
    let grid = grid_search(
        &search_p,
        &cfg.search.mb_candidates,
        &cfg.search.tp_candidates,
        &ga,
        cfg.search.space,
    )?;
    let best = &grid.best;

    let search_ev = search_p.evaluator(best.mb, best.tp)?;
    check_roundtrip(&best.encoding, &search_ev)?;
    let valid_ev = valid_p.evaluator(best.mb, best.tp)?;
    let validation = valid_ev.evaluate(&best.encoding)?.mean;
    let timeline = search_ev.simulate_batch(0, &best.encoding, true)?.timeline;

    let result = RunResult {
        scenario: cfg.scenario(),
        hardware: search_p.hw.name.clone(),
        model: cfg.model_name(),
        strategy: cfg.strategy_name(),
        micro_batch_size: best.mb,
        tp: best.tp,
        mapping: best.encoding.to_string(),
        search: best.metrics,
        validation,
        grid: grid
            .table
            .iter()
            .map(|c| GridRow {
                mb: c.mb,
                tp: c.tp,
                latency: c.metrics.latency,
                energy: c.metrics.energy,
                edp: c.metrics.edp,
            })
            .collect(),
    };

    let out = &cfg.out_dir;
    ensure_dir(out)?;
    write(&out.join("best_mapping.txt"), &format!("{}\n", best.encoding))?;
    write(
        &out.join("result.json"),
        &(serde_json::to_string_pretty(&result)? + "\n"),
    )?;
    write(&out.join("timeline.csv"), &timeline_csv(&timeline))?;
    write(&out.join("convergence.csv"), &convergence_csv(&best.series))?;
    write(&out.join("grid.csv"), &grid_csv(&grid))?;
    Ok(result)
}

/// Contents of `eval_result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenario: String,
    pub hardware: String,
    pub tp: u64,
    pub mapping: String,
    pub search: Metrics,
    pub validation: Metrics,
}

fn infer_tp(model: &ModelSpec, layers: usize) -> Result<u64, ExperimentError> {
    match model {
        ModelSpec::Toy(_) => Ok(1),
        ModelSpec::Llm(a) => {
            let per_block = layers as u64 / a.num_blocks.max(1);
            if per_block * a.num_blocks != layers as u64 || per_block < 10 || !per_block.is_multiple_of(2) {
                return Err(ExperimentError::Mapping(format!(
                    "{layers} layers do not match {} blocks of the model",
                    a.num_blocks
                )));
            }
            Ok((per_block - 8) / 2)
        }
    }
}

/// Evaluates a fixed mapping on the search and validation batch sets and
/// writes `eval_result.json` and `timeline.csv`.
pub fn eval(cfg: &ExperimentConfig, mapping_text: &str) -> Result<EvalSummary, ExperimentError> {
    let enc: MappingEncoding = mapping_text
        .trim()
        .parse()
        .map_err(|e: crate::mapping::MappingError| ExperimentError::Mapping(e.to_string()))?;
    let (search_p, valid_p) = cfg.problems()?;
    let tp = infer_tp(&search_p.model, enc.layers())?;
    let search_ev = search_p.evaluator(enc.micro_batch_size, tp)?;
    let valid_ev = valid_p.evaluator(enc.micro_batch_size, tp)?;
    let summary = EvalSummary {
        scenario: cfg.scenario(),
        hardware: search_p.hw.name.clone(),
        tp,
        mapping: enc.to_string(),
        search: search_ev.evaluate(&enc)?.mean,
        validation: valid_ev.evaluate(&enc)?.mean,
    };
    let timeline = search_ev.simulate_batch(0, &enc, true)?.timeline;
    ensure_dir(&cfg.out_dir)?;
    write(
        &cfg.out_dir.join("eval_result.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    write(&cfg.out_dir.join("timeline.csv"), &timeline_csv(&timeline))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scenario: String,
    pub run: String,
    pub hardware: String,
    pub edp: f64,
    /// EDP divided by the scenario minimum.
    pub normalized_edp: f64,
}

/// Normalizes EDP per scenario so the best run of each scenario is 1.0.
///
/// Every scenario must be covered by at least two runs.
pub fn compare_results(runs: &[(String, RunResult)]) -> Result<Vec<CompareRow>, ExperimentError> {
    if runs.len() < 2 {
        return Err(ExperimentError::Compare("need at least two result sets".into()));
    }
    let mut by_scenario: BTreeMap<&str, Vec<&(String, RunResult)>> = BTreeMap::new();
    for r in runs {
        by_scenario.entry(r.1.scenario.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (scenario, group) in by_scenario {
        if group.len() < 2 {
            return Err(ExperimentError::Compare(format!(
                "scenario `{scenario}` has a single run; nothing to compare against"
            )));
        }
        let min = group.iter().map(|r| r.1.search.edp).fold(f64::INFINITY, f64::min);
        if min.is_nan() || min <= 0.0 {
            return Err(ExperimentError::Compare(format!(
                "scenario `{scenario}` has non-positive EDP"
            )));
        }
        for (run, res) in group {
            rows.push(CompareRow {
                scenario: scenario.to_string(),
                run: run.clone(),
                hardware: res.hardware.clone(),
                edp: res.search.edp,
                normalized_edp: res.search.edp / min,
            });
        }
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("scenario,run,hardware,edp,normalized_edp\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{}",
            r.scenario, r.run, r.hardware, r.edp, r.normalized_edp
        );
    }
    s
}

/// Reads `result.json` from each directory and returns the comparison CSV.
pub fn compare(dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    let runs = dirs
        .iter()
        .map(|d| {
            let res: RunResult = serde_json::from_str(&read(&d.join("result.json"))?)?;
            Ok((d.display().to_string(), res))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(compare_csv(&compare_results(&runs)?))
}
