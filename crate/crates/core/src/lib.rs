//! Mapping space exploration for LLM inference on multi-chiplet accelerators.
//!
//! Serving batches are expanded into layer graphs ([`modelgraph`]), mapped
//! onto a chiplet grid ([`mapping`]), costed per layer ([`layercost`]) and
//! simulated end to end ([`evaluator`]). [`search`] explores mappings with a
//! genetic algorithm.

pub mod evaluator;
#[cfg(feature = "cli")]
pub mod experiment;
pub mod hw;
pub mod layercost;
pub mod mapping;
pub mod modelgraph;
pub mod search;
pub mod trace;
