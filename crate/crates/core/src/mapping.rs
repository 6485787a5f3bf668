//! Mapping encoding over the two-dimensional (micro-batch x layer)
//! execution graph.
//!
//! An encoding has three parts: the micro-batch size, a segmentation bit
//! vector over the layer axis, and a chiplet id for every
//! (micro-batch row, layer) cell.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MappingEncoding {
    pub micro_batch_size: usize,
    /// `segmentation[i]` places a segment boundary after layer `i`.
    pub segmentation: Vec<bool>,
    /// `layer_to_chip[row][layer]`.
    pub layer_to_chip: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("micro_batch_size {mb} does not divide batch size {n}")]
    Divisibility { mb: usize, n: usize },
    #[error("segmentation has length {got}, expected {expected}")]
    SegmentationLength { got: usize, expected: usize },
    #[error("layer_to_chip has {got} rows, expected {expected}")]
    RowCount { got: usize, expected: usize },
    #[error("row {row} has {got} layers, expected {expected}")]
    ColumnCount { row: usize, got: usize, expected: usize },
    #[error("cell ({row}, {layer}) maps to chiplet {chip}, package has {chips}")]
    ChipRange {
        row: usize,
        layer: usize,
        chip: usize,
        chips: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("invalid mapping: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("{kind:?} parallelism infeasible: {reason}")]
    Infeasible { kind: Parallelism, reason: String },
    #[error("malformed mapping text: {0}")]
    Parse(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// One contiguous block of cells: one micro-batch row over one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubGraph {
    pub seg_index: usize,
    pub micro_batch_id: usize,
    pub layer_span: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScheduledCell {
    pub row: usize,
    pub layer: usize,
    pub chip: usize,
}

/// The order in which cells are handed to chiplets.
pub type ScheduleOrder = Vec<ScheduledCell>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parallelism {
    DataParallel,
    ModelParallel,
    Pipeline,
}

impl Parallelism {
    pub const ALL: [Parallelism; 3] = [
        Parallelism::DataParallel,
        Parallelism::ModelParallel,
        Parallelism::Pipeline,
    ];
}

impl MappingEncoding {
    pub fn rows(&self) -> usize {
        self.layer_to_chip.len()
    }

    pub fn layers(&self) -> usize {
        self.segmentation.len() + 1
    }

    /// Layer spans of the segments, in layer order.
    pub fn segments(&self) -> Vec<Range<usize>> {
        segment_spans(&self.segmentation)
    }

    pub fn validate(&self, n: usize, m: usize, c: usize) -> Result<(), Vec<Violation>> {
        validate(self, n, m, c)
    }
}

pub(crate) fn segment_spans(seg: &[bool]) -> Vec<Range<usize>> {
    let m = seg.len() + 1;
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &cut) in seg.iter().enumerate() {
        if cut {
            spans.push(start..i + 1);
            start = i + 1;
        }
    }
    spans.push(start..m);
    spans
}

/// Collects every constraint violation of `enc` for a batch of `n`
/// instances, `m` layers and `c` chiplets.
pub fn validate(enc: &MappingEncoding, n: usize, m: usize, c: usize) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mb = enc.micro_batch_size;
    let divides = mb > 0 && n.is_multiple_of(mb);
    if !divides {
        v.push(Violation::Divisibility { mb, n });
    }
    let expected_seg = m.saturating_sub(1);
    if enc.segmentation.len() != expected_seg {
        v.push(Violation::SegmentationLength {
            got: enc.segmentation.len(),
            expected: expected_seg,
        });
    }
    if divides && enc.layer_to_chip.len() != n / mb {
        v.push(Violation::RowCount {
            got: enc.layer_to_chip.len(),
            expected: n / mb,
        });
    }
    for (row, cells) in enc.layer_to_chip.iter().enumerate() {
        if cells.len() != m {
            v.push(Violation::ColumnCount {
                row,
                got: cells.len(),
                expected: m,
            });
        }
        for (layer, &chip) in cells.iter().enumerate() {
            if chip >= c {
                v.push(Violation::ChipRange {
                    row,
                    layer,
                    chip,
                    chips: c,
                });
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Subgraphs in scheduling order: segment-major, then micro-batch row.
pub fn partition(enc: &MappingEncoding) -> Vec<SubGraph> {
    let spans = enc.segments();
    let mut out = Vec::with_capacity(spans.len() * enc.rows());
    for (seg_index, span) in spans.into_iter().enumerate() {
        for row in 0..enc.rows() {
            out.push(SubGraph {
                seg_index,
                micro_batch_id: row,
                layer_span: span.clone(),
            });
        }
    }
    out
}

/// Walks segments (outer), micro-batch rows (middle) and the layers of the
/// segment (inner).
pub fn schedule_order(enc: &MappingEncoding) -> ScheduleOrder {
    let mut order = Vec::with_capacity(enc.rows() * enc.layers());
    for sg in partition(enc) {
        let row = sg.micro_batch_id;
        for layer in sg.layer_span {
            order.push(ScheduledCell {
                row,
                layer,
                chip: enc.layer_to_chip[row][layer],
            });
        }
    }
    order
}

/// A canonical parallelism pattern laid over an arbitrary micro-batch size.
///
/// Data-parallel sends row `r` to chiplet `r mod c` with layer-first
/// scheduling; model-parallel sends layer `l` to chiplet `l mod c` with
/// layer-first scheduling; pipeline uses the model-parallel assignment with
/// micro-batch-first scheduling.
pub fn canonical_at(
    kind: Parallelism,
    n: usize,
    m: usize,
    c: usize,
    mb: usize,
) -> Result<MappingEncoding, MappingError> {
    let infeasible = |reason: String| MappingError::Infeasible { kind, reason };
    if n == 0 || m == 0 || c == 0 {
        return Err(infeasible("sizes must be positive".into()));
    }
    if mb == 0 || !n.is_multiple_of(mb) {
        return Err(infeasible(format!("micro-batch size {mb} does not divide {n}")));
    }
    let rows = n / mb;
    let (seg_bit, layer_to_chip) = match kind {
        Parallelism::DataParallel => (false, (0..rows).map(|r| vec![r % c; m]).collect()),
        Parallelism::ModelParallel => (false, vec![(0..m).map(|l| l % c).collect(); rows]),
        Parallelism::Pipeline => (true, vec![(0..m).map(|l| l % c).collect(); rows]),
    };
    Ok(MappingEncoding {
        micro_batch_size: mb,
        segmentation: vec![seg_bit; m - 1],
        layer_to_chip,
    })
}

/// The textbook encodings of data, model and pipeline parallelism.
///
/// * data: `mb = n / c`, one micro-batch per chiplet (requires `c | n`)
/// * model: `mb = n`, a single fused row, layer `l` on chiplet `l mod c`
/// * pipeline: `mb = 1`, every row maps layer `l` to chiplet `l mod c`,
///   scheduled micro-batch first
pub fn canonical(kind: Parallelism, n: usize, m: usize, c: usize) -> Result<MappingEncoding, MappingError> {
    let mb = match kind {
        Parallelism::DataParallel => {
            if c > n || !n.is_multiple_of(c) {
                return Err(MappingError::Infeasible {
                    kind,
                    reason: format!("{c} chiplets cannot evenly share a batch of {n}"),
                });
            }
            n / c
        }
        Parallelism::ModelParallel => n,
        Parallelism::Pipeline => 1,
    };
    canonical_at(kind, n, m, c, mb)
}

impl fmt::Display for MappingEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mb={}; seg=", self.micro_batch_size)?;
        for &b in &self.segmentation {
            f.write_str(if b { "1" } else { "0" })?;
        }
        f.write_str("; map=")?;
        for (r, row) in self.layer_to_chip.iter().enumerate() {
            if r > 0 {
                f.write_str("/")?;
            }
            for (l, chip) in row.iter().enumerate() {
                if l > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{chip}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for MappingEncoding {
    type Err = MappingError;

    /// Parses `mb=<k>; seg=<bits>; map=<row>/<row>/...` where each row is a
    /// comma-separated list of chiplet ids.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| MappingError::Parse(m);
        let (mut mb, mut seg, mut map) = (None, None, None);
        for field in s.trim().split(';') {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("field `{field}` lacks `=`")))?;
            let value = value.trim();
            match key.trim() {
                "mb" => mb = Some(value.parse::<usize>().map_err(|e| bad(format!("mb: {e}")))?),
                "seg" => {
                    let bits = value
                        .chars()
                        .map(|ch| match ch {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            other => Err(bad(format!("seg: unexpected `{other}`"))),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    seg = Some(bits);
                }
                "map" => {
                    let rows = value
                        .split('/')
                        .map(|row| {
                            row.split(',')
                                .map(|c| c.trim().parse::<usize>().map_err(|e| bad(format!("map: `{c}`: {e}"))))
                                .collect::<Result<Vec<_>, _>>()
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    map = Some(rows);
                }
                other => return Err(bad(format!("unknown field `{other}`"))),
            }
        }
        Ok(MappingEncoding {
            micro_batch_size: mb.ok_or_else(|| bad("missing mb".into()))?,
            segmentation: seg.ok_or_else(|| bad("missing seg".into()))?,
            layer_to_chip: map.ok_or_else(|| bad("missing map".into()))?,
        })
    }
}
