//! Accelerator template: a mesh of compute chiplets joined by a
//! network-on-package (NoP), with DRAM reached through IO dies on the
//! package edge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HwError {
    #[error("chiplet id {id} out of range (package has {count})")]
    ChipOutOfRange { id: usize, count: usize },
    #[error("DRAM die {die} out of range (package has {count})")]
    DieOutOfRange { die: usize, count: usize },
    #[error("invalid accelerator config: {0}")]
    Invalid(String),
    #[error("unknown hardware preset `{0}` (expected WS, OS or HE)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataflow {
    #[serde(alias = "ws")]
    WS,
    #[serde(alias = "os")]
    OS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipletSpec {
    pub dataflow: Dataflow,
    pub array_rows: u64,
    pub array_cols: u64,
    pub glb_bytes: u64,
    pub freq_hz: f64,
    pub vector_ops_per_cycle: u64,
}

impl ChipletSpec {
    /// 1024 MACs as a 32x32 array, 2 MiB global buffer, 1 GHz.
    pub fn default_with(dataflow: Dataflow) -> Self {
        Self {
            dataflow,
            array_rows: 32,
            array_cols: 32,
            glb_bytes: 2 * 1024 * 1024,
            freq_hz: 1.0e9,
            vector_ops_per_cycle: 64,
        }
    }

    pub fn mac_count(&self) -> u64 {
        self.array_rows * self.array_cols
    }
}

/// Package edge an IO die is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Edge {
    West,
    East,
    North,
    South,
}

/// Per-access energy coefficients.
///
/// The defaults are placeholder magnitudes for a 12nm-class design; override
/// them from the config file when calibrated numbers are available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    /// J per MAC.
    pub e_mac: f64,
    /// J per byte of GLB traffic.
    pub e_glb: f64,
    /// J per byte of DRAM traffic.
    pub e_dram: f64,
    /// J per byte per NoP hop.
    pub e_nop_hop: f64,
    /// J per vector-unit operation.
    pub e_vector: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mac: 0.5e-12,
            e_glb: 1.5e-12,
            e_dram: 30.0e-12,
            e_nop_hop: 8.0e-12,
            e_vector: 0.5e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorConfig {
    pub name: String,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Row-major: chiplet `id` sits at `(id % grid_w, id / grid_w)`.
    pub chiplets: Vec<ChipletSpec>,
    /// Bytes per second per NoP link.
    pub nop_link_bw: f64,
    /// Router traversal latency in cycles per hop.
    pub nop_hop_latency: u64,
    pub dram_dies: usize,
    /// Bytes per second per DRAM die.
    pub dram_bw_per_die: f64,
    /// Edge each DRAM die's IO die sits on; one entry per die.
    pub io_die_edges: Vec<Edge>,
    #[serde(default)]
    pub energy: EnergyModel,
}

/// A DRAM die together with the NoP distance from a chiplet to its IO die.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramRoute {
    pub die: usize,
    pub hops: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    WS,
    OS,
    HE,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::WS, Preset::OS, Preset::HE];

    pub fn config(self) -> AcceleratorConfig {
        let (w, h) = (6, 6);
        let chiplets = (0..w * h)
            .map(|id| {
                let df = match self {
                    Preset::WS => Dataflow::WS,
                    Preset::OS => Dataflow::OS,
                    // top three rows weight-stationary, bottom three output-stationary
                    Preset::HE if id / w < 3 => Dataflow::WS,
                    Preset::HE => Dataflow::OS,
                };
                ChipletSpec::default_with(df)
            })
            .collect();
        AcceleratorConfig {
            name: self.to_string(),
            grid_w: w,
            grid_h: h,
            chiplets,
            nop_link_bw: 128.0e9,
            nop_hop_latency: 10,
            dram_dies: 4,
            dram_bw_per_die: 64.0e9,
            io_die_edges: vec![Edge::West, Edge::East, Edge::North, Edge::South],
            energy: EnergyModel::default(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::WS => "WS",
            Preset::OS => "OS",
            Preset::HE => "HE",
        })
    }
}

impl FromStr for Preset {
    type Err = HwError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "WS" => Ok(Preset::WS),
            "OS" => Ok(Preset::OS),
            "HE" => Ok(Preset::HE),
            _ => Err(HwError::UnknownPreset(s.to_string())),
        }
    }
}

/// The WS, OS and HE 6x6 packages.
pub fn presets() -> [AcceleratorConfig; 3] {
    Preset::ALL.map(Preset::config)
}

impl AcceleratorConfig {
    /// A `w x h` mesh of identical chiplets with the preset link/DRAM settings.
    pub fn uniform(w: usize, h: usize, spec: ChipletSpec) -> Self {
        let mut cfg = Preset::WS.config();
        cfg.name = format!("{w}x{h}-{:?}", spec.dataflow);
        cfg.grid_w = w;
        cfg.grid_h = h;
        cfg.chiplets = vec![spec; w * h];
        cfg
    }

    pub fn chip_count(&self) -> usize {
        self.chiplets.len()
    }

    pub fn validate(&self) -> Result<(), HwError> {
        let bad = |m: String| Err(HwError::Invalid(m));
        if self.grid_w == 0 || self.grid_h == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.grid_w * self.grid_h != self.chiplets.len() {
            return bad(format!(
                "grid {}x{} does not match {} chiplets",
                self.grid_w,
                self.grid_h,
                self.chiplets.len()
            ));
        }
        if self.dram_dies == 0 {
            return bad("at least one DRAM die is required".into());
        }
        if self.io_die_edges.len() != self.dram_dies {
            return bad(format!(
                "{} io_die_edges given for {} DRAM dies",
                self.io_die_edges.len(),
                self.dram_dies
            ));
        }
        if !(self.nop_link_bw > 0.0 && self.dram_bw_per_die > 0.0) {
            return bad("bandwidths must be positive".into());
        }
        for (id, c) in self.chiplets.iter().enumerate() {
            if c.array_rows == 0 || c.array_cols == 0 {
                return bad(format!("chiplet {id}: empty PE array"));
            }
            if c.glb_bytes == 0 {
                return bad(format!("chiplet {id}: glb_bytes must be positive"));
            }
            if c.freq_hz.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || c.vector_ops_per_cycle == 0 {
                return bad(format!(
                    "chiplet {id}: frequency and vector throughput must be positive"
                ));
            }
        }
        Ok(())
    }

    fn coords(&self, id: usize) -> Result<(usize, usize), HwError> {
        if id >= self.chiplets.len() {
            return Err(HwError::ChipOutOfRange {
                id,
                count: self.chiplets.len(),
            });
        }
        Ok((id % self.grid_w, id / self.grid_w))
    }

    /// XY-routed hop count between two chiplets.
    pub fn hop_count(&self, src: usize, dst: usize) -> Result<u32, HwError> {
        let (sx, sy) = self.coords(src)?;
        let (dx, dy) = self.coords(dst)?;
        Ok((sx.abs_diff(dx) + sy.abs_diff(dy)) as u32)
    }

    /// Hops from `chip` to the IO die of `die`: the distance to that die's
    /// package edge plus the final hop onto the IO die.
    pub fn dram_route(&self, chip: usize, die: usize) -> Result<DramRoute, HwError> {
        if die >= self.dram_dies {
            return Err(HwError::DieOutOfRange {
                die,
                count: self.dram_dies,
            });
        }
        let (x, y) = self.coords(chip)?;
        let to_edge = match self.io_die_edges[die] {
            Edge::West => x,
            Edge::East => self.grid_w - 1 - x,
            Edge::North => y,
            Edge::South => self.grid_h - 1 - y,
        };
        Ok(DramRoute {
            die,
            hops: to_edge as u32 + 1,
        })
    }

    /// Groups chiplets with identical specs so per-layer compute costs can be
    /// computed once per class. Returns the distinct specs and the class of
    /// every chiplet.
    pub fn spec_classes(&self) -> (Vec<ChipletSpec>, Vec<usize>) {
        let mut classes: Vec<ChipletSpec> = Vec::new();
        let mut of_chip = Vec::with_capacity(self.chiplets.len());
        for c in &self.chiplets {
            let idx = match classes.iter().position(|k| k == c) {
                Some(i) => i,
                None => {
                    classes.push(c.clone());
                    classes.len() - 1
                }
            };
            of_chip.push(idx);
        }
        (classes, of_chip)
    }
}
