//! Cost model of the difference-processing accelerator and its baselines:
//! multiplier-lane occupancy, a roofline-style memory stall model, and
//! relative per-operation energy constants.
//!
//! The datapath is 4-bit multiplier lanes grouped four per adder tree with
//! a shifter per lane pair; a low-class difference occupies one lane-cycle
//! per MAC, a full-class difference two (nibble pair plus shift), and a
//! dense 8-bit operand two. The tensor-core-like baseline instead has
//! uniform 8-bit lanes (one slot per MAC, no skipping).

use crate::diffengine::{self, DiffCounts, ExecMode};
use crate::graph::NodeId;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Relative energy constants; absolute joules are out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    pub e_mult4: f64,
    pub e_mult8: f64,
    pub e_add: f64,
    pub e_shift: f64,
    pub e_sram_byte: f64,
    pub e_dram_byte: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mult4: 1.0,
            e_mult8: 2.2,
            e_add: 0.3,
            e_shift: 0.05,
            e_sram_byte: 1.5,
            e_dram_byte: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwConfig {
    pub name: String,
    /// Multiplier-lane count.
    pub n_lanes: u64,
    /// 4-bit lanes pair up (with a shift) for 8-bit work; 8-bit lanes take
    /// one slot per MAC.
    pub lane_bits: u8,
    pub lanes_per_tree: u64,
    pub shifters_per_tree: u64,
    /// Dedicated full-width lanes that drain full-class work in parallel
    /// with the normal lanes (outlier-PE style). 0 disables the split.
    pub outlier_lanes: u64,
    /// DRAM bytes per cycle.
    pub dram_bw: u64,
    pub sram_bytes: u64,
    pub weights_resident: bool,
    pub pipeline_fill: u64,
    /// Sign-mask dataflow: difference boundaries under GroupNorm/SiLU cost
    /// no previous-input traffic.
    pub signmask_boundaries: bool,
    pub energy: EnergyModel,
}

impl Default for HwConfig {
    fn default() -> Self {
        Preset::Ditto.config()
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lanes == 0 || self.dram_bw == 0 || self.sram_bytes == 0 {
            return Err(Error::HwConfig(
                "lane count, DRAM bandwidth, and SRAM size must be positive".into(),
            ));
        }
        if self.lane_bits != 4 && self.lane_bits != 8 {
            return Err(Error::HwConfig(format!(
                "lane_bits must be 4 or 8, got {}",
                self.lane_bits
            )));
        }
        if self.lanes_per_tree == 0 || self.shifters_per_tree == 0 {
            return Err(Error::HwConfig("tree geometry must be positive".into()));
        }
        let e = &self.energy;
        if e.e_mult8 < 2.0 * e.e_mult4 {
            return Err(Error::HwConfig(
                "an 8-bit multiply must cost at least two 4-bit multiplies".into(),
            ));
        }
        // negated form so NaN also fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if [e.e_mult4, e.e_add, e.e_shift, e.e_sram_byte, e.e_dram_byte]
            .iter()
            .any(|&v| !(v > 0.0))
        {
            return Err(Error::HwConfig(
                "energy constants must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Whether a diff workload drains through split normal/outlier queues.
    pub fn has_outlier_split(&self) -> bool {
        self.outlier_lanes > 0
    }
}

/// The compared design points, iso-configured except for the datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Itc,
    Diffy,
    CambriconD,
    Ditto,
    DittoPlus,
}

pub const ALL_PRESETS: [Preset; 5] = [
    Preset::Itc,
    Preset::Diffy,
    Preset::CambriconD,
    Preset::Ditto,
    Preset::DittoPlus,
];

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Preset::Itc => "itc",
            Preset::Diffy => "diffy",
            Preset::CambriconD => "cambricon-d",
            Preset::Ditto => "ditto",
            Preset::DittoPlus => "ditto-plus",
        };
        f.write_str(s)
    }
}

impl Preset {
    pub fn config(&self) -> HwConfig {
        let base = HwConfig {
            name: self.to_string(),
            n_lanes: 39_398,
            lane_bits: 4,
            lanes_per_tree: 4,
            shifters_per_tree: 2,
            outlier_lanes: 0,
            dram_bw: 64,
            sram_bytes: 192 << 20,
            weights_resident: true,
            pipeline_fill: 16,
            signmask_boundaries: false,
            energy: EnergyModel::default(),
        };
        match self {
            Preset::Itc => HwConfig {
                n_lanes: 27_648,
                lane_bits: 8,
                ..base
            },
            Preset::Diffy => base,
            Preset::CambriconD => HwConfig {
                n_lanes: 38_280,
                outlier_lanes: 2_552,
                signmask_boundaries: true,
                ..base
            },
            Preset::Ditto | Preset::DittoPlus => base,
        }
    }

    /// Whether the datapath can execute difference plans at all.
    pub fn supports_diff(&self) -> bool {
        !matches!(self, Preset::Itc)
    }
}

/// Lane-cycles per MAC for one classified operand stream.
pub fn slots_for(counts: &DiffCounts, mode: ExecMode, cfg: &HwConfig) -> u64 {
    match mode {
        ExecMode::TemporalDiff | ExecMode::SpatialDiff => counts.n_low + 2 * counts.n_full,
        ExecMode::Direct => {
            let per = if cfg.lane_bits == 4 { 2 } else { 1 };
            counts.total() * per
        }
    }
}

pub fn compute_cycles(total_slots: u64, cfg: &HwConfig) -> Result<u64> {
    if cfg.n_lanes == 0 {
        return Err(Error::HwConfig("zero lanes".into()));
    }
    Ok(total_slots.div_ceil(cfg.n_lanes))
}

/// Split-queue throughput: low-class slots drain through the normal lanes
/// while full-class MACs drain through the dedicated full-width lanes.
pub fn compute_cycles_split(low_slots: u64, full_macs: u64, cfg: &HwConfig) -> Result<u64> {
    if cfg.n_lanes == 0 || cfg.outlier_lanes == 0 {
        return Err(Error::HwConfig(
            "split queue requires both lane pools".into(),
        ));
    }
    Ok(low_slots
        .div_ceil(cfg.n_lanes)
        .max(full_macs.div_ceil(cfg.outlier_lanes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Traffic {
    pub weights: u64,
    pub cur_in: u64,
    pub prev_in: u64,
    pub prev_out: u64,
    pub out: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.weights + self.cur_in + self.prev_in + self.prev_out + self.out
    }
}

impl std::ops::AddAssign for Traffic {
    fn add_assign(&mut self, o: Self) {
        self.weights += o.weights;
        self.cur_in += o.cur_in;
        self.prev_in += o.prev_in;
        self.prev_out += o.prev_out;
        self.out += o.out;
    }
}

/// Element counts of one layer execution; all sizes in elements, weights
/// in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_elems: u64,
    pub out_elems: u64,
    pub weight_bytes: u64,
}

/// Boundary work this layer performs under the materialization plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoundaryFlags {
    pub diff_calc: bool,
    pub summation: bool,
    /// Sign-mask dataflow covers this boundary, so the previous input is
    /// not re-fetched.
    pub prev_in_free: bool,
}

/// Activations move as 8-bit values; accumulators as 32-bit units.
pub fn memory_traffic(
    shape: &LayerShape,
    mode: ExecMode,
    b: &BoundaryFlags,
    cfg: &HwConfig,
) -> Traffic {
    let weights = if cfg.weights_resident && shape.weight_bytes <= cfg.sram_bytes {
        0
    } else {
        shape.weight_bytes
    };
    let mut t = Traffic {
        weights,
        cur_in: shape.in_elems,
        ..Traffic::default()
    };
    match mode {
        ExecMode::Direct | ExecMode::SpatialDiff => {
            // spatial differences are intra-tensor: no extra accesses
            t.out = shape.out_elems;
        }
        ExecMode::TemporalDiff => {
            if b.diff_calc && !b.prev_in_free {
                t.prev_in = shape.in_elems;
            }
            if b.summation {
                t.prev_out = 4 * shape.out_elems;
                t.out = shape.out_elems;
            } else {
                // stays in the accumulator domain downstream
                t.out = 4 * shape.out_elems;
            }
        }
    }
    t
}

pub fn stall_cycles(traffic_bytes: u64, compute: u64, cfg: &HwConfig) -> u64 {
    traffic_bytes.div_ceil(cfg.dram_bw).saturating_sub(compute)
}

/// Two pipeline stages (subtract+classify, queue) behind a lane-wide scan.
pub fn encoder_cycles(n_elements: u64, cfg: &HwConfig) -> u64 {
    n_elements.div_ceil(cfg.n_lanes) + 2
}

/// Vector-unit cycles for the trailing elementwise ops (non-linearities,
/// summation, requantization); each processes lane-width elements per
/// cycle.
pub fn vpu_cycles(op_elements: &[u64], cfg: &HwConfig) -> u64 {
    op_elements.iter().map(|&e| e.div_ceil(cfg.n_lanes)).sum()
}

/// One classified operand stream and how many MACs each of its elements
/// participates in. Plain layers have one item; attention decompositions
/// have one per operand delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItem {
    pub counts: DiffCounts,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub enc_cycles: u64,
    pub vpu_cycles: u64,
    pub defo_cycles: u64,
    pub pipeline_fill: u64,
    pub traffic: Traffic,
    pub bops: u64,
    pub energy: f64,
}

impl LayerCost {
    /// Pipelined total: the three feed stages overlap, stalls and the
    /// per-layer decision lookup do not.
    pub fn total_cycles(&self) -> u64 {
        self.pipeline_fill
            + self
                .compute_cycles
                .max(self.enc_cycles)
                .max(self.vpu_cycles)
            + self.stall_cycles
            + self.defo_cycles
    }

    pub const ZERO: LayerCost = LayerCost {
        compute_cycles: 0,
        stall_cycles: 0,
        enc_cycles: 0,
        vpu_cycles: 0,
        defo_cycles: 0,
        pipeline_fill: 0,
        traffic: Traffic {
            weights: 0,
            cur_in: 0,
            prev_in: 0,
            prev_out: 0,
            out: 0,
        },
        bops: 0,
        energy: 0.0,
    };
}

/// Costs one layer execution end to end.
pub fn layer_cost(
    work: &[WorkItem],
    mode: ExecMode,
    shape: &LayerShape,
    boundaries: &BoundaryFlags,
    vpu_elems: &[u64],
    cfg: &HwConfig,
) -> Result<LayerCost> {
    cfg.validate()?;
    let mut total_slots = 0u64;
    let mut low_slots = 0u64;
    let mut full_macs = 0u64;
    let mut bops = 0u64;
    let mut mult_energy = 0.0f64;
    let e = &cfg.energy;
    for item in work {
        let slots = slots_for(&item.counts, mode, cfg) * item.macs;
        total_slots += slots;
        match mode {
            ExecMode::TemporalDiff | ExecMode::SpatialDiff => {
                low_slots += item.counts.n_low * item.macs;
                full_macs += item.counts.n_full * item.macs;
                bops += diffengine::bops(&item.counts, item.macs, 8);
                mult_energy += item.counts.n_low as f64 * item.macs as f64 * e.e_mult4
                    + item.counts.n_full as f64 * item.macs as f64 * (2.0 * e.e_mult4 + e.e_shift);
            }
            ExecMode::Direct => {
                bops += diffengine::bops_direct(item.counts.total(), item.macs, 8);
                let macs = item.counts.total() as f64 * item.macs as f64;
                mult_energy += if cfg.lane_bits == 4 {
                    macs * (2.0 * e.e_mult4 + e.e_shift)
                } else {
                    macs * e.e_mult8
                };
            }
        }
    }
    let compute = if mode != ExecMode::Direct && cfg.has_outlier_split() {
        compute_cycles_split(low_slots, full_macs, cfg)?
    } else {
        compute_cycles(total_slots, cfg)?
    };
    let n_elements: u64 = work.iter().map(|w| w.counts.total()).sum();
    let enc = if mode == ExecMode::Direct {
        0
    } else {
        encoder_cycles(n_elements, cfg)
    };
    let vpu = vpu_cycles(vpu_elems, cfg);
    let traffic = memory_traffic(shape, mode, boundaries, cfg);
    // DRAM time hides behind the whole feed pipeline, not just the MAC
    // array, so the stall is measured against the overlapped stage max
    let feed = compute.max(enc).max(vpu);
    let stall = stall_cycles(traffic.total(), feed, cfg);
    // adder-tree energy approximated per slot; memory energy per byte,
    // resident weights reread from scratch each layer
    let sram_bytes = traffic.total()
        + if traffic.weights == 0 {
            shape.weight_bytes
        } else {
            0
        };
    let energy = mult_energy
        + total_slots as f64 * e.e_add
        + sram_bytes as f64 * e.e_sram_byte
        + traffic.total() as f64 * e.e_dram_byte;
    Ok(LayerCost {
        compute_cycles: compute,
        stall_cycles: stall,
        enc_cycles: enc,
        vpu_cycles: vpu,
        defo_cycles: 1,
        pipeline_fill: cfg.pipeline_fill,
        traffic,
        bops,
        energy,
    })
}

/// One report row: the cost of one layer at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub step: usize,
    pub layer: NodeId,
    pub mode: ExecMode,
    pub cost: LayerCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub preset: String,
    pub variant: String,
    pub high_similarity: bool,
    pub rows: Vec<CostRow>,
    pub total_cycles: u64,
    pub total_traffic: u64,
    pub total_energy: f64,
    pub total_bops: u64,
    /// Per-layer flow decisions after the probe steps (layer, use_diff).
    pub decisions: Vec<(NodeId, bool)>,
    /// Bit-exactness self-check verdict of the diff paths vs direct.
    pub exact: bool,
}

impl RunReport {
    pub fn from_rows(
        preset: String,
        variant: String,
        high_similarity: bool,
        rows: Vec<CostRow>,
        decisions: Vec<(NodeId, bool)>,
        exact: bool,
    ) -> Self {
        let total_cycles = rows.iter().map(|r| r.cost.total_cycles()).sum();
        let total_traffic = rows.iter().map(|r| r.cost.traffic.total()).sum();
        let total_energy = rows.iter().map(|r| r.cost.energy).sum();
        let total_bops = rows.iter().map(|r| r.cost.bops).sum();
        Self {
            preset,
            variant,
            high_similarity,
            rows,
            total_cycles,
            total_traffic,
            total_energy,
            total_bops,
            decisions,
            exact,
        }
    }

    /// CSV with one row per layer per step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "preset,variant,step,layer,mode,compute_cycles,stall_cycles,enc_cycles,vpu_cycles,defo_cycles,total_cycles,traffic_bytes,bops,energy\n",
        );
        for r in &self.rows {
            let mode = match r.mode {
                ExecMode::Direct => "direct",
                ExecMode::TemporalDiff => "temporal-diff",
                ExecMode::SpatialDiff => "spatial-diff",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.preset,
                self.variant,
                r.step,
                r.layer,
                mode,
                r.cost.compute_cycles,
                r.cost.stall_cycles,
                r.cost.enc_cycles,
                r.cost.vpu_cycles,
                r.cost.defo_cycles,
                r.cost.total_cycles(),
                r.cost.traffic.total(),
                r.cost.bops,
                r.cost.energy,
            ));
        }
        s
    }
}
