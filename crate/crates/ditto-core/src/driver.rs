//! Ties the pipeline together: quantizes a recorded trace with per-layer
//! static scales, verifies that every difference path reproduces the
//! direct path bit-exactly, and drives the cost model under the
//! execution-flow controller (including the dynamic variant, the ideal
//! oracle, and the five-preset comparison).

use crate::diffengine::{
    classify_activations, diff_attention_scores, diff_linear, spatial_diff, spatial_linear,
    temporal_diff, ExecMode,
};
use crate::flow::{
    self, analyze_graph, DefoTable, DynamicState, ExecPlan, MaterializationPlan, Variant,
};
use crate::graph::{LayerGraph, NodeId, NodeKind, NonLinKind};
use crate::hwsim::{
    layer_cost, BoundaryFlags, CostRow, HwConfig, LayerCost, LayerShape, Preset, RunReport,
    WorkItem,
};
use crate::kernel;
use crate::qtensor::{calibrate_scale, quantize, AccumTensor, LinearSpec, QuantTensor};
use crate::tensor::TensorF;
use crate::trace::Trace;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// How a linear node multiplies its operands.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    /// Conv/FC: one activation operand against a static weight.
    Linear { weight: QuantTensor },
    /// Attention product A x B^T (scores) or A x B (context); the second
    /// operand is itself an activation.
    Attention { transpose_second: bool },
}

/// Precomputed classified streams for one layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWork {
    pub direct: Vec<WorkItem>,
    /// None at the first step (no previous input exists).
    pub temporal: Option<Vec<WorkItem>>,
    pub spatial: Vec<WorkItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub id: NodeId,
    pub op: LayerOp,
    pub spec: LinearSpec,
    /// Quantized operands, indexed `[step][operand]`, under per-operand
    /// static scales calibrated from the first step.
    pub qinputs: Vec<Vec<QuantTensor>>,
    /// Exact integer direct-path output per step.
    pub direct_out: Vec<AccumTensor>,
    pub work: Vec<StepWork>,
    pub shape: LayerShape,
    /// Element counts of the trailing non-linear ops fed by this layer.
    pub vpu_base: Vec<u64>,
    pub diff_calc: bool,
    pub summation: bool,
    /// Difference boundary sits under a GroupNorm/SiLU, so sign-mask
    /// dataflow can skip the previous-input fetch.
    pub signmask_eligible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTrace {
    pub graph: LayerGraph,
    pub steps: usize,
    pub mplan: MaterializationPlan,
    pub layers: Vec<LayerInfo>,
}

fn transpose_qt(t: &QuantTensor) -> QuantTensor {
    let (r, c) = (t.dims[0], t.dims[1]);
    let mut vals = vec![0i8; r * c];
    for i in 0..r {
        for j in 0..c {
            vals[j * r + i] = t.values[i * c + j];
        }
    }
    QuantTensor::new(vec![c, r], vals, t.scale).expect("transpose preserves validity")
}

fn matmul_widened(a: &[i32], b: &[i32], m: usize, k: usize, n: usize) -> Vec<i32> {
    kernel::matmul_i32(a, b, m, k, n)
}

/// MACs each streamed input element participates in.
fn macs_of(spec: &LinearSpec) -> u64 {
    match *spec {
        LinearSpec::Matmul { n, .. } => n as u64,
        LinearSpec::Conv2d { out_ch, kh, kw, .. } => (out_ch * kh * kw) as u64,
    }
}

/// MACs per element of the spatial stream, whose conv rows are already
/// im2col windows (the kh*kw expansion is in the stream itself).
fn spatial_macs_of(spec: &LinearSpec) -> u64 {
    match *spec {
        LinearSpec::Matmul { n, .. } => n as u64,
        LinearSpec::Conv2d { out_ch, .. } => out_ch as u64,
    }
}

fn as_matrix(t: &TensorF) -> (usize, usize) {
    t.as_rows()
}

/// Reshape a recorded tensor to the operand layout the kernels expect.
fn reshape(t: &TensorF, dims: Vec<usize>) -> TensorF {
    TensorF::new(dims, t.data.clone())
}

/// The second attention operand viewed as a `[k, n]` weight matrix.
fn attn_weight_view(b: &QuantTensor, transpose_second: bool) -> QuantTensor {
    if transpose_second {
        transpose_qt(b)
    } else {
        b.clone()
    }
}

/// Quantizes every linear layer of a trace with static per-operand scales
/// calibrated on the first step, precomputing direct-path outputs and
/// classified difference streams.
pub fn quantize_trace(trace: &Trace) -> Result<QuantizedTrace> {
    let graph = &trace.graph;
    let mplan = analyze_graph(graph)?;
    let mut layers = Vec::new();
    for id in graph.linear_nodes() {
        let recs = trace.records_for(id);
        if recs.len() != trace.steps {
            return Err(Error::PlanMismatch(format!(
                "layer {id} has {} records, trace has {} steps",
                recs.len(),
                trace.steps
            )));
        }
        let fan_in = graph.inputs_of(id).len();
        for r in &recs {
            if r.tensors.len() != fan_in + 1 {
                return Err(Error::TraceFormat(format!(
                    "layer {id} record has {} tensors, expected {}",
                    r.tensors.len(),
                    fan_in + 1
                )));
            }
        }
        let node = graph.node(id);
        // operand layouts and the linear descriptor
        let (op, spec, operand_dims): (LayerOp, LinearSpec, Vec<Vec<usize>>) = match &node.kind {
            NodeKind::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad,
            } => {
                let d = &recs[0].tensors[0].dims;
                if d.len() != 3 || d[0] != *in_ch {
                    return Err(Error::ShapeMismatch(format!("conv {id} input dims {d:?}")));
                }
                let spec = LinearSpec::Conv2d {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    in_h: d[1],
                    in_w: d[2],
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                };
                let w = node.weight.as_ref().expect("conv weight");
                let wq = quantize(w, calibrate_scale(w)?)?;
                (LayerOp::Linear { weight: wq }, spec, vec![d.clone()])
            }
            NodeKind::Fc { in_dim, out_dim } => {
                let (rows, cols) = as_matrix(&recs[0].tensors[0]);
                if cols != *in_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "fc {id} row width {cols} vs {in_dim}"
                    )));
                }
                let w = node.weight.as_ref().expect("fc weight");
                let wq = quantize(w, calibrate_scale(w)?)?;
                (
                    LayerOp::Linear { weight: wq },
                    LinearSpec::Matmul {
                        m: rows,
                        k: *in_dim,
                        n: *out_dim,
                    },
                    vec![vec![rows, *in_dim]],
                )
            }
            NodeKind::AttnScore => {
                let (m, k) = as_matrix(&recs[0].tensors[0]);
                let (n, k2) = as_matrix(&recs[0].tensors[1]);
                if k != k2 {
                    return Err(Error::ShapeMismatch(format!(
                        "attention {id} widths {k} vs {k2}"
                    )));
                }
                (
                    LayerOp::Attention {
                        transpose_second: true,
                    },
                    LinearSpec::Matmul { m, k, n },
                    vec![vec![m, k], vec![n, k]],
                )
            }
            NodeKind::AttnContext => {
                let (m, k) = as_matrix(&recs[0].tensors[0]);
                let (k2, n) = as_matrix(&recs[0].tensors[1]);
                if k != k2 {
                    return Err(Error::ShapeMismatch(format!(
                        "context {id} operands {k} vs {k2}"
                    )));
                }
                (
                    LayerOp::Attention {
                        transpose_second: false,
                    },
                    LinearSpec::Matmul { m, k, n },
                    vec![vec![m, k], vec![k, n]],
                )
            }
            other => {
                return Err(Error::Graph(format!(
                    "node {id} ({other:?}) is not a linear layer"
                )))
            }
        };
        if spec.reduction_len() > crate::qtensor::MAX_REDUCTION {
            return Err(Error::ReductionTooLong(
                spec.reduction_len(),
                crate::qtensor::MAX_REDUCTION,
            ));
        }
        // static per-operand scales from the first step
        let scales: Vec<_> = (0..operand_dims.len())
            .map(|o| calibrate_scale(&recs[0].tensors[o]))
            .collect::<Result<_>>()?;
        let mut qinputs: Vec<Vec<QuantTensor>> = Vec::with_capacity(trace.steps);
        for rec in &recs {
            let mut ops = Vec::with_capacity(operand_dims.len());
            for (o, dims) in operand_dims.iter().enumerate() {
                ops.push(quantize(
                    &reshape(&rec.tensors[o], dims.clone()),
                    scales[o],
                )?);
            }
            qinputs.push(ops);
        }
        // exact direct outputs per step
        let direct_out: Vec<AccumTensor> = qinputs
            .iter()
            .map(|ops| direct_output(&op, &spec, ops))
            .collect::<Result<_>>()?;
        // classified streams per step
        let macs = macs_of(&spec);
        let mut work = Vec::with_capacity(trace.steps);
        for (s, ops) in qinputs.iter().enumerate() {
            let direct = vec![WorkItem {
                counts: classify_activations(&ops[0]).counts,
                macs,
            }];
            let spatial = vec![WorkItem {
                counts: spatial_diff(&ops[0], &spec)?.stream.counts,
                macs: spatial_macs_of(&spec),
            }];
            let temporal = if s == 0 {
                None
            } else {
                let prev = &qinputs[s - 1];
                Some(match &op {
                    LayerOp::Linear { .. } => {
                        vec![WorkItem {
                            counts: temporal_diff(&ops[0], &prev[0])?.counts,
                            macs,
                        }]
                    }
                    LayerOp::Attention { .. } => {
                        let (m, n) = match spec {
                            LinearSpec::Matmul { m, n, .. } => (m as u64, n as u64),
                            _ => unreachable!(),
                        };
                        vec![
                            WorkItem {
                                counts: temporal_diff(&ops[1], &prev[1])?.counts,
                                macs: m,
                            },
                            WorkItem {
                                counts: temporal_diff(&ops[0], &prev[0])?.counts,
                                macs: n,
                            },
                        ]
                    }
                })
            };
            work.push(StepWork {
                direct,
                temporal,
                spatial,
            });
        }
        let in_elems: u64 = qinputs[0].iter().map(|t| t.len() as u64).sum();
        let out_elems = direct_out[0].len() as u64;
        let weight_bytes = match &op {
            LayerOp::Linear { weight } => weight.len() as u64,
            LayerOp::Attention { .. } => 0,
        };
        let vpu_base: Vec<u64> = graph
            .consumers_of(id)
            .iter()
            .filter(|&&c| matches!(graph.node(c).kind, NodeKind::NonLinear(_)))
            .map(|_| out_elems)
            .collect();
        let signmask_eligible = graph.inputs_of(id).iter().any(|&p| {
            matches!(
                graph.node(p).kind,
                NodeKind::NonLinear(NonLinKind::GroupNorm { .. })
                    | NodeKind::NonLinear(NonLinKind::SiLU)
            )
        });
        layers.push(LayerInfo {
            id,
            op,
            spec,
            qinputs,
            direct_out,
            work,
            shape: LayerShape {
                in_elems,
                out_elems,
                weight_bytes,
            },
            vpu_base,
            diff_calc: mplan.needs_diff_calc.get(&id).copied().unwrap_or(true),
            summation: mplan.needs_summation.get(&id).copied().unwrap_or(true),
            signmask_eligible,
        });
    }
    Ok(QuantizedTrace {
        graph: graph.clone(),
        steps: trace.steps,
        mplan,
        layers,
    })
}

fn direct_output(op: &LayerOp, spec: &LinearSpec, ops: &[QuantTensor]) -> Result<AccumTensor> {
    match op {
        LayerOp::Linear { weight } => crate::qtensor::direct_linear(&ops[0], weight, spec),
        LayerOp::Attention { transpose_second } => {
            let (m, k, n) = match *spec {
                LinearSpec::Matmul { m, k, n } => (m, k, n),
                _ => unreachable!(),
            };
            let b = attn_weight_view(&ops[1], *transpose_second);
            let vals = matmul_widened(&ops[0].widened(), &b.widened(), m, k, n);
            Ok(AccumTensor::new(vec![m, n], vals))
        }
    }
}

/// Checks that every difference path reproduces the direct integer output
/// exactly, for every layer at every step past the first: temporal
/// differences, spatial differences, the attention decomposition, and the
/// constant-context shortcut where the second operand never changes.
pub fn verify_exactness(q: &QuantizedTrace) -> Result<()> {
    for li in &q.layers {
        for s in 0..q.steps {
            let want = &li.direct_out[s];
            let fail = || Error::ExactnessViolation {
                step: s,
                layer: li.id,
            };
            // spatial differences need no previous step
            match &li.op {
                LayerOp::Linear { weight } => {
                    let sd = spatial_diff(&li.qinputs[s][0], &li.spec)?;
                    if &spatial_linear(&sd, weight, &li.spec)? != want {
                        return Err(fail());
                    }
                }
                LayerOp::Attention { transpose_second } => {
                    let w = attn_weight_view(&li.qinputs[s][1], *transpose_second);
                    let sd = spatial_diff(&li.qinputs[s][0], &li.spec)?;
                    if &spatial_linear(&sd, &w, &li.spec)? != want {
                        return Err(fail());
                    }
                }
            }
            if s == 0 {
                continue;
            }
            let prev_out = &li.direct_out[s - 1];
            match &li.op {
                LayerOp::Linear { weight } => {
                    let d = temporal_diff(&li.qinputs[s][0], &li.qinputs[s - 1][0])?;
                    if &diff_linear(&d, weight, prev_out, &li.spec)? != want {
                        return Err(fail());
                    }
                }
                LayerOp::Attention { transpose_second } => {
                    // A x B^T decomposition; context products route through
                    // it with B transposed
                    let view = |t: &QuantTensor| {
                        if *transpose_second {
                            t.clone()
                        } else {
                            transpose_qt(t)
                        }
                    };
                    let b_cur = view(&li.qinputs[s][1]);
                    let b_prev = view(&li.qinputs[s - 1][1]);
                    let got = diff_attention_scores(
                        &li.qinputs[s][0],
                        &b_cur,
                        &li.qinputs[s - 1][0],
                        &b_prev,
                        prev_out,
                    )?;
                    if &got != want {
                        return Err(fail());
                    }
                    // constant second operand: it acts as a weight and the
                    // whole product runs through the sparse scatter path
                    if li.qinputs[s][1] == li.qinputs[s - 1][1] {
                        let w = attn_weight_view(&li.qinputs[s][1], *transpose_second);
                        let dq = temporal_diff(&li.qinputs[s][0], &li.qinputs[s - 1][0])?;
                        if &diff_linear(&dq, &w, prev_out, &li.spec)? != want {
                            return Err(fail());
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Costs one layer at one step (0-based) under a mode.
fn cost_one(li: &LayerInfo, step0: usize, mode: ExecMode, cfg: &HwConfig) -> Result<LayerCost> {
    let work: &[WorkItem] = match mode {
        ExecMode::Direct => &li.work[step0].direct,
        ExecMode::SpatialDiff => &li.work[step0].spatial,
        ExecMode::TemporalDiff => li.work[step0].temporal.as_deref().ok_or_else(|| {
            Error::PlanMismatch(format!("temporal mode at the first step, layer {}", li.id))
        })?,
    };
    let boundaries = BoundaryFlags {
        diff_calc: li.diff_calc,
        summation: li.summation,
        prev_in_free: cfg.signmask_boundaries && li.signmask_eligible,
    };
    let mut vpu = li.vpu_base.clone();
    if mode == ExecMode::TemporalDiff && li.summation {
        vpu.push(li.shape.out_elems);
    }
    layer_cost(work, mode, &li.shape, &boundaries, &vpu, cfg)
}

/// Costs a fully specified plan (no controller feedback).
pub fn run_with_plan(
    q: &QuantizedTrace,
    plan: &ExecPlan,
    cfg: &HwConfig,
    variant_label: &str,
) -> Result<RunReport> {
    cfg.validate()?;
    if plan.steps.len() != q.steps {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} steps, trace has {}",
            plan.steps.len(),
            q.steps
        )));
    }
    let mut rows = Vec::new();
    for s0 in 0..q.steps {
        for li in &q.layers {
            let mode = plan.mode(s0 + 1, li.id)?;
            let cost = cost_one(li, s0, mode, cfg)?;
            rows.push(CostRow {
                step: s0 + 1,
                layer: li.id,
                mode,
                cost,
            });
        }
    }
    Ok(RunReport::from_rows(
        cfg.name.clone(),
        variant_label.to_string(),
        false,
        rows,
        vec![],
        true,
    ))
}

/// A plan that applies one fixed rule per step to every layer.
pub fn fixed_plan(
    q: &QuantizedTrace,
    mode_for_step: impl Fn(usize) -> ExecMode,
    variant: Variant,
) -> ExecPlan {
    let steps = (1..=q.steps)
        .map(|s| {
            q.layers
                .iter()
                .map(|l| (l.id, mode_for_step(s)))
                .collect::<BTreeMap<_, _>>()
        })
        .collect();
    ExecPlan { variant, steps }
}

/// The exhaustive oracle: per layer per step, whichever of the fallback
/// mode and temporal differences is cheaper (ties keep the fallback).
pub fn ideal_plan(q: &QuantizedTrace, cfg: &HwConfig, fallback: ExecMode) -> Result<ExecPlan> {
    let mut steps = Vec::with_capacity(q.steps);
    for s0 in 0..q.steps {
        let mut modes = BTreeMap::new();
        for li in &q.layers {
            let mode = if s0 == 0 {
                fallback
            } else {
                let fb = cost_one(li, s0, fallback, cfg)?.total_cycles();
                let td = cost_one(li, s0, ExecMode::TemporalDiff, cfg)?.total_cycles();
                if td < fb {
                    ExecMode::TemporalDiff
                } else {
                    fallback
                }
            };
            modes.insert(li.id, mode);
        }
        steps.push(modes);
    }
    Ok(ExecPlan {
        variant: Variant::Ideal,
        steps,
    })
}

/// Runs a variant end to end: probe steps feed the decision table, later
/// steps follow it (with one-way dynamic overrides), and every executed
/// difference path is checked bit-exact against the direct path first.
pub fn run_variant(
    q: &QuantizedTrace,
    variant: Variant,
    cfg: &HwConfig,
) -> Result<(RunReport, ExecPlan)> {
    cfg.validate()?;
    verify_exactness(q)?;
    if variant == Variant::Ideal {
        let plan = ideal_plan(q, cfg, ExecMode::Direct)?;
        let report = run_with_plan(q, &plan, cfg, "ideal")?;
        return Ok((report, plan));
    }
    let layer_ids: Vec<NodeId> = q.layers.iter().map(|l| l.id).collect();
    let mut table = DefoTable::default();
    let mut dynamic = DynamicState::default();
    let mut decided = false;
    let mut rows = Vec::new();
    let mut plan_steps = Vec::with_capacity(q.steps);
    for s0 in 0..q.steps {
        let step = s0 + 1;
        if step >= 3 && !decided {
            table.decide_flow()?;
            decided = true;
        }
        let modes = flow::plan_for_step(step, variant, &table, &layer_ids, Some(&dynamic))?;
        for li in &q.layers {
            let mode = modes[&li.id];
            let mut cost = cost_one(li, s0, mode, cfg)?;
            if step <= 2 {
                table.record_step_cycles(step, li.id, cost.total_cycles())?;
                // table update energy, once per write
                cost.energy += cfg.energy.e_add;
            } else if variant == Variant::DynamicDitto && mode == ExecMode::TemporalDiff {
                dynamic.observe(li.id, cost.total_cycles(), &table);
            }
            rows.push(CostRow {
                step,
                layer: li.id,
                mode,
                cost,
            });
        }
        plan_steps.push(modes);
    }
    let decisions = table
        .entries
        .iter()
        .map(|(&l, e)| (l, e.use_diff))
        .collect();
    let plan = ExecPlan {
        variant,
        steps: plan_steps,
    };
    flow::check_plan_legality(&q.graph, &plan, &q.mplan)?;
    let report = RunReport::from_rows(
        cfg.name.clone(),
        variant.to_string(),
        false,
        rows,
        decisions,
        true,
    );
    Ok((report, plan))
}

/// One comparison row, normalized to the tensor-core baseline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompareRow {
    pub preset: String,
    pub variant: String,
    pub cycles: u64,
    pub cycles_norm: f64,
    pub energy_norm: f64,
    pub traffic_norm: f64,
    pub bops_norm: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompareMatrix {
    pub rows: Vec<CompareRow>,
    /// Static-controller accuracy vs the exhaustive oracle over
    /// (layer, step >= 3) pairs: (matching, total).
    pub defo_accuracy: (u64, u64),
}

impl CompareMatrix {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("preset,variant,cycles,cycles_norm,energy_norm,traffic_norm,bops_norm\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.preset,
                r.variant,
                r.cycles,
                r.cycles_norm,
                r.energy_norm,
                r.traffic_norm,
                r.bops_norm
            ));
        }
        s
    }
}

/// Fraction of (layer, step >= 3) pairs where a plan agrees with the
/// oracle plan.
pub fn plan_agreement(plan: &ExecPlan, ideal: &ExecPlan) -> (u64, u64) {
    let mut matching = 0;
    let mut total = 0;
    for (step_idx, modes) in plan.steps.iter().enumerate().skip(2) {
        for (layer, mode) in modes {
            if let Some(imode) = ideal.steps.get(step_idx).and_then(|m| m.get(layer)) {
                total += 1;
                if imode == mode {
                    matching += 1;
                }
            }
        }
    }
    (matching, total)
}

/// Runs every preset with its matching variant and normalizes to the
/// tensor-core baseline.
pub fn compare(q: &QuantizedTrace) -> Result<(CompareMatrix, Vec<RunReport>)> {
    verify_exactness(q)?;
    let mut reports = Vec::new();
    let mut static_plan = None;
    for preset in crate::hwsim::ALL_PRESETS {
        let cfg = preset.config();
        let report = match preset {
            Preset::Itc => {
                let plan = fixed_plan(q, |_| ExecMode::Direct, Variant::Ditto);
                run_with_plan(q, &plan, &cfg, "all-direct")?
            }
            Preset::Diffy => {
                let plan = fixed_plan(q, |_| ExecMode::SpatialDiff, Variant::DittoPlus);
                run_with_plan(q, &plan, &cfg, "all-spatial-diff")?
            }
            Preset::CambriconD => {
                let plan = fixed_plan(
                    q,
                    |s| {
                        if s == 1 {
                            ExecMode::Direct
                        } else {
                            ExecMode::TemporalDiff
                        }
                    },
                    Variant::Ditto,
                );
                run_with_plan(q, &plan, &cfg, "all-temporal-diff")?
            }
            Preset::Ditto => {
                let (report, plan) = run_variant(q, Variant::Ditto, &cfg)?;
                static_plan = Some((plan, cfg.clone()));
                report
            }
            Preset::DittoPlus => run_variant(q, Variant::DittoPlus, &cfg)?.0,
        };
        reports.push(report);
    }
    let base = &reports[0];
    let norm = |v: f64, b: f64| if b > 0.0 { v / b } else { 0.0 };
    let rows = reports
        .iter()
        .map(|r| CompareRow {
            preset: r.preset.clone(),
            variant: r.variant.clone(),
            cycles: r.total_cycles,
            cycles_norm: norm(r.total_cycles as f64, base.total_cycles as f64),
            energy_norm: norm(r.total_energy, base.total_energy),
            traffic_norm: norm(r.total_traffic as f64, base.total_traffic as f64),
            bops_norm: norm(r.total_bops as f64, base.total_bops as f64),
        })
        .collect();
    let (plan, cfg) = static_plan.expect("static run present");
    let ideal = ideal_plan(q, &cfg, ExecMode::Direct)?;
    let defo_accuracy = plan_agreement(&plan, &ideal);
    Ok((
        CompareMatrix {
            rows,
            defo_accuracy,
        },
        reports,
    ))
}
