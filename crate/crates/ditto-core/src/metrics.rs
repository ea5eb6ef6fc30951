//! Statistical analyses of recorded traces: cosine similarity between
//! steps and within tensors, value-range comparison, bit-width
//! histograms, and relative BOPs of the difference modes.

use crate::diffengine::{bit_requirement, bops, bops_direct, spatial_diff};
use crate::driver::{LayerInfo, QuantizedTrace};
use crate::graph::NodeId;
use crate::trace::Trace;
use crate::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;

/// Cosine similarity of two equal-length vectors, accumulated in f64.
/// Defined as 0 when either vector is all zeros.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    match cosine_checked(a, b)? {
        Some(v) => Ok(v),
        None => Ok(0.0),
    }
}

/// Like [`cosine`] but distinguishes the undefined (zero-vector) case so
/// report means can exclude it.
fn cosine_checked(a: &[f32], b: &[f32]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine over lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some(dot / (na.sqrt() * nb.sqrt())))
}

/// Running mean over defined values only.
#[derive(Debug, Clone, Copy, Default)]
struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    fn push(&mut self, v: Option<f64>) -> Option<f64> {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
        v
    }

    fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSimilarity {
    pub layer: NodeId,
    pub step: usize,
    pub value: f64,
}

/// Per-layer temporal and spatial cosine similarity over a float trace.
/// Spatial similarity is reported at two granularities since neither is
/// canonical: adjacent rows, and adjacent non-overlapping windows within
/// a row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub temporal: Vec<PairSimilarity>,
    pub spatial_rows: Vec<PairSimilarity>,
    pub spatial_windows: Vec<PairSimilarity>,
    pub temporal_mean: f64,
    pub spatial_row_mean: f64,
    pub spatial_window_mean: f64,
    /// Mean over both spatial granularities combined.
    pub spatial_mean: f64,
    /// Pairs skipped because one side was an all-zero vector.
    pub zero_pairs_excluded: u64,
}

const WINDOW: usize = 8;

/// Cosine between the first input of every linear layer at adjacent
/// steps, and between adjacent rows / windows within each such input.
pub fn similarity_report(trace: &Trace) -> Result<SimilarityReport> {
    let mut temporal = Vec::new();
    let mut spatial_rows = Vec::new();
    let mut spatial_windows = Vec::new();
    let mut t_mean = Mean::default();
    let mut r_mean = Mean::default();
    let mut w_mean = Mean::default();
    let mut s_mean = Mean::default();
    let mut excluded = 0u64;
    for id in trace.linear_layers() {
        let recs = trace.records_for(id);
        for pair in recs.windows(2) {
            let (prev, cur) = (&pair[0].tensors[0], &pair[1].tensors[0]);
            match t_mean.push(cosine_checked(&prev.data, &cur.data)?) {
                Some(v) => temporal.push(PairSimilarity {
                    layer: id,
                    step: pair[1].step as usize,
                    value: v,
                }),
                None => excluded += 1,
            }
        }
        for rec in &recs {
            let t = &rec.tensors[0];
            let (rows, width) = t.as_rows();
            let mut row_pairs = Mean::default();
            let mut win_pairs = Mean::default();
            for i in 0..rows.saturating_sub(1) {
                let a = &t.data[i * width..(i + 1) * width];
                let b = &t.data[(i + 1) * width..(i + 2) * width];
                if row_pairs.push(cosine_checked(a, b)?).is_none() {
                    excluded += 1;
                }
            }
            let w = WINDOW.min(width);
            if w > 0 {
                for i in 0..rows {
                    let row = &t.data[i * width..(i + 1) * width];
                    let windows: Vec<&[f32]> = row.chunks_exact(w).collect();
                    for pair in windows.windows(2) {
                        if win_pairs.push(cosine_checked(pair[0], pair[1])?).is_none() {
                            excluded += 1;
                        }
                    }
                }
            }
            if row_pairs.n > 0 {
                let v = row_pairs.value();
                spatial_rows.push(PairSimilarity {
                    layer: id,
                    step: rec.step as usize,
                    value: v,
                });
                r_mean.push(Some(v));
                s_mean.sum += row_pairs.sum;
                s_mean.n += row_pairs.n;
            }
            if win_pairs.n > 0 {
                let v = win_pairs.value();
                spatial_windows.push(PairSimilarity {
                    layer: id,
                    step: rec.step as usize,
                    value: v,
                });
                w_mean.push(Some(v));
                s_mean.sum += win_pairs.sum;
                s_mean.n += win_pairs.n;
            }
        }
    }
    Ok(SimilarityReport {
        temporal,
        spatial_rows,
        spatial_windows,
        temporal_mean: t_mean.value(),
        spatial_row_mean: r_mean.value(),
        spatial_window_mean: w_mean.value(),
        spatial_mean: s_mean.value(),
        zero_pairs_excluded: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeRow {
    pub layer: NodeId,
    pub step: usize,
    /// max - min of the dequantized first input.
    pub act_range: f64,
    /// max - min of the dequantized temporal difference at this step.
    pub diff_range: f64,
    /// act_range / diff_range, absent when the diff range is 0.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRangeSummary {
    pub layer: NodeId,
    pub mean_act_range: f64,
    pub mean_diff_range: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeReport {
    pub rows: Vec<RangeRow>,
    pub layers: Vec<LayerRangeSummary>,
}

fn int_range(values: impl Iterator<Item = i32> + Clone) -> f64 {
    let max = values.clone().max().unwrap_or(0);
    let min = values.min().unwrap_or(0);
    (max - min) as f64
}

/// Value range of activations vs temporal differences, per layer and
/// step (steps >= 2, where a difference exists).
pub fn range_report(q: &QuantizedTrace) -> RangeReport {
    let mut rows = Vec::new();
    let mut layers = Vec::new();
    for li in &q.layers {
        let mut act = Mean::default();
        let mut diff = Mean::default();
        for s in 1..q.steps {
            let cur = &li.qinputs[s][0];
            let prev = &li.qinputs[s - 1][0];
            let scale = cur.scale.value();
            let act_range = int_range(cur.values.iter().map(|&v| v as i32)) * scale;
            let diff_range = int_range(
                cur.values
                    .iter()
                    .zip(&prev.values)
                    .map(|(&c, &p)| c as i32 - p as i32),
            ) * scale;
            act.push(Some(act_range));
            diff.push(Some(diff_range));
            let ratio = (diff_range > 0.0).then(|| act_range / diff_range);
            rows.push(RangeRow {
                layer: li.id,
                step: s,
                act_range,
                diff_range,
                ratio,
            });
        }
        let (ma, md) = (act.value(), diff.value());
        layers.push(LayerRangeSummary {
            layer: li.id,
            mean_act_range: ma,
            mean_diff_range: md,
            ratio: (md > 0.0).then(|| ma / md),
        });
    }
    RangeReport { rows, layers }
}

/// Fractions of a value stream needing 0, 1-4, or 5-8 magnitude bits.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Histogram {
    pub zero: f64,
    pub low: f64,
    pub full: f64,
    pub count: u64,
}

/// Buckets a dense value stream by [`bit_requirement`].
pub fn bitwidth_histogram(values: &[i32]) -> Result<Histogram> {
    let (mut zero, mut low, mut full) = (0u64, 0u64, 0u64);
    for &v in values {
        match bit_requirement(v as i64)? {
            0 => zero += 1,
            1..=4 => low += 1,
            _ => full += 1,
        }
    }
    let count = values.len() as u64;
    let frac = |n: u64| {
        if count == 0 {
            0.0
        } else {
            n as f64 / count as f64
        }
    };
    Ok(Histogram {
        zero: frac(zero),
        low: frac(low),
        full: frac(full),
        count,
    })
}

/// Bit-width histograms of the three streams a quantized trace induces:
/// raw activations, temporal differences, and spatial differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitwidthReport {
    pub activations: Histogram,
    pub temporal: Histogram,
    pub spatial: Histogram,
}

fn operand_deltas(li: &LayerInfo, step: usize, operand: usize) -> Vec<i32> {
    li.qinputs[step][operand]
        .values
        .iter()
        .zip(&li.qinputs[step - 1][operand].values)
        .map(|(&c, &p)| c as i32 - p as i32)
        .collect()
}

/// Histograms every linear-layer operand across all steps; spatial
/// differences are taken over the first operand's row/window stream.
pub fn bitwidth_report(q: &QuantizedTrace) -> Result<BitwidthReport> {
    let mut acts = Vec::new();
    let mut temporal = Vec::new();
    let mut spatial = Vec::new();
    for li in &q.layers {
        for s in 0..q.steps {
            for op in &li.qinputs[s] {
                acts.extend(op.values.iter().map(|&v| v as i32));
            }
            if s > 0 {
                for operand in 0..li.qinputs[s].len() {
                    temporal.extend(operand_deltas(li, s, operand));
                }
            }
            spatial.extend(
                spatial_diff(&li.qinputs[s][0], &li.spec)?
                    .stream
                    .dense_deltas(),
            );
        }
    }
    Ok(BitwidthReport {
        activations: bitwidth_histogram(&acts)?,
        temporal: bitwidth_histogram(&temporal)?,
        spatial: bitwidth_histogram(&spatial)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BopsRow {
    pub step: usize,
    pub direct: u64,
    pub temporal: u64,
    pub spatial: u64,
    pub temporal_ratio: f64,
    pub spatial_ratio: f64,
}

/// BOPs of each processing mode relative to dense 8-bit direct
/// processing; aggregates cover steps >= 2 (where a temporal difference
/// exists).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BopsReport {
    pub per_step: Vec<BopsRow>,
    pub temporal_ratio: f64,
    pub spatial_ratio: f64,
}

const WEIGHT_BITS: u64 = 8;

/// Relative BOPs per step and aggregated. At the first step no previous
/// input exists, so the temporal column falls back to direct cost there.
pub fn relative_bops(q: &QuantizedTrace) -> BopsReport {
    let mut per_step = Vec::new();
    let (mut agg_d, mut agg_t, mut agg_s) = (0u64, 0u64, 0u64);
    for s in 0..q.steps {
        let (mut direct, mut temporal, mut spatial) = (0u64, 0u64, 0u64);
        for li in &q.layers {
            let w = &li.work[s];
            for item in &w.direct {
                direct += bops_direct(item.counts.total(), item.macs, WEIGHT_BITS);
            }
            match &w.temporal {
                Some(items) => {
                    for item in items {
                        temporal += bops(&item.counts, item.macs, WEIGHT_BITS);
                    }
                }
                None => {
                    temporal += w
                        .direct
                        .iter()
                        .map(|i| bops_direct(i.counts.total(), i.macs, WEIGHT_BITS))
                        .sum::<u64>()
                }
            }
            for item in &w.spatial {
                spatial += bops(&item.counts, item.macs, WEIGHT_BITS);
            }
        }
        if s > 0 {
            agg_d += direct;
            agg_t += temporal;
            agg_s += spatial;
        }
        let ratio = |n: u64| {
            if direct == 0 {
                0.0
            } else {
                n as f64 / direct as f64
            }
        };
        per_step.push(BopsRow {
            step: s,
            direct,
            temporal,
            spatial,
            temporal_ratio: ratio(temporal),
            spatial_ratio: ratio(spatial),
        });
    }
    let agg = |n: u64| {
        if agg_d == 0 {
            0.0
        } else {
            n as f64 / agg_d as f64
        }
    };
    BopsReport {
        per_step,
        temporal_ratio: agg(agg_t),
        spatial_ratio: agg(agg_s),
    }
}

// --- CSV emission (long format: model,layer,step,metric,value) ---

pub const CSV_HEADER: &str = "model,layer,step,metric,value";

fn csv_row(
    out: &mut String,
    model: &str,
    layer: impl std::fmt::Display,
    step: impl std::fmt::Display,
    metric: &str,
    value: f64,
) {
    writeln!(out, "{model},{layer},{step},{metric},{value}").expect("write to string");
}

impl SimilarityReport {
    pub fn to_csv(&self, model: &str) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for p in &self.temporal {
            csv_row(&mut out, model, p.layer, p.step, "temporal_cosine", p.value);
        }
        for p in &self.spatial_rows {
            csv_row(
                &mut out,
                model,
                p.layer,
                p.step,
                "spatial_row_cosine",
                p.value,
            );
        }
        for p in &self.spatial_windows {
            csv_row(
                &mut out,
                model,
                p.layer,
                p.step,
                "spatial_window_cosine",
                p.value,
            );
        }
        csv_row(
            &mut out,
            model,
            "",
            "",
            "temporal_cosine_mean",
            self.temporal_mean,
        );
        csv_row(
            &mut out,
            model,
            "",
            "",
            "spatial_row_cosine_mean",
            self.spatial_row_mean,
        );
        csv_row(
            &mut out,
            model,
            "",
            "",
            "spatial_window_cosine_mean",
            self.spatial_window_mean,
        );
        csv_row(
            &mut out,
            model,
            "",
            "",
            "spatial_cosine_mean",
            self.spatial_mean,
        );
        csv_row(
            &mut out,
            model,
            "",
            "",
            "zero_pairs_excluded",
            self.zero_pairs_excluded as f64,
        );
        out
    }
}

impl RangeReport {
    pub fn to_csv(&self, model: &str) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            csv_row(&mut out, model, r.layer, r.step, "act_range", r.act_range);
            csv_row(&mut out, model, r.layer, r.step, "diff_range", r.diff_range);
            if let Some(ratio) = r.ratio {
                csv_row(&mut out, model, r.layer, r.step, "range_ratio", ratio);
            }
        }
        for l in &self.layers {
            csv_row(
                &mut out,
                model,
                l.layer,
                "",
                "mean_act_range",
                l.mean_act_range,
            );
            csv_row(
                &mut out,
                model,
                l.layer,
                "",
                "mean_diff_range",
                l.mean_diff_range,
            );
            if let Some(ratio) = l.ratio {
                csv_row(&mut out, model, l.layer, "", "mean_range_ratio", ratio);
            }
        }
        out
    }
}

impl BitwidthReport {
    pub fn to_csv(&self, model: &str) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (name, h) in [
            ("activation", &self.activations),
            ("temporal", &self.temporal),
            ("spatial", &self.spatial),
        ] {
            csv_row(
                &mut out,
                model,
                "",
                "",
                &format!("{name}_zero_frac"),
                h.zero,
            );
            csv_row(&mut out, model, "", "", &format!("{name}_low_frac"), h.low);
            csv_row(
                &mut out,
                model,
                "",
                "",
                &format!("{name}_full_frac"),
                h.full,
            );
        }
        out
    }
}

impl BopsReport {
    pub fn to_csv(&self, model: &str) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.per_step {
            csv_row(
                &mut out,
                model,
                "",
                r.step,
                "relative_bops_temporal",
                r.temporal_ratio,
            );
            csv_row(
                &mut out,
                model,
                "",
                r.step,
                "relative_bops_spatial",
                r.spatial_ratio,
            );
        }
        csv_row(
            &mut out,
            model,
            "",
            "",
            "relative_bops_temporal_mean",
            self.temporal_ratio,
        );
        csv_row(
            &mut out,
            model,
            "",
            "",
            "relative_bops_spatial_mean",
            self.spatial_ratio,
        );
        out
    }
}
