//! Temporal and spatial difference computation, zero/low/full
//! classification, and exact difference-domain execution of convolution,
//! fully-connected, and attention layers.
//!
//! The core contract: for every layer kind and every step past the first,
//! the difference-domain output equals the direct-path output exactly, as
//! 32-bit integers. Differences of two symmetric int8 values span
//! [-254, 254] and are stored sign + 8-bit magnitude, split into two
//! nibbles so the compute model only ever needs unsigned 4-bit multipliers
//! plus a shifter.

use crate::kernel;
use crate::qtensor::{AccumTensor, LinearSpec, QuantScale, QuantTensor};
use crate::tensor::dims_product;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Low means 4-bit magnitude with a separate sign (0 < |delta| <= 15);
/// Full covers 16 <= |delta| <= 254.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffClass {
    Zero,
    Low,
    Full,
}

impl DiffClass {
    pub fn of(delta: i32) -> Result<Self> {
        let mag = delta.unsigned_abs();
        match mag {
            0 => Ok(DiffClass::Zero),
            1..=15 => Ok(DiffClass::Low),
            16..=254 => Ok(DiffClass::Full),
            _ => Err(Error::DeltaOutOfRange(delta as i64)),
        }
    }
}

/// One non-zero element of a difference stream, sign-magnitude with the
/// magnitude split into nibbles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffElement {
    pub sign: i8,
    pub mag_lo: u8,
    pub mag_hi: u8,
    pub class: DiffClass,
    /// Position in the reduction order (row-major index into the tensor).
    pub index: u32,
}

impl DiffElement {
    pub fn value(&self) -> i32 {
        self.sign as i32 * (self.mag_hi as i32 * 16 + self.mag_lo as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiffCounts {
    pub n_zero: u64,
    pub n_low: u64,
    pub n_full: u64,
}

impl DiffCounts {
    pub fn total(&self) -> u64 {
        self.n_zero + self.n_low + self.n_full
    }
}

/// Encoded difference stream: zeros elided, order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedDiff {
    pub dims: Vec<usize>,
    pub elements: Vec<DiffElement>,
    pub counts: DiffCounts,
    pub scale: QuantScale,
}

impl ClassifiedDiff {
    /// Classifies a dense row-major delta vector. Every |delta| must be
    /// at most 254.
    pub fn classify(dims: Vec<usize>, deltas: &[i32], scale: QuantScale) -> Result<Self> {
        if dims_product(&dims) != deltas.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} imply {} deltas, got {}",
                dims,
                dims_product(&dims),
                deltas.len()
            )));
        }
        let mut elements = Vec::new();
        let mut counts = DiffCounts::default();
        for (i, &d) in deltas.iter().enumerate() {
            let class = DiffClass::of(d)?;
            match class {
                DiffClass::Zero => counts.n_zero += 1,
                DiffClass::Low => counts.n_low += 1,
                DiffClass::Full => counts.n_full += 1,
            }
            if class != DiffClass::Zero {
                let mag = d.unsigned_abs() as u8;
                elements.push(DiffElement {
                    sign: if d < 0 { -1 } else { 1 },
                    mag_lo: mag & 0x0f,
                    mag_hi: mag >> 4,
                    class,
                    index: i as u32,
                });
            }
        }
        Ok(Self {
            dims,
            elements,
            counts,
            scale,
        })
    }

    /// Exact reconstruction of the dense delta tensor.
    pub fn dense_deltas(&self) -> Vec<i32> {
        let mut out = vec![0i32; dims_product(&self.dims)];
        for e in &self.elements {
            out[e.index as usize] = e.value();
        }
        out
    }
}

/// Per-layer per-step execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    Direct,
    TemporalDiff,
    SpatialDiff,
}

/// Elementwise cur - prev, classified. Scales must match exactly or the
/// integer-domain difference would not be meaningful.
pub fn temporal_diff(cur: &QuantTensor, prev: &QuantTensor) -> Result<ClassifiedDiff> {
    if cur.dims != prev.dims {
        return Err(Error::ShapeMismatch(format!(
            "temporal diff dims {:?} vs {:?}",
            cur.dims, prev.dims
        )));
    }
    if cur.scale != prev.scale {
        return Err(Error::ScaleMismatch(cur.scale.value(), prev.scale.value()));
    }
    let deltas: Vec<i32> = cur
        .values
        .iter()
        .zip(&prev.values)
        .map(|(&c, &p)| c as i32 - p as i32)
        .collect();
    ClassifiedDiff::classify(cur.dims.clone(), &deltas, cur.scale)
}

/// Classifies raw activations by magnitude (the Act. series of the
/// bit-width analyses, and the stream a dense row contributes in spatial
/// difference processing).
pub fn classify_activations(q: &QuantTensor) -> ClassifiedDiff {
    let vals: Vec<i32> = q.values.iter().map(|&v| v as i32).collect();
    ClassifiedDiff::classify(q.dims.clone(), &vals, q.scale)
        .expect("int8 magnitudes are always in range")
}

/// Minimum magnitude bits to represent `delta`: 0 for zero, else
/// ceil(log2(|delta|+1)).
pub fn bit_requirement(delta: i64) -> Result<u32> {
    if delta.unsigned_abs() > 254 {
        return Err(Error::DeltaOutOfRange(delta));
    }
    Ok(64 - (delta.unsigned_abs()).leading_zeros())
}

/// prev_out + delta * W, computed over the elided stream only. Exactly
/// equals `direct_linear(cur, w)` when `d = cur - prev` and `prev_out` is
/// the exact previous-step output.
pub fn diff_linear(
    d: &ClassifiedDiff,
    w: &QuantTensor,
    prev_out: &AccumTensor,
    spec: &LinearSpec,
) -> Result<AccumTensor> {
    if d.dims != spec.input_dims() {
        return Err(Error::ShapeMismatch(format!(
            "diff dims {:?} do not match descriptor input {:?}",
            d.dims,
            spec.input_dims()
        )));
    }
    if w.dims != spec.weight_dims() {
        return Err(Error::ShapeMismatch(format!(
            "weight dims {:?} do not match descriptor weight {:?}",
            w.dims,
            spec.weight_dims()
        )));
    }
    if prev_out.dims != spec.output_dims() {
        return Err(Error::MissingPrev(format!(
            "prev_out dims {:?} do not match descriptor output {:?}",
            prev_out.dims,
            spec.output_dims()
        )));
    }
    let mut acc: Vec<i64> = prev_out.values.iter().map(|&v| v as i64).collect();
    match *spec {
        LinearSpec::Matmul { k, n, .. } => {
            for e in &d.elements {
                let i = e.index as usize / k;
                let j = e.index as usize % k;
                let dv = e.value() as i64;
                let wrow = &w.values[j * n..(j + 1) * n];
                let orow = &mut acc[i * n..(i + 1) * n];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += dv * wv as i64;
                }
            }
        }
        LinearSpec::Conv2d {
            in_ch,
            out_ch,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
        } => {
            let out = spec.output_dims();
            let (oh, ow) = (out[1], out[2]);
            for e in &d.elements {
                let idx = e.index as usize;
                let c = idx / (in_h * in_w);
                let y = (idx / in_w) % in_h;
                let x = idx % in_w;
                let dv = e.value() as i64;
                for ky in 0..kh {
                    let num_y = y + pad;
                    if num_y < ky || !(num_y - ky).is_multiple_of(stride) {
                        continue;
                    }
                    let oy = (num_y - ky) / stride;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..kw {
                        let num_x = x + pad;
                        if num_x < kx || !(num_x - kx).is_multiple_of(stride) {
                            continue;
                        }
                        let ox = (num_x - kx) / stride;
                        if ox >= ow {
                            continue;
                        }
                        for o in 0..out_ch {
                            let wv = w.values[((o * in_ch + c) * kh + ky) * kw + kx] as i64;
                            acc[(o * oh + oy) * ow + ox] += dv * wv;
                        }
                    }
                }
            }
        }
    }
    let values = acc
        .into_iter()
        .map(|v| i32::try_from(v).expect("diff accumulation exceeded 32 bits"))
        .collect();
    Ok(AccumTensor::new(spec.output_dims(), values))
}

fn transpose_i32(a: &[i32], rows: usize, cols: usize) -> Vec<i32> {
    let mut out = vec![0i32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn check_pair(cur: &QuantTensor, prev: &QuantTensor, what: &str) -> Result<()> {
    if cur.dims != prev.dims {
        return Err(Error::ShapeMismatch(format!(
            "{what} dims {:?} vs {:?}",
            cur.dims, prev.dims
        )));
    }
    if cur.scale != prev.scale {
        return Err(Error::ScaleMismatch(cur.scale.value(), prev.scale.value()));
    }
    Ok(())
}

/// Attention score update: prev_scores + Q_t * dK^T + dQ * K_prev^T, which
/// equals Q_t * K_t^T exactly (Q_t absorbs both the Q_prev*dK and dQ*dK
/// terms of the naive expansion). Serves P x V identically with (P, V)
/// substituted for (Q, K).
pub fn diff_attention_scores(
    q_cur: &QuantTensor,
    k_cur: &QuantTensor,
    q_prev: &QuantTensor,
    k_prev: &QuantTensor,
    prev_scores: &AccumTensor,
) -> Result<AccumTensor> {
    check_pair(q_cur, q_prev, "Q")?;
    check_pair(k_cur, k_prev, "K")?;
    if q_cur.dims.len() != 2 || k_cur.dims.len() != 2 || q_cur.dims[1] != k_cur.dims[1] {
        return Err(Error::ShapeMismatch(format!(
            "attention operands {:?} x {:?}",
            q_cur.dims, k_cur.dims
        )));
    }
    let (tq, d) = (q_cur.dims[0], q_cur.dims[1]);
    let tk = k_cur.dims[0];
    if prev_scores.dims != vec![tq, tk] {
        return Err(Error::MissingPrev(format!(
            "prev_scores dims {:?}, expected {:?}",
            prev_scores.dims,
            vec![tq, tk]
        )));
    }
    let dq: Vec<i32> = q_cur
        .values
        .iter()
        .zip(&q_prev.values)
        .map(|(&c, &p)| c as i32 - p as i32)
        .collect();
    let dk: Vec<i32> = k_cur
        .values
        .iter()
        .zip(&k_prev.values)
        .map(|(&c, &p)| c as i32 - p as i32)
        .collect();
    // Q_t [tq,d] x dK^T [d,tk]
    let dk_t = transpose_i32(&dk, tk, d);
    let term1 = kernel::matmul_i32(&q_cur.widened(), &dk_t, tq, d, tk);
    // dQ [tq,d] x K_prev^T [d,tk]
    let kp_t = transpose_i32(&k_prev.widened(), tk, d);
    let term2 = kernel::matmul_i32(&dq, &kp_t, tq, d, tk);
    let values = prev_scores
        .values
        .iter()
        .zip(term1.iter().zip(&term2))
        .map(|(&p, (&a, &b))| p + a + b)
        .collect();
    Ok(AccumTensor::new(vec![tq, tk], values))
}

/// Cross-attention with a verified-constant context: K' and V' act as
/// weights, so both multiplies route through [`diff_linear`]. Returns
/// (scores, context-output) accumulators.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_constant_context(
    dq: &ClassifiedDiff,
    dp: &ClassifiedDiff,
    k_ctx: &QuantTensor,
    k_ctx_prev: &QuantTensor,
    v_ctx: &QuantTensor,
    v_ctx_prev: &QuantTensor,
    prev_scores: &AccumTensor,
    prev_out: &AccumTensor,
) -> Result<(AccumTensor, AccumTensor)> {
    if k_ctx != k_ctx_prev || v_ctx != v_ctx_prev {
        return Err(Error::ContextChanged(0));
    }
    if k_ctx.dims.len() != 2 || v_ctx.dims.len() != 2 {
        return Err(Error::ShapeMismatch("context tensors must be 2-D".into()));
    }
    let (tc, d) = (k_ctx.dims[0], k_ctx.dims[1]);
    let tq = dq.dims[0];
    // scores: Q' [tq,d] x K'^T [d,tc]
    let kt_vals: Vec<i8> = {
        let mut out = vec![0i8; tc * d];
        for r in 0..tc {
            for c in 0..d {
                out[c * tc + r] = k_ctx.values[r * d + c];
            }
        }
        out
    };
    let kt = QuantTensor::new(vec![d, tc], kt_vals, k_ctx.scale)?;
    let scores = diff_linear(
        dq,
        &kt,
        prev_scores,
        &LinearSpec::Matmul { m: tq, k: d, n: tc },
    )?;
    // context output: P' [tq,tc] x V' [tc,d]
    let out = diff_linear(
        dp,
        v_ctx,
        prev_out,
        &LinearSpec::Matmul { m: tq, k: tc, n: d },
    )?;
    Ok((scores, out))
}

/// Intra-tensor differences: rows diffed against the previous row (or
/// im2col window against the previous window position), with designated
/// rows kept dense at full width. Dense-row elements enter the stream
/// classified by their own magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDiff {
    pub stream: ClassifiedDiff,
    pub rows: usize,
    pub row_len: usize,
    pub dense_rows: Vec<bool>,
}

/// Computes the spatial difference stream of a linear-layer input. For
/// matmul inputs, row 0 is dense and later rows diff against their
/// predecessor. For conv inputs the differences run between adjacent
/// im2col window positions along the innermost spatial axis, with the
/// first window of each output row dense. A single-row input degenerates
/// to all-dense without error.
pub fn spatial_diff(a: &QuantTensor, spec: &LinearSpec) -> Result<SpatialDiff> {
    if a.dims != spec.input_dims() {
        return Err(Error::ShapeMismatch(format!(
            "activation dims {:?} do not match descriptor input {:?}",
            a.dims,
            spec.input_dims()
        )));
    }
    let (mat, rows, row_len, dense_rows) = match *spec {
        LinearSpec::Matmul { m, k, .. } => {
            let mat = a.widened();
            let mut dense = vec![false; m];
            if m > 0 {
                dense[0] = true;
            }
            (mat, m, k, dense)
        }
        LinearSpec::Conv2d {
            in_ch,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            ..
        } => {
            let (mat, oh, ow) =
                kernel::im2col_i32(&a.widened(), in_ch, in_h, in_w, kh, kw, stride, pad);
            let cols = in_ch * kh * kw;
            let dense: Vec<bool> = (0..oh * ow).map(|r| r % ow == 0).collect();
            (mat, oh * ow, cols, dense)
        }
    };
    let mut deltas = vec![0i32; rows * row_len];
    for r in 0..rows {
        for c in 0..row_len {
            deltas[r * row_len + c] = if dense_rows[r] {
                mat[r * row_len + c]
            } else {
                mat[r * row_len + c] - mat[(r - 1) * row_len + c]
            };
        }
    }
    let stream = ClassifiedDiff::classify(vec![rows, row_len], &deltas, a.scale)?;
    Ok(SpatialDiff {
        stream,
        rows,
        row_len,
        dense_rows,
    })
}

/// Executes a linear layer from its spatial-difference stream. Exactly
/// equals the direct path; needs no previous-step operands.
pub fn spatial_linear(sd: &SpatialDiff, w: &QuantTensor, spec: &LinearSpec) -> Result<AccumTensor> {
    let (n_out, wmat): (usize, Vec<i32>) = match *spec {
        LinearSpec::Matmul { k, n, .. } => {
            if w.dims != vec![k, n] {
                return Err(Error::ShapeMismatch(format!(
                    "weight dims {:?}, expected [{k}, {n}]",
                    w.dims
                )));
            }
            (n, w.widened())
        }
        LinearSpec::Conv2d {
            out_ch,
            in_ch,
            kh,
            kw,
            ..
        } => {
            if w.dims != spec.weight_dims() {
                return Err(Error::ShapeMismatch(format!(
                    "weight dims {:?} do not match descriptor weight {:?}",
                    w.dims,
                    spec.weight_dims()
                )));
            }
            let cols = in_ch * kh * kw;
            (
                out_ch,
                kernel::conv_weight_as_matrix(&w.widened(), out_ch, cols),
            )
        }
    };
    if spec.reduction_len() > crate::qtensor::MAX_REDUCTION {
        return Err(Error::ReductionTooLong(
            spec.reduction_len(),
            crate::qtensor::MAX_REDUCTION,
        ));
    }
    let rows = sd.rows;
    let k = sd.row_len;
    // per-row contributions from the elided stream
    let mut out_rows = vec![0i64; rows * n_out];
    for e in &sd.stream.elements {
        let r = e.index as usize / k;
        let j = e.index as usize % k;
        let dv = e.value() as i64;
        let wrow = &wmat[j * n_out..(j + 1) * n_out];
        let orow = &mut out_rows[r * n_out..(r + 1) * n_out];
        for (o, &wv) in orow.iter_mut().zip(wrow) {
            *o += dv * wv as i64;
        }
    }
    // prefix-accumulate along non-dense rows
    for r in 1..rows {
        if !sd.dense_rows[r] {
            for j in 0..n_out {
                out_rows[r * n_out + j] += out_rows[(r - 1) * n_out + j];
            }
        }
    }
    let narrow = |v: i64| i32::try_from(v).expect("spatial accumulation exceeded 32 bits");
    match *spec {
        LinearSpec::Matmul { m, n, .. } => Ok(AccumTensor::new(
            vec![m, n],
            out_rows.into_iter().map(narrow).collect(),
        )),
        LinearSpec::Conv2d { .. } => {
            // out_rows is [oh*ow, oc]; direct layout is [oc, oh, ow]
            let out_dims = spec.output_dims();
            let (oc, oh, ow) = (out_dims[0], out_dims[1], out_dims[2]);
            let mut values = vec![0i32; oc * oh * ow];
            for p in 0..oh * ow {
                for o in 0..oc {
                    values[o * oh * ow + p] = narrow(out_rows[p * oc + o]);
                }
            }
            Ok(AccumTensor::new(out_dims, values))
        }
    }
}

/// Bit operations of a classified workload: low-class elements cost
/// 4 x w_bits per MAC, full-class 8 x w_bits, zeros nothing.
pub fn bops(counts: &DiffCounts, macs_per_element: u64, w_bits: u64) -> u64 {
    counts.n_low * macs_per_element * 4 * w_bits + counts.n_full * macs_per_element * 8 * w_bits
}

/// Dense full bit-width BOPs of the same workload.
pub fn bops_direct(n_elements: u64, macs_per_element: u64, w_bits: u64) -> u64 {
    n_elements * macs_per_element * 8 * w_bits
}

#[cfg(test)]
pub mod tests {
    use super::*;
    use crate::qtensor::{direct_linear, QuantScale};
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn s1() -> QuantScale {
        QuantScale::new(1.0).unwrap()
    }

    fn qt(dims: Vec<usize>, values: Vec<i8>) -> QuantTensor {
        QuantTensor::new(dims, values, s1()).unwrap()
    }

    fn rand_qt(rng: &mut SplitMix64, dims: Vec<usize>, lo: f64, hi: f64) -> QuantTensor {
        let n: usize = dims.iter().product();
        let values = (0..n).map(|_| rng.uniform(lo, hi) as i8).collect();
        qt(dims, values)
    }

    /// The worked 27-element example: 15 zero, 9 low, 3 full differences.
    pub fn worked_example_deltas() -> Vec<i32> {
        let mut deltas = vec![0i32; 27];
        for (i, d) in [
            (1, 3),
            (4, -7),
            (6, 15),
            (9, 1),
            (12, -15),
            (15, 8),
            (18, -2),
            (20, 5),
            (22, 11),
        ] {
            deltas[i] = d;
        }
        for (i, d) in [(2, 100), (10, -200), (25, 16)] {
            deltas[i] = d;
        }
        deltas
    }

    #[test]
    fn identical_tensors_give_empty_stream() {
        let a = qt(vec![4], vec![1, -2, 3, 0]);
        let d = temporal_diff(&a, &a).unwrap();
        assert_eq!(
            d.counts,
            DiffCounts {
                n_zero: 4,
                n_low: 0,
                n_full: 0
            }
        );
        assert!(d.elements.is_empty());
    }

    #[test]
    fn class_boundaries() {
        let cur = qt(vec![3], vec![15, 16, -100]);
        let prev = qt(vec![3], vec![0, 0, 100]);
        let d = temporal_diff(&cur, &prev).unwrap();
        assert_eq!(d.elements[0].class, DiffClass::Low);
        assert_eq!(d.elements[1].class, DiffClass::Full);
        // -200: sign -, mag_hi 12, mag_lo 8
        let e = d.elements[2];
        assert_eq!(
            (e.sign, e.mag_hi, e.mag_lo, e.class),
            (-1, 12, 8, DiffClass::Full)
        );
        assert_eq!(e.value(), -200);
    }

    #[test]
    fn scale_mismatch_is_hard_error() {
        let a = qt(vec![1], vec![1]);
        let b = QuantTensor::new(vec![1], vec![1], QuantScale::new(2.0).unwrap()).unwrap();
        assert!(matches!(
            temporal_diff(&a, &b),
            Err(Error::ScaleMismatch(..))
        ));
    }

    #[test]
    fn worked_example_counts() {
        let d = ClassifiedDiff::classify(vec![27], &worked_example_deltas(), s1()).unwrap();
        assert_eq!(
            d.counts,
            DiffCounts {
                n_zero: 15,
                n_low: 9,
                n_full: 3
            }
        );
        assert_eq!(d.elements.len(), 12);
    }

    #[test]
    fn bit_requirement_values() {
        assert_eq!(bit_requirement(0).unwrap(), 0);
        assert_eq!(bit_requirement(15).unwrap(), 4);
        assert_eq!(bit_requirement(16).unwrap(), 5);
        assert_eq!(bit_requirement(-254).unwrap(), 8);
        assert!(bit_requirement(255).is_err());
    }

    #[test]
    fn bops_worked_example() {
        let d = ClassifiedDiff::classify(vec![27], &worked_example_deltas(), s1()).unwrap();
        assert_eq!(bops(&d.counts, 1, 8), 480);
        assert_eq!(bops_direct(27, 1, 8), 1728);
        let zeroes = ClassifiedDiff::classify(vec![4], &[0; 4], s1()).unwrap();
        assert_eq!(bops(&zeroes.counts, 10, 8), 0);
    }

    #[test]
    fn diff_linear_empty_stream_returns_prev() {
        let spec = LinearSpec::Matmul { m: 1, k: 3, n: 2 };
        let w = qt(vec![3, 2], vec![1, 2, 3, 4, 5, 6]);
        let prev = AccumTensor::new(vec![1, 2], vec![10, 20]);
        let d = ClassifiedDiff::classify(vec![1, 3], &[0, 0, 0], s1()).unwrap();
        assert_eq!(diff_linear(&d, &w, &prev, &spec).unwrap(), prev);
    }

    #[test]
    fn diff_linear_identity_row() {
        let spec = LinearSpec::Matmul { m: 1, k: 3, n: 3 };
        let mut id = vec![0i8; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1;
        }
        let w = qt(vec![3, 3], id);
        let prev = AccumTensor::new(vec![1, 3], vec![7, 8, 9]);
        let d = ClassifiedDiff::classify(vec![1, 3], &[0, 1, 0], s1()).unwrap();
        assert_eq!(
            diff_linear(&d, &w, &prev, &spec).unwrap().values,
            vec![7, 9, 9]
        );
    }

    #[test]
    fn diff_linear_matches_direct_over_steps() {
        let mut rng = SplitMix64::new(23);
        let spec = LinearSpec::Matmul { m: 6, k: 6, n: 6 };
        let w = rand_qt(&mut rng, vec![6, 6], -40.0, 40.0);
        let mut prev = rand_qt(&mut rng, vec![6, 6], -50.0, 50.0);
        let mut prev_out = direct_linear(&prev, &w, &spec).unwrap();
        for _ in 0..5 {
            // drift the input a little, like adjacent sampler steps
            let values: Vec<i8> = prev
                .values
                .iter()
                .map(|&v| (v as i32 + rng.uniform(-3.0, 4.0) as i32).clamp(-127, 127) as i8)
                .collect();
            let cur = qt(vec![6, 6], values);
            let d = temporal_diff(&cur, &prev).unwrap();
            let got = diff_linear(&d, &w, &prev_out, &spec).unwrap();
            let want = direct_linear(&cur, &w, &spec).unwrap();
            assert_eq!(got, want);
            prev = cur;
            prev_out = want;
        }
    }

    #[test]
    fn diff_linear_conv_matches_direct() {
        let mut rng = SplitMix64::new(31);
        let spec = LinearSpec::Conv2d {
            in_ch: 2,
            out_ch: 3,
            in_h: 5,
            in_w: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let w = rand_qt(&mut rng, vec![3, 2, 3, 3], -30.0, 30.0);
        let prev = rand_qt(&mut rng, vec![2, 5, 4], -60.0, 60.0);
        let prev_out = direct_linear(&prev, &w, &spec).unwrap();
        let values: Vec<i8> = prev
            .values
            .iter()
            .map(|&v| (v as i32 + rng.uniform(-5.0, 6.0) as i32).clamp(-127, 127) as i8)
            .collect();
        let cur = qt(vec![2, 5, 4], values);
        let d = temporal_diff(&cur, &prev).unwrap();
        let got = diff_linear(&d, &w, &prev_out, &spec).unwrap();
        assert_eq!(got, direct_linear(&cur, &w, &spec).unwrap());
    }

    fn scores_direct(q: &QuantTensor, k: &QuantTensor) -> AccumTensor {
        let (tq, d) = (q.dims[0], q.dims[1]);
        let tk = k.dims[0];
        let kt = transpose_i32(&k.widened(), tk, d);
        AccumTensor::new(
            vec![tq, tk],
            kernel::matmul_i32_seq(&q.widened(), &kt, tq, d, tk),
        )
    }

    #[test]
    fn attention_diff_matches_direct_over_steps() {
        let mut rng = SplitMix64::new(41);
        let mut q_prev = rand_qt(&mut rng, vec![4, 8], -50.0, 50.0);
        let mut k_prev = rand_qt(&mut rng, vec![4, 8], -50.0, 50.0);
        let mut prev_scores = scores_direct(&q_prev, &k_prev);
        for _ in 0..5 {
            let drift = |t: &QuantTensor, rng: &mut SplitMix64| {
                let values: Vec<i8> = t
                    .values
                    .iter()
                    .map(|&v| (v as i32 + rng.uniform(-4.0, 5.0) as i32).clamp(-127, 127) as i8)
                    .collect();
                qt(t.dims.clone(), values)
            };
            let q = drift(&q_prev, &mut rng);
            let k = drift(&k_prev, &mut rng);
            let got = diff_attention_scores(&q, &k, &q_prev, &k_prev, &prev_scores).unwrap();
            let want = scores_direct(&q, &k);
            assert_eq!(got, want);
            q_prev = q;
            k_prev = k;
            prev_scores = want;
        }
    }

    #[test]
    fn attention_zero_delta_keeps_scores() {
        let q = qt(vec![2, 3], vec![1, 2, 3, 4, 5, 6]);
        let k = qt(vec![2, 3], vec![6, 5, 4, 3, 2, 1]);
        let prev = scores_direct(&q, &k);
        let got = diff_attention_scores(&q, &k, &q, &k, &prev).unwrap();
        assert_eq!(got, prev);
    }

    #[test]
    fn attention_from_zero_prev_is_pure_product() {
        let q = qt(vec![2, 3], vec![1, 2, 3, 4, 5, 6]);
        let k = qt(vec![2, 3], vec![6, 5, 4, 3, 2, 1]);
        let zq = qt(vec![2, 3], vec![0; 6]);
        let zk = qt(vec![2, 3], vec![0; 6]);
        let prev = AccumTensor::new(vec![2, 2], vec![0; 4]);
        let got = diff_attention_scores(&q, &k, &zq, &zk, &prev).unwrap();
        assert_eq!(got, scores_direct(&q, &k));
    }

    #[test]
    fn cross_attention_guard_on_changed_context() {
        let kc = qt(vec![2, 2], vec![1, 2, 3, 4]);
        let kc2 = qt(vec![2, 2], vec![1, 2, 3, 5]);
        let vc = qt(vec![2, 2], vec![1, 0, 0, 1]);
        let dq = ClassifiedDiff::classify(vec![2, 2], &[0; 4], s1()).unwrap();
        let dp = ClassifiedDiff::classify(vec![2, 2], &[0; 4], s1()).unwrap();
        let prev_s = AccumTensor::new(vec![2, 2], vec![0; 4]);
        let prev_o = AccumTensor::new(vec![2, 2], vec![0; 4]);
        let err = cross_attention_constant_context(&dq, &dp, &kc, &kc2, &vc, &vc, &prev_s, &prev_o);
        assert!(matches!(err, Err(Error::ContextChanged(_))));
    }

    #[test]
    fn cross_attention_zero_delta_keeps_outputs() {
        let kc = qt(vec![3, 2], vec![1, 2, 3, 4, 5, 6]);
        let vc = qt(vec![3, 2], vec![2, 1, 0, -1, 3, 2]);
        let dq = ClassifiedDiff::classify(vec![2, 2], &[0; 4], s1()).unwrap();
        let dp = ClassifiedDiff::classify(vec![2, 3], &[0; 6], s1()).unwrap();
        let prev_s = AccumTensor::new(vec![2, 3], vec![9, 8, 7, 6, 5, 4]);
        let prev_o = AccumTensor::new(vec![2, 2], vec![1, 2, 3, 4]);
        let (s, o) =
            cross_attention_constant_context(&dq, &dp, &kc, &kc, &vc, &vc, &prev_s, &prev_o)
                .unwrap();
        assert_eq!(s, prev_s);
        assert_eq!(o, prev_o);
    }

    #[test]
    fn cross_attention_matches_direct() {
        let mut rng = SplitMix64::new(77);
        let kc = rand_qt(&mut rng, vec![3, 4], -40.0, 40.0);
        let vc = rand_qt(&mut rng, vec![3, 4], -40.0, 40.0);
        let q_prev = rand_qt(&mut rng, vec![2, 4], -40.0, 40.0);
        let p_prev = rand_qt(&mut rng, vec![2, 3], -40.0, 40.0);
        let prev_s = scores_direct(&q_prev, &kc);
        let spec_pv = LinearSpec::Matmul { m: 2, k: 3, n: 4 };
        let prev_o = direct_linear(&p_prev, &vc, &spec_pv).unwrap();
        let q = rand_qt(&mut rng, vec![2, 4], -40.0, 40.0);
        let p = rand_qt(&mut rng, vec![2, 3], -40.0, 40.0);
        let dq = temporal_diff(&q, &q_prev).unwrap();
        let dp = temporal_diff(&p, &p_prev).unwrap();
        let (s, o) =
            cross_attention_constant_context(&dq, &dp, &kc, &kc, &vc, &vc, &prev_s, &prev_o)
                .unwrap();
        assert_eq!(s, scores_direct(&q, &kc));
        assert_eq!(o, direct_linear(&p, &vc, &spec_pv).unwrap());
    }

    #[test]
    fn spatial_identical_rows_all_zero_after_base() {
        let row: Vec<i8> = vec![5, -3, 7];
        let mut vals = Vec::new();
        for _ in 0..4 {
            vals.extend_from_slice(&row);
        }
        let a = qt(vec![4, 3], vals);
        let spec = LinearSpec::Matmul { m: 4, k: 3, n: 2 };
        let sd = spatial_diff(&a, &spec).unwrap();
        // base row contributes 3 non-zero classified activations; the other
        // 9 diffs are zero
        assert_eq!(sd.stream.counts.n_zero, 9);
        assert!(sd.dense_rows[0] && !sd.dense_rows[1]);
    }

    #[test]
    fn spatial_plus_one_rows_are_low() {
        let a = qt(vec![2, 3], vec![5, -3, 7, 6, -2, 8]);
        let spec = LinearSpec::Matmul { m: 2, k: 3, n: 1 };
        let sd = spatial_diff(&a, &spec).unwrap();
        let row1: Vec<_> = sd.stream.elements.iter().filter(|e| e.index >= 3).collect();
        assert_eq!(row1.len(), 3);
        assert!(row1
            .iter()
            .all(|e| e.class == DiffClass::Low && e.value() == 1));
    }

    #[test]
    fn spatial_linear_matches_direct() {
        let mut rng = SplitMix64::new(13);
        let spec = LinearSpec::Matmul { m: 8, k: 8, n: 5 };
        let a = rand_qt(&mut rng, vec![8, 8], -80.0, 80.0);
        let w = rand_qt(&mut rng, vec![8, 5], -40.0, 40.0);
        let sd = spatial_diff(&a, &spec).unwrap();
        assert_eq!(
            spatial_linear(&sd, &w, &spec).unwrap(),
            direct_linear(&a, &w, &spec).unwrap()
        );
    }

    #[test]
    fn spatial_linear_conv_matches_direct() {
        let mut rng = SplitMix64::new(17);
        let spec = LinearSpec::Conv2d {
            in_ch: 2,
            out_ch: 3,
            in_h: 6,
            in_w: 5,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let a = rand_qt(&mut rng, vec![2, 6, 5], -70.0, 70.0);
        let w = rand_qt(&mut rng, vec![3, 2, 3, 3], -30.0, 30.0);
        let sd = spatial_diff(&a, &spec).unwrap();
        assert_eq!(
            spatial_linear(&sd, &w, &spec).unwrap(),
            direct_linear(&a, &w, &spec).unwrap()
        );
    }

    #[test]
    fn spatial_single_row_is_all_dense() {
        let a = qt(vec![1, 4], vec![1, 2, 3, 4]);
        let spec = LinearSpec::Matmul { m: 1, k: 4, n: 2 };
        let sd = spatial_diff(&a, &spec).unwrap();
        assert_eq!(sd.dense_rows, vec![true]);
    }

    proptest! {
        #[test]
        fn classification_partitions(deltas in proptest::collection::vec(-254i32..=254, 1..256)) {
            let d = ClassifiedDiff::classify(vec![deltas.len()], &deltas, s1()).unwrap();
            prop_assert_eq!(d.counts.total(), deltas.len() as u64);
            // sign-magnitude reconstructs every delta
            prop_assert_eq!(d.dense_deltas(), deltas);
        }

        #[test]
        fn diff_linear_exact_on_random_pairs(
            seed in 0u64..1000,
        ) {
            let mut rng = SplitMix64::new(seed);
            let spec = LinearSpec::Matmul { m: 3, k: 5, n: 4 };
            let w = rand_qt(&mut rng, vec![5, 4], -127.0, 128.0);
            let prev = rand_qt(&mut rng, vec![3, 5], -127.0, 128.0);
            let cur = rand_qt(&mut rng, vec![3, 5], -127.0, 128.0);
            let prev_out = direct_linear(&prev, &w, &spec).unwrap();
            let d = temporal_diff(&cur, &prev).unwrap();
            let got = diff_linear(&d, &w, &prev_out, &spec).unwrap();
            prop_assert_eq!(got, direct_linear(&cur, &w, &spec).unwrap());
        }
    }
}
