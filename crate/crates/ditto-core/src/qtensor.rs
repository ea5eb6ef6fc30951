//! Quantized tensor representation and the exact integer reference kernels
//! that serve as ground truth for all difference-domain execution.
//!
//! Quantization is per-layer symmetric: one positive scale shared by the
//! whole tensor, values clamped to [-127, 127] (never -128, so difference
//! magnitudes fit an 8-bit sign-magnitude split), rounding half away from
//! zero.

use crate::kernel;
use crate::tensor::{dims_product, TensorF};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Longest reduction allowed through a 32-bit accumulator at desk scale.
pub const MAX_REDUCTION: usize = 1 << 15;

pub const QMAX: i32 = 127;

/// Activation units per integer step. Always positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScale(f64);

impl QuantScale {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Calibration(format!(
                "scale must be positive and finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Signed 8-bit tensor with a shared symmetric scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub dims: Vec<usize>,
    pub values: Vec<i8>,
    pub scale: QuantScale,
}

impl QuantTensor {
    pub fn new(dims: Vec<usize>, values: Vec<i8>, scale: QuantScale) -> Result<Self> {
        if dims_product(&dims) != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                dims_product(&dims),
                values.len()
            )));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::ShapeMismatch(
                "value -128 outside symmetric range [-127, 127]".into(),
            ));
        }
        Ok(Self {
            dims,
            values,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn widened(&self) -> Vec<i32> {
        self.values.iter().map(|&v| v as i32).collect()
    }
}

/// Exact 32-bit integer accumulator outputs of a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumTensor {
    pub dims: Vec<usize>,
    pub values: Vec<i32>,
}

impl AccumTensor {
    pub fn new(dims: Vec<usize>, values: Vec<i32>) -> Self {
        assert_eq!(dims_product(&dims), values.len());
        Self { dims, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Shape descriptor of a linear layer operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearSpec {
    /// [m,k] activation times [k,n] weight.
    Matmul { m: usize, k: usize, n: usize },
    /// [in_ch,in_h,in_w] activation with [out_ch,in_ch,kh,kw] weight.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
}

impl LinearSpec {
    pub fn input_dims(&self) -> Vec<usize> {
        match *self {
            LinearSpec::Matmul { m, k, .. } => vec![m, k],
            LinearSpec::Conv2d {
                in_ch, in_h, in_w, ..
            } => vec![in_ch, in_h, in_w],
        }
    }

    pub fn output_dims(&self) -> Vec<usize> {
        match *self {
            LinearSpec::Matmul { m, n, .. } => vec![m, n],
            LinearSpec::Conv2d {
                out_ch,
                in_h,
                in_w,
                kh,
                kw,
                stride,
                pad,
                ..
            } => {
                let oh = (in_h + 2 * pad - kh) / stride + 1;
                let ow = (in_w + 2 * pad - kw) / stride + 1;
                vec![out_ch, oh, ow]
            }
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            LinearSpec::Matmul { k, n, .. } => vec![k, n],
            LinearSpec::Conv2d {
                out_ch,
                in_ch,
                kh,
                kw,
                ..
            } => vec![out_ch, in_ch, kh, kw],
        }
    }

    /// Length of the dot product behind one output element.
    pub fn reduction_len(&self) -> usize {
        match *self {
            LinearSpec::Matmul { k, .. } => k,
            LinearSpec::Conv2d { in_ch, kh, kw, .. } => in_ch * kh * kw,
        }
    }

    /// MACs each input element of the reduction operand participates in.
    pub fn macs_per_element(&self) -> u64 {
        match *self {
            LinearSpec::Matmul { n, .. } => n as u64,
            LinearSpec::Conv2d { out_ch, .. } => out_ch as u64,
        }
    }

    /// Total MAC count of the dense operation.
    pub fn total_macs(&self) -> u64 {
        match *self {
            LinearSpec::Matmul { m, k, n } => (m * k * n) as u64,
            LinearSpec::Conv2d {
                out_ch,
                in_ch,
                kh,
                kw,
                ..
            } => {
                let out = self.output_dims();
                (out[1] * out[2] * out_ch * in_ch * kh * kw) as u64
            }
        }
    }

    fn check_reduction(&self) -> Result<()> {
        let k = self.reduction_len();
        if k > MAX_REDUCTION {
            return Err(Error::ReductionTooLong(k, MAX_REDUCTION));
        }
        Ok(())
    }
}

/// Symmetric absmax calibration: scale = max(|samples|)/127, or 1 for an
/// all-zero sample set.
pub fn calibrate_scale(samples: &TensorF) -> Result<QuantScale> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty sample tensor".into()));
    }
    samples
        .check_finite()
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let absmax = samples
        .data
        .iter()
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if absmax == 0.0 {
        QuantScale::new(1.0)
    } else {
        QuantScale::new(absmax / QMAX as f64)
    }
}

fn round_half_away(v: f64) -> f64 {
    if v >= 0.0 {
        (v + 0.5).floor()
    } else {
        (v - 0.5).ceil()
    }
}

/// q_i = clamp(round(x_i / s), -127, 127) with half rounding away from zero.
pub fn quantize(x: &TensorF, scale: QuantScale) -> Result<QuantTensor> {
    x.check_finite()?;
    let values = x
        .data
        .iter()
        .map(|&v| {
            round_half_away(v as f64 / scale.value()).clamp(-(QMAX as f64), QMAX as f64) as i8
        })
        .collect();
    QuantTensor::new(x.dims.clone(), values, scale)
}

/// x_i = q_i * s.
pub fn dequantize(q: &QuantTensor) -> TensorF {
    let data = q
        .values
        .iter()
        .map(|&v| (v as f64 * q.scale.value()) as f32)
        .collect();
    TensorF::new(q.dims.clone(), data)
}

/// Exact integer reference path for a linear layer: the full bit-width
/// oracle everything else is checked against.
pub fn direct_linear(a: &QuantTensor, w: &QuantTensor, spec: &LinearSpec) -> Result<AccumTensor> {
    if a.dims != spec.input_dims() {
        return Err(Error::ShapeMismatch(format!(
            "activation dims {:?} do not match descriptor input {:?}",
            a.dims,
            spec.input_dims()
        )));
    }
    direct_linear_widened(&a.widened(), w, spec)
}

/// Widened-operand entry point: same contract as [`direct_linear`] but the
/// activation may exceed 8 bits (sums of quantized operands, differences).
/// Callers keep operands within the bound that makes 32-bit accumulation
/// exact over `reduction_len <= 2^15`.
pub fn direct_linear_widened(a: &[i32], w: &QuantTensor, spec: &LinearSpec) -> Result<AccumTensor> {
    spec.check_reduction()?;
    if w.dims != spec.weight_dims() {
        return Err(Error::ShapeMismatch(format!(
            "weight dims {:?} do not match descriptor weight {:?}",
            w.dims,
            spec.weight_dims()
        )));
    }
    if a.len() != dims_product(&spec.input_dims()) {
        return Err(Error::ShapeMismatch(format!(
            "activation length {} does not match descriptor input {:?}",
            a.len(),
            spec.input_dims()
        )));
    }
    let wv = w.widened();
    match *spec {
        LinearSpec::Matmul { m, k, n } => {
            let out = kernel::matmul_i32(a, &wv, m, k, n);
            Ok(AccumTensor::new(vec![m, n], out))
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
            let (out, oh, ow) =
                kernel::conv2d_i32(a, in_ch, in_h, in_w, &wv, out_ch, kh, kw, stride, pad);
            Ok(AccumTensor::new(vec![out_ch, oh, ow], out))
        }
    }
}
