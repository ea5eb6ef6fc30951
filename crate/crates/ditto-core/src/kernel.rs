//! Integer and float compute kernels shared by the reference model, the
//! quantized oracle path, and the difference engine.
//!
//! Integer kernels accumulate in i64 and narrow to i32 at the end; callers
//! bound operand magnitudes and reduction lengths so the narrowing is exact.
//! With the `parallel` feature (default) the outer loops run on rayon;
//! `*_seq` variants are always available and are what the criterion bench
//! compares against.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

fn narrow(acc: i64) -> i32 {
    i32::try_from(acc)
        .expect("accumulator exceeded 32 bits; reduction-length precondition violated")
}

fn matmul_i32_row(a_row: &[i32], b: &[i32], k: usize, n: usize, out_row: &mut [i32]) {
    for j in 0..n {
        let mut acc = 0i64;
        for p in 0..k {
            acc += a_row[p] as i64 * b[p * n + j] as i64;
        }
        out_row[j] = narrow(acc);
    }
}

/// Row-major [m,k] x [k,n] integer matmul, sequential.
pub fn matmul_i32_seq(a: &[i32], b: &[i32], m: usize, k: usize, n: usize) -> Vec<i32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0i32; m * n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_i32_row(&a[i * k..(i + 1) * k], b, k, n, out_row);
    }
    out
}

/// Row-major [m,k] x [k,n] integer matmul; parallel over output rows when
/// the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn matmul_i32(a: &[i32], b: &[i32], m: usize, k: usize, n: usize) -> Vec<i32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0i32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_i32_row(&a[i * k..(i + 1) * k], b, k, n, out_row);
    });
    out
}

#[cfg(not(feature = "parallel"))]
pub fn matmul_i32(a: &[i32], b: &[i32], m: usize, k: usize, n: usize) -> Vec<i32> {
    matmul_i32_seq(a, b, m, k, n)
}

/// Direct 2-D convolution over [ic,h,w] input with [oc,ic,kh,kw] weights.
/// Returns (output, oh, ow) with output laid out [oc,oh,ow].
#[allow(clippy::too_many_arguments)] // scalar conv dims beat an ad-hoc struct here
pub fn conv2d_i32(
    input: &[i32],
    ic: usize,
    h: usize,
    w: usize,
    weight: &[i32],
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<i32>, usize, usize) {
    assert_eq!(input.len(), ic * h * w);
    assert_eq!(weight.len(), oc * ic * kh * kw);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0i32; oc * oh * ow];

    let body = |o: usize, plane: &mut [i32]| {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0i64;
                for c in 0..ic {
                    for ky in 0..kh {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = input[c * h * w + iy as usize * w + ix as usize];
                            let wv = weight[((o * ic + c) * kh + ky) * kw + kx];
                            acc += iv as i64 * wv as i64;
                        }
                    }
                }
                plane[y * ow + x] = narrow(acc);
            }
        }
    };

    #[cfg(feature = "parallel")]
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(o, plane)| body(o, plane));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(o, plane)| body(o, plane));

    (out, oh, ow)
}

/// Lowers a conv input to the im2col matrix: one row per output position
/// (row-major over (oh, ow)), `ic*kh*kw` columns.
#[allow(clippy::too_many_arguments)] // scalar conv dims beat an ad-hoc struct here
pub fn im2col_i32(
    input: &[i32],
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<i32>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cols = ic * kh * kw;
    let mut out = vec![0i32; oh * ow * cols];
    for y in 0..oh {
        for x in 0..ow {
            let row = &mut out[(y * ow + x) * cols..(y * ow + x + 1) * cols];
            let mut idx = 0;
            for c in 0..ic {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (x * stride + kx) as isize - pad as isize;
                        row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            input[c * h * w + iy as usize * w + ix as usize]
                        } else {
                            0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Reshapes [oc,ic,kh,kw] conv weights to the [ic*kh*kw, oc] matrix that
/// multiplies im2col rows from the right.
pub fn conv_weight_as_matrix(weight: &[i32], oc: usize, cols: usize) -> Vec<i32> {
    assert_eq!(weight.len(), oc * cols);
    let mut m = vec![0i32; cols * oc];
    for o in 0..oc {
        for c in 0..cols {
            m[c * oc + o] = weight[o * cols + c];
        }
    }
    m
}

pub fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)] // scalar conv dims beat an ad-hoc struct here
pub fn conv2d_f32(
    input: &[f32],
    ic: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f32;
                for c in 0..ic {
                    for ky in 0..kh {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input[c * h * w + iy as usize * w + ix as usize]
                                * weight[((o * ic + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, oh, ow)
}
