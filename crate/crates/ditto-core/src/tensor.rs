//! Dense row-major f32 tensor used by the reference model and metrics.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorF {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims/data length mismatch"
        );
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors with the offending index if any element is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    index: i,
                    value: v as f64,
                });
            }
        }
        Ok(())
    }

    /// Interprets the tensor as a 2-D row matrix: a [r, c] tensor stays as
    /// is, higher-rank tensors collapse all leading axes into rows.
    pub fn as_rows(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (0, 0),
            1 => (1, self.dims[0]),
            _ => {
                let c = *self.dims.last().unwrap();
                (self.len() / c.max(1), c)
            }
        }
    }
}

pub fn same_dims(a: &[usize], b: &[usize]) -> bool {
    a == b
}

pub fn dims_product(dims: &[usize]) -> usize {
    dims.iter().product()
}
