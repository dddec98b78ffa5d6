//! Plain (non-recorded) tensor math used outside differentiation:
//! sign/clamp for attack updates, element-wise arithmetic, norms, argmax.

use super::{check_finite, Tensor, TensorError};

impl Tensor {
    /// Element-wise sign: -1, 0, or +1. (`f32::signum` maps 0 to ±1,
    /// which is wrong for gradient-sign updates.)
    pub fn sign(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("shape preserved")
    }

    /// Element-wise clamp into `[lo, hi]`. Output is exactly within bounds.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let data = self.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with("mul", rhs, |a, b| a * b)
    }

    pub fn scale(&self, k: f32) -> Result<Tensor, TensorError> {
        let data: Vec<f32> = self.data().iter().map(|&v| v * k).collect();
        check_finite("scale", &data)?;
        Ok(Tensor::new(self.shape().to_vec(), data).expect("shape preserved"))
    }

    fn zip_with(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(op, &data)?;
        Ok(Tensor::new(self.shape().to_vec(), data).expect("shape preserved"))
    }

    /// L-infinity distance to another tensor of the same shape.
    pub fn linf_dist(&self, rhs: &Tensor) -> Result<f32, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "linf_dist",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    /// L2 distance to another tensor of the same shape (f64 accumulation).
    pub fn l2_dist(&self, rhs: &Tensor) -> Result<f32, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "l2_dist",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let acc: f64 = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(acc.sqrt() as f32)
    }

    /// Mean absolute difference to another tensor of the same shape.
    pub fn mean_abs_diff(&self, rhs: &Tensor) -> Result<f32, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_abs_diff",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let acc: f64 = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum();
        Ok((acc / self.numel() as f64) as f32)
    }

    /// Per-row argmax of a `[N, C]` tensor. Ties break to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "argmax_rows",
                detail: format!("expected rank 2, got {:?}", self.shape()),
            });
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        let mut out = Vec::with_capacity(n);
        for row in 0..n {
            let slice = &self.data()[row * c..(row + 1) * c];
            let mut best = 0usize;
            for (j, &v) in slice.iter().enumerate() {
                if v > slice[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Extract row `n` of a batched tensor `[N, ...]` as a `[...]` tensor.
    pub fn row(&self, n: usize) -> Result<Tensor, TensorError> {
        if self.rank() < 1 || n >= self.shape()[0] {
            return Err(TensorError::InvalidShape {
                op: "row",
                detail: format!("row {n} out of range for shape {:?}", self.shape()),
            });
        }
        let inner: usize = self.shape()[1..].iter().product();
        let data = self.data()[n * inner..(n + 1) * inner].to_vec();
        Ok(Tensor::new(self.shape()[1..].to_vec(), data).expect("length checked"))
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = items.first().ok_or(TensorError::InvalidShape {
            op: "stack",
            detail: "empty input".to_string(),
        })?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape() != first.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(first.shape());
        Ok(Tensor::new(shape, data).expect("length checked"))
    }
}
