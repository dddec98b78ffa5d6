//! Class-conditional Gaussian statistics over layer features: per-class
//! means with one covariance pooled across classes, and squared
//! Mahalanobis distances computed through a Cholesky factor of the
//! shrinkage-conditioned covariance. The explicit inverse is never formed.
//!
//! All estimation and distance math is f64; features arrive as f32 layer
//! activations and are widened on entry.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum GaussianError {
    /// A class had no samples in the fit input.
    EmptyClass { class: usize },
    /// A label outside `0..num_classes`.
    BadLabel { label: usize, num_classes: usize },
    /// Feature vector length differs from the fitted dimension.
    DimMismatch { expected: usize, got: usize },
    /// `Σ + λI` was not positive definite.
    NotPositiveDefinite { lambda: f64 },
    /// No classes or no samples at all.
    Empty,
}

impl fmt::Display for GaussianError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyClass { class } => write!(f, "class {class} has no samples"),
            Self::BadLabel { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Self::DimMismatch { expected, got } => {
                write!(f, "feature dim {got} does not match fitted dim {expected}")
            }
            Self::NotPositiveDefinite { lambda } => write!(
                f,
                "covariance plus shrinkage {lambda:e} is not positive definite; \
                 increase the shrinkage"
            ),
            Self::Empty => write!(f, "no samples to fit"),
        }
    }
}

impl std::error::Error for GaussianError {}

/// Per-layer record of class means and the tied covariance, with the
/// lower-triangular Cholesky factor of `Σ + λI` precomputed.
#[derive(Debug, Clone)]
pub struct ClassGaussianStats {
    layer: usize,
    dim: usize,
    /// One mean of length `dim` per class.
    means: Vec<Vec<f64>>,
    /// Pooled covariance, row-major `dim x dim`, symmetric.
    covariance: Vec<f64>,
    /// Lower-triangular factor `L` with `L Lᵀ = Σ + λI`.
    chol: Vec<f64>,
    lambda: f64,
    counts: Vec<usize>,
}

impl ClassGaussianStats {
    /// Fit per-class means and the pooled (divisor `N`) covariance, then
    /// factor `Σ + λI`. `lambda = None` uses `1e-3 · trace(Σ)/d`.
    pub fn fit(
        layer: usize,
        features: &[Vec<f64>],
        labels: &[usize],
        num_classes: usize,
        lambda: Option<f64>,
    ) -> Result<Self, GaussianError> {
        if features.is_empty() || num_classes == 0 || features.len() != labels.len() {
            return Err(GaussianError::Empty);
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(GaussianError::Empty);
        }
        for f in features {
            if f.len() != dim {
                return Err(GaussianError::DimMismatch { expected: dim, got: f.len() });
            }
        }
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            if y >= num_classes {
                return Err(GaussianError::BadLabel { label: y, num_classes });
            }
            counts[y] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(GaussianError::EmptyClass { class });
        }

        let mut means = vec![vec![0.0f64; dim]; num_classes];
        for (f, &y) in features.iter().zip(labels) {
            for (m, &v) in means[y].iter_mut().zip(f) {
                *m += v;
            }
        }
        for (mean, &count) in means.iter_mut().zip(&counts) {
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
        }

        let n_total = features.len() as f64;
        let mut covariance = vec![0.0f64; dim * dim];
        let mut resid = vec![0.0f64; dim];
        for (f, &y) in features.iter().zip(labels) {
            for (r, (&v, &m)) in resid.iter_mut().zip(f.iter().zip(&means[y])) {
                *r = v - m;
            }
            for i in 0..dim {
                let ri = resid[i];
                for j in 0..=i {
                    covariance[i * dim + j] += ri * resid[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..=i {
                let v = covariance[i * dim + j] / n_total;
                covariance[i * dim + j] = v;
                covariance[j * dim + i] = v;
            }
        }

        let lambda = lambda.unwrap_or_else(|| {
            let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
            1e-3 * trace / dim as f64
        });
        let chol = cholesky_lower_shifted(&covariance, dim, lambda)
            .ok_or(GaussianError::NotPositiveDefinite { lambda })?;

        Ok(ClassGaussianStats { layer, dim, means, covariance, chol, lambda, counts })
    }

    /// Rebuild from persisted parts, re-validating the factorization
    /// invariant is present (the factor is stored, not recomputed).
    pub fn from_parts(
        layer: usize,
        means: Vec<Vec<f64>>,
        covariance: Vec<f64>,
        chol: Vec<f64>,
        lambda: f64,
        counts: Vec<usize>,
    ) -> Result<Self, GaussianError> {
        let dim = means.first().map(|m| m.len()).ok_or(GaussianError::Empty)?;
        if covariance.len() != dim * dim || chol.len() != dim * dim {
            return Err(GaussianError::DimMismatch {
                expected: dim * dim,
                got: covariance.len().max(chol.len()),
            });
        }
        Ok(ClassGaussianStats { layer, dim, means, covariance, chol, lambda, counts })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn chol_lower(&self) -> &[f64] {
        &self.chol
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Squared Mahalanobis distance from `x` to the mean of `class` under
    /// `Σ + λI`, via a triangular solve against the Cholesky factor:
    /// with `L y = x − μ_c`, the quadratic form equals `‖y‖²`.
    pub fn mahalanobis_sq(&self, x: &[f64], class: usize) -> Result<f64, GaussianError> {
        if class >= self.means.len() {
            return Err(GaussianError::BadLabel { label: class, num_classes: self.means.len() });
        }
        self.quad_form_resid(x, &self.means[class])
    }

    /// Squared Mahalanobis distance between two arbitrary points under the
    /// fitted `Σ + λI`; `sqrt` of this is a metric for the fixed factor.
    pub fn mahalanobis_sq_between(&self, u: &[f64], v: &[f64]) -> Result<f64, GaussianError> {
        self.quad_form_resid(u, v)
    }

    fn quad_form_resid(&self, x: &[f64], center: &[f64]) -> Result<f64, GaussianError> {
        if x.len() != self.dim || center.len() != self.dim {
            return Err(GaussianError::DimMismatch {
                expected: self.dim,
                got: x.len().min(center.len()),
            });
        }
        let d = self.dim;
        let mut y = vec![0.0f64; d];
        for i in 0..d {
            let mut acc = x[i] - center[i];
            for j in 0..i {
                acc -= self.chol[i * d + j] * y[j];
            }
            y[i] = acc / self.chol[i * d + i];
        }
        Ok(y.iter().map(|v| v * v).sum())
    }

    /// Arg-min over classes of the squared distance; ties break to the
    /// smallest class index.
    pub fn closest_class(&self, x: &[f64]) -> Result<usize, GaussianError> {
        let mut best = 0usize;
        let mut best_d = self.mahalanobis_sq(x, 0)?;
        for c in 1..self.means.len() {
            let d = self.mahalanobis_sq(x, c)?;
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        Ok(best)
    }

    /// Confidence score of `x`: max over classes of the negated squared
    /// distance. Always `<= 0`.
    pub fn confidence(&self, x: &[f64]) -> Result<f64, GaussianError> {
        let c = self.closest_class(x)?;
        Ok(-self.mahalanobis_sq(x, c)?)
    }

    /// Inverse of the Cholesky factor, row-major lower-triangular. Used to
    /// push the quadratic form through the tape as `‖L⁻¹(f − μ)‖²`.
    pub fn inv_chol_lower(&self) -> Vec<f64> {
        let d = self.dim;
        let mut inv = vec![0.0f64; d * d];
        for col in 0..d {
            inv[col * d + col] = 1.0 / self.chol[col * d + col];
            for row in col + 1..d {
                let mut acc = 0.0f64;
                for k in col..row {
                    acc += self.chol[row * d + k] * inv[k * d + col];
                }
                inv[row * d + col] = -acc / self.chol[row * d + row];
            }
        }
        inv
    }
}

/// Lower Cholesky factor of `m + shift·I`, or `None` if a pivot is not
/// strictly positive.
fn cholesky_lower_shifted(m: &[f64], d: usize, shift: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut acc = m[i * d + j] + if i == j { shift } else { 0.0 };
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                l[i * d + i] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    Some(l)
}
