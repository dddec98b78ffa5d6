//! Binary logistic regression used to fuse per-layer scores: full-batch
//! gradient descent with an L2 penalty of 1e-3, run on per-feature
//! standardized inputs and folded back into raw-feature weights.

use crate::detect::DetectError;

const PENALTY: f64 = 1e-3;
const ITERATIONS: usize = 2000;
const LEARN_RATE: f64 = 0.5;

/// Fitted weights in raw feature space: score = weights . x + bias.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticFit {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit on rows of `features` with `labels[i]` marking the positive class.
/// A feature column with zero variance across the data is degenerate and
/// reported by index.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool]) -> Result<LogisticFit, DetectError> {
    let n = features.len();
    if n == 0 || n != labels.len() {
        return Err(DetectError::BadConfig("logistic fit needs labeled rows".to_string()));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(DetectError::BadConfig("inconsistent feature dimensions".to_string()));
    }

    // Standardize per column.
    let mut mean = vec![0.0f64; dim];
    for row in features {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut std = vec![0.0f64; dim];
    for row in features {
        for ((s, &v), &m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n as f64).sqrt();
        if *s == 0.0 {
            return Err(DetectError::DegenerateLayer { layer: j });
        }
    }

    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|row| row.iter().zip(&mean).zip(&std).map(|((&v, &m), &s)| (v - m) / s).collect())
        .collect();

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    for _ in 0..ITERATIONS {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for (row, &label) in standardized.iter().zip(labels) {
            let z = b + w.iter().zip(row).map(|(wi, xi)| wi * xi).sum::<f64>();
            let err = sigmoid(z) - if label { 1.0 } else { 0.0 };
            for (g, &xi) in gw.iter_mut().zip(row) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= LEARN_RATE * (g / n as f64 + PENALTY * *wi);
        }
        b -= LEARN_RATE * gb / n as f64;
    }

    // Fold standardization into raw-space weights.
    let weights: Vec<f64> = w.iter().zip(&std).map(|(wi, s)| wi / s).collect();
    let bias = b - weights.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
    Ok(LogisticFit { weights, bias })
}
