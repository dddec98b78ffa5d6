//! Baseline detectors: maximum softmax probability, ODIN (temperature
//! scaling plus input perturbation), and the local-intrinsic-
//! dimensionality estimator with its nearest-neighbor machinery.

use crate::attack::TapedClassifier;
use crate::detect::DetectError;
use crate::tensor::{Tape, Tensor};

/// Max softmax probability of `logits` at the given temperature, in f64
/// all the way: going through an f32 probability tensor would round
/// confident rows to exactly 1.0 and destroy the ranking the detector
/// depends on.
fn max_softmax_f64(logits: &[f32], temperature: f64) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom: f64 = logits.iter().map(|&z| ((z as f64 - m) / temperature).exp()).sum();
    1.0 / denom
}

/// Maximum softmax probability of a single sample; in `[1/C, 1]`.
pub fn msp_score(model: &dyn TapedClassifier, x: &Tensor) -> Result<f64, DetectError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = model.logits_on_tape(&mut tape, xv)?;
    Ok(max_softmax_f64(tape.data(logits), 1.0))
}

/// ODIN: perturb the input against the gradient of the temperature-scaled
/// log-softmax of the predicted class, then return the max temperature-
/// scaled softmax on the perturbed input.
pub fn odin_score(
    model: &dyn TapedClassifier,
    x: &Tensor,
    temperature: f32,
    eps: f32,
) -> Result<f64, DetectError> {
    if temperature < 1.0 || eps < 0.0 {
        return Err(DetectError::BadConfig(format!(
            "odin needs temperature >= 1 and eps >= 0, got T {temperature}, eps {eps}"
        )));
    }
    let perturbed = if eps > 0.0 {
        let mut tape = Tape::new();
        let xv = tape.variable(x);
        let logits = model.logits_on_tape(&mut tape, xv)?;
        let pred = tape.tensor(logits).argmax_rows()?[0];
        let scaled = tape.scale(logits, 1.0 / temperature)?;
        let lsm = tape.log_softmax(scaled)?;
        let picked = tape.select_class(lsm, &[pred])?;
        let objective = tape.sum(picked)?;
        tape.backward(objective)?;
        let grad = tape.grad_tensor(xv).expect("input gradient");
        // x - eps * sign(-grad) == x + eps * sign(grad): move up the
        // log-softmax gradient to sharpen the prediction.
        x.add(&grad.sign().scale(eps)?)?.clamp(0.0, 1.0)
    } else {
        x.clone()
    };

    let mut tape = Tape::new();
    let xv = tape.constant(&perturbed);
    let logits = model.logits_on_tape(&mut tape, xv)?;
    Ok(max_softmax_f64(tape.data(logits), temperature as f64))
}

/// One LID estimate; `flagged` marks the degenerate all-equal-radii case
/// where the estimate is the +inf sentinel.
#[derive(Debug, Clone, Copy)]
pub struct LidEstimate {
    pub value: f64,
    pub flagged: bool,
}

/// Maximum-likelihood LID from the k nearest Euclidean distances between
/// `x` and the reference batch:
/// `LID = -( (1/k) sum ln(r_i / r_k) )^-1`, distances floored at 1e-12.
pub fn lid_estimate(
    reference: &[Vec<f64>],
    x: &[f64],
    k: usize,
) -> Result<LidEstimate, DetectError> {
    if k < 2 || reference.len() <= k {
        return Err(DetectError::BadConfig(format!(
            "lid needs reference batch > k >= 2, got batch {} and k {k}",
            reference.len()
        )));
    }
    let mut dists: Vec<f64> = reference
        .iter()
        .map(|r| {
            let sq: f64 = r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            sq.sqrt().max(1e-12)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let r_k = dists[k - 1];
    let mean_log: f64 = dists[..k].iter().map(|r| (r / r_k).ln()).sum::<f64>() / k as f64;
    if mean_log == 0.0 {
        return Ok(LidEstimate { value: f64::INFINITY, flagged: true });
    }
    Ok(LidEstimate { value: -1.0 / mean_log, flagged: false })
}

/// Per-layer LID feature vector for one activation set, with flagged
/// sentinels clamped to a large finite value so the fuser stays finite.
pub fn lid_features(
    reference_per_layer: &[Vec<Vec<f64>>],
    activations_per_layer: &[Vec<f64>],
    k: usize,
) -> Result<Vec<f64>, DetectError> {
    if reference_per_layer.len() != activations_per_layer.len() {
        return Err(DetectError::BadConfig(format!(
            "{} reference layers vs {} activation layers",
            reference_per_layer.len(),
            activations_per_layer.len()
        )));
    }
    reference_per_layer
        .iter()
        .zip(activations_per_layer)
        .map(|(reference, x)| {
            let est = lid_estimate(reference, x, k)?;
            Ok(if est.flagged { 1e6 } else { est.value })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::linear_fixture::LinearBinary;

    fn linear_model() -> LinearBinary {
        LinearBinary {
            w: Tensor::new(vec![1, 4], vec![0.8, -0.5, 0.3, 0.9]).unwrap(),
            b: -0.6,
        }
    }

    #[test]
    fn msp_uniform_logits_is_one_over_c() {
        let model = LinearBinary { w: Tensor::zeros(vec![1, 4]), b: 0.0 };
        let x = Tensor::new(vec![1, 4], vec![0.3, 0.4, 0.5, 0.6]).unwrap();
        let s = msp_score(&model, &x).unwrap();
        assert!((s - 0.5).abs() < 1e-7);
    }

    #[test]
    fn msp_saturates_on_extreme_logits() {
        let model = LinearBinary {
            w: Tensor::new(vec![1, 1], vec![40.0]).unwrap(),
            b: -10.0,
        };
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        // Logits (0, 30): essentially certain.
        let s = msp_score(&model, &x).unwrap();
        assert!(s > 0.9999);
    }

    #[test]
    fn msp_matches_direct_formula() {
        let model = linear_model();
        let x = Tensor::new(vec![1, 4], vec![0.4, 0.6, 0.5, 0.3]).unwrap();
        // Two-class softmax over logits (0, f): max(p, 1-p), p = sigmoid(f).
        let f = model.f(&x) as f64;
        let p = 1.0 / (1.0 + (-f).exp());
        let got = msp_score(&model, &x).unwrap();
        assert!((got - p.max(1.0 - p)).abs() < 1e-7);
    }

    #[test]
    fn odin_reduces_to_msp() {
        let model = linear_model();
        let x = Tensor::new(vec![1, 4], vec![0.4, 0.6, 0.5, 0.3]).unwrap();
        let msp = msp_score(&model, &x).unwrap();
        let odin = odin_score(&model, &x, 1.0, 0.0).unwrap();
        assert!((msp - odin).abs() <= 1e-7);
    }

    #[test]
    fn odin_high_temperature_approaches_uniform_monotonically() {
        let model = linear_model();
        let x = Tensor::new(vec![1, 4], vec![0.9, 0.1, 0.8, 0.7]).unwrap();
        let mut prev = odin_score(&model, &x, 1.0, 0.0).unwrap();
        for t in [10.0f32, 100.0, 1000.0] {
            let s = odin_score(&model, &x, t, 0.0).unwrap();
            assert!(s <= prev + 1e-12, "T={t}: {s} vs {prev}");
            prev = s;
        }
        assert!((prev - 0.5).abs() < 1e-3);
    }

    #[test]
    fn odin_perturbation_gradient_matches_finite_differences() {
        let model = linear_model();
        let x = Tensor::new(vec![1, 4], vec![0.4, 0.6, 0.5, 0.3]).unwrap();
        let t = 10.0f32;
        // Reconstruct the internal objective: log-softmax of the predicted
        // class at temperature t.
        let objective = |x: &Tensor| -> f64 {
            let f = model.f(x) as f64 / t as f64;
            // logits/T = (0, f); predicted class is 0 here (f < 0).
            let lse = (1.0 + f.exp()).ln();
            -lse
        };
        let mut tape = Tape::new();
        let xv = tape.variable(&x);
        let logits = model.logits_on_tape(&mut tape, xv).unwrap();
        let scaled = tape.scale(logits, 1.0 / t).unwrap();
        let lsm = tape.log_softmax(scaled).unwrap();
        let picked = tape.select_class(lsm, &[0]).unwrap();
        let s = tape.sum(picked).unwrap();
        tape.backward(s).unwrap();
        let grad = tape.grad_tensor(xv).unwrap();
        let h = 1e-3f32;
        for i in 0..4 {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h as f64);
            let ad = grad.data()[i] as f64;
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-12);
            assert!(rel < 1e-3, "component {i}: ad {ad} vs fd {fd}");
        }
    }

    #[test]
    fn lid_hand_computable_case() {
        // k=2 with distances (r/e, r): mean log-ratio is -1/2, LID = 2.
        let r = 0.7f64;
        let reference = vec![
            vec![r / std::f64::consts::E, 0.0],
            vec![r, 0.0],
            vec![10.0, 10.0],
        ];
        let est = lid_estimate(&reference, &[0.0, 0.0], 2).unwrap();
        assert!((est.value - 2.0).abs() < 1e-12, "{}", est.value);
        assert!(!est.flagged);
    }

    #[test]
    fn lid_coincident_point_is_floored() {
        let reference = vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![1.0, 0.0]];
        let est = lid_estimate(&reference, &[0.0, 0.0], 2).unwrap();
        assert!(est.value.is_finite());
        assert!(est.value > 0.0);
    }

    #[test]
    fn lid_all_equal_radii_is_flagged_sentinel() {
        let reference = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        let est = lid_estimate(&reference, &[0.0, 0.0], 2).unwrap();
        assert!(est.flagged);
        assert!(est.value.is_infinite());
    }

    #[test]
    fn lid_rejects_small_reference() {
        let reference = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            lid_estimate(&reference, &[0.0], 2),
            Err(DetectError::BadConfig(_))
        ));
    }

    #[test]
    fn lid_matches_exhaustive_knn_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(42);
        let d = 8;
        let reference: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = 10;
            let est = lid_estimate(&reference, &x, k).unwrap();
            // Oracle: explicit distance list, explicit selection of the k
            // smallest, direct formula.
            let mut all: Vec<f64> = reference
                .iter()
                .map(|r| {
                    r.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rk = all[k - 1];
            let expected = -(k as f64) / all[..k].iter().map(|r| (r / rk).ln()).sum::<f64>();
            assert!((est.value - expected).abs() < 1e-9);
        }
    }
}
