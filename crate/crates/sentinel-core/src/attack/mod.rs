//! Adversarial example generators: FGSM, BIM, DeepFool, and CW-L2.
//!
//! Attacks operate on any classifier that can record its logits on a
//! tape, one sample at a time (batch dimension 1). Signed-gradient
//! attacks share one code path (FGSM is BIM with a single full-budget
//! step); DeepFool uses the local linearization of the decision boundary;
//! CW optimizes in tanh-space with a binary search over the trade-off
//! constant.

pub mod sheet;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, SmallCnn};
use crate::tensor::{Tape, Tensor, TensorError, Val};

/// A classifier whose logits can be recorded on a tape, so attacks can
/// take input gradients through it.
pub trait TapedClassifier {
    fn num_classes(&self) -> usize;
    fn logits_on_tape(&self, tape: &mut Tape, input: Val) -> Result<Val, ModelError>;
}

impl TapedClassifier for SmallCnn {
    fn num_classes(&self) -> usize {
        SmallCnn::num_classes(self)
    }

    fn logits_on_tape(&self, tape: &mut Tape, input: Val) -> Result<Val, ModelError> {
        Ok(self.forward_on_tape(tape, input)?.logits)
    }
}

#[derive(Debug)]
pub enum AttackError {
    Tensor(TensorError),
    Model(ModelError),
    /// The optimization objective went NaN/Inf.
    NonFiniteObjective { sample: usize },
    BadConfig(String),
}

impl fmt::Display for AttackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::NonFiniteObjective { sample } => {
                write!(f, "non-finite attack objective on sample {sample}")
            }
            Self::BadConfig(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for AttackError {}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        AttackError::Tensor(e)
    }
}

impl From<ModelError> for AttackError {
    fn from(e: ModelError) -> Self {
        AttackError::Model(e)
    }
}

/// Attack selection plus hyperparameters, as it appears in run configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackConfig {
    Fgsm { eps: f32 },
    Bim { eps: f32, steps: usize, step_size: f32 },
    Deepfool { overshoot: f32, max_iter: usize },
    Cw { kappa: f32, c_steps: usize, iterations: usize, lr: f32 },
}

impl AttackConfig {
    pub fn fgsm_default() -> Self {
        AttackConfig::Fgsm { eps: 0.1 }
    }

    pub fn bim_default() -> Self {
        AttackConfig::Bim { eps: 0.1, steps: 10, step_size: 0.02 }
    }

    pub fn deepfool_default() -> Self {
        AttackConfig::Deepfool { overshoot: 0.02, max_iter: 50 }
    }

    pub fn cw_default() -> Self {
        AttackConfig::Cw { kappa: 0.0, c_steps: 5, iterations: 100, lr: 0.01 }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackConfig::Fgsm { .. } => "fgsm",
            AttackConfig::Bim { .. } => "bim",
            AttackConfig::Deepfool { .. } => "deepfool",
            AttackConfig::Cw { .. } => "cw",
        }
    }

    /// Report-table display name.
    pub fn display_name(&self) -> &'static str {
        match self {
            AttackConfig::Fgsm { .. } => "FGSM",
            AttackConfig::Bim { .. } => "BIM",
            AttackConfig::Deepfool { .. } => "DeepFool",
            AttackConfig::Cw { .. } => "CW",
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let ok = match *self {
            AttackConfig::Fgsm { eps } => eps >= 0.0,
            AttackConfig::Bim { eps, steps, step_size } => {
                eps >= 0.0 && steps >= 1 && step_size >= 0.0
            }
            AttackConfig::Deepfool { overshoot, max_iter } => overshoot >= 0.0 && max_iter >= 1,
            AttackConfig::Cw { c_steps, iterations, lr, .. } => {
                c_steps >= 1 && iterations >= 1 && lr > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(AttackError::BadConfig(format!("invalid attack config {self:?}")))
        }
    }
}

/// Gradient of the cross-entropy loss w.r.t. the input, plus the clean
/// prediction, for a single sample.
fn loss_input_grad(
    model: &dyn TapedClassifier,
    x: &Tensor,
    label: usize,
) -> Result<(Tensor, usize), AttackError> {
    let mut tape = Tape::new();
    let xv = tape.variable(x);
    let logits = model.logits_on_tape(&mut tape, xv)?;
    let pred = tape.tensor(logits).argmax_rows()?[0];
    let loss = tape.cross_entropy_loss(logits, &[label])?;
    tape.backward(loss)?;
    Ok((tape.grad_tensor(xv).expect("input gradient"), pred))
}

fn predict_one(model: &dyn TapedClassifier, x: &Tensor) -> Result<usize, AttackError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = model.logits_on_tape(&mut tape, xv)?;
    Ok(tape.tensor(logits).argmax_rows()?[0])
}

fn logits_of(model: &dyn TapedClassifier, x: &Tensor) -> Result<Tensor, AttackError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = model.logits_on_tape(&mut tape, xv)?;
    Ok(tape.tensor(logits))
}

/// One-step signed-gradient attack:
/// `x_adv = clamp(x + eps * sign(grad_x loss(x, y)), 0, 1)`.
/// Shares the BIM code path (one step at full budget), bit for bit.
pub fn fgsm(
    model: &dyn TapedClassifier,
    x: &Tensor,
    y_true: usize,
    eps: f32,
) -> Result<Tensor, AttackError> {
    bim(model, x, y_true, eps, 1, eps)
}

/// Iterative signed-gradient attack with per-step projection onto the
/// L-infinity ball of radius `eps` around `x` and onto `[0,1]`.
pub fn bim(
    model: &dyn TapedClassifier,
    x: &Tensor,
    y_true: usize,
    eps: f32,
    steps: usize,
    step_size: f32,
) -> Result<Tensor, AttackError> {
    if eps < 0.0 || steps == 0 {
        return Err(AttackError::BadConfig(format!(
            "bim needs eps >= 0 and steps >= 1, got eps {eps}, steps {steps}"
        )));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let mut current = x.clone();
    for _ in 0..steps {
        let (grad, _) = loss_input_grad(model, &current, y_true)?;
        let sign = grad.sign();
        for ((cur, &orig), &s) in
            current.data_mut().iter_mut().zip(x.data()).zip(sign.data())
        {
            let stepped = *cur + step_size * s;
            // Project onto the eps-ball around the original, then [0,1].
            *cur = stepped.clamp(orig - eps, orig + eps).clamp(0.0, 1.0);
        }
    }
    Ok(current)
}

/// DeepFool result for one sample.
#[derive(Debug, Clone)]
pub struct DeepFoolOutcome {
    pub adversarial: Tensor,
    pub iterations: usize,
    pub success: bool,
    /// Set when a zero boundary gradient aborted the loop.
    pub zero_gradient: bool,
}

/// Minimal-perturbation attack by iterative linearization. For two
/// classes the boundary function is the logit difference; for more, the
/// closest linearized boundary is chosen each step. The accumulated
/// perturbation is scaled by `1 + overshoot`.
pub fn deepfool(
    model: &dyn TapedClassifier,
    x: &Tensor,
    y_true: usize,
    overshoot: f32,
    max_iter: usize,
) -> Result<DeepFoolOutcome, AttackError> {
    let c = model.num_classes();
    let orig_pred = predict_one(model, x)?;
    if orig_pred != y_true {
        return Ok(DeepFoolOutcome {
            adversarial: x.clone(),
            iterations: 0,
            success: true,
            zero_gradient: false,
        });
    }

    let mut r_total = Tensor::zeros(x.shape().to_vec());
    let mut iterations = 0usize;
    let mut zero_gradient = false;
    let mut success = false;

    for _ in 0..max_iter {
        let probe = x.add(&r_total.scale(1.0 + overshoot)?)?;
        if predict_one(model, &probe)? != orig_pred {
            success = true;
            break;
        }
        iterations += 1;

        // Boundary function to each candidate class k at the probe point:
        // g_k = f_k - f_orig, w_k = its input gradient.
        let mut best: Option<(f64, Tensor, f64)> = None; // (|g|/|w|, w, g)
        for k in 0..c {
            if k == orig_pred {
                continue;
            }
            let mut tape = Tape::new();
            let xv = tape.variable(&probe);
            let logits = model.logits_on_tape(&mut tape, xv)?;
            let fk = tape.select_class(logits, &[k])?;
            let fo = tape.select_class(logits, &[orig_pred])?;
            let diff = tape.sub(fk, fo)?;
            let g = tape.data(diff)[0] as f64;
            let scalar = tape.sum(diff)?;
            tape.backward(scalar)?;
            let w = tape.grad_tensor(xv).expect("input gradient");
            let w_norm_sq: f64 = w.data().iter().map(|&v| (v as f64).powi(2)).sum();
            if w_norm_sq <= 1e-20 {
                continue;
            }
            let ratio = g.abs() / w_norm_sq.sqrt();
            if best.as_ref().map(|(r, _, _)| ratio < *r).unwrap_or(true) {
                best = Some((ratio, w, g));
            }
        }

        let Some((_, w, g)) = best else {
            zero_gradient = true;
            break;
        };
        let w_norm_sq: f64 = w.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let coef = (g.abs() / w_norm_sq) as f32;
        let step = w.scale(coef)?;
        if step.data().iter().all(|&v| v == 0.0) {
            // Exactly on the boundary with a finite gradient: no progress.
            break;
        }
        r_total = r_total.add(&step)?;
    }

    let adversarial = x.add(&r_total.scale(1.0 + overshoot)?)?.clamp(0.0, 1.0);
    if !success {
        success = predict_one(model, &adversarial)? != orig_pred;
    }
    Ok(DeepFoolOutcome { adversarial, iterations, success, zero_gradient })
}

/// CW-L2 result for one sample.
#[derive(Debug, Clone)]
pub struct CwOutcome {
    pub adversarial: Tensor,
    pub success: bool,
    pub l2: f32,
}

/// L2 attack: minimize `|x_adv - x|^2 + c * max(Z_true - max_other, -kappa)`
/// in tanh-space by plain gradient descent, binary-searching `c`. Returns
/// the successful candidate with the smallest L2 across the search, or
/// the last best-effort iterate with `success = false`.
#[allow(clippy::too_many_arguments)]
pub fn cw_l2(
    model: &dyn TapedClassifier,
    x: &Tensor,
    y_true: usize,
    kappa: f32,
    c_steps: usize,
    iterations: usize,
    lr: f32,
    sample_index: usize,
) -> Result<CwOutcome, AttackError> {
    if c_steps == 0 || iterations == 0 {
        return Err(AttackError::BadConfig(
            "cw needs c_steps >= 1 and iterations >= 1".to_string(),
        ));
    }
    // tanh-space parameterization keeps candidates in (0,1) by construction.
    let w0 = Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|&v| {
                let clipped = v.clamp(1e-6, 1.0 - 1e-6);
                (2.0 * clipped - 1.0).atanh()
            })
            .collect(),
    )?;

    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut c = 1.0f64;
    let mut best: Option<(f32, Tensor)> = None;
    let mut last = x.clone();

    for _ in 0..c_steps {
        let mut w = w0.clone();
        let mut success_at_c = false;
        for _ in 0..iterations {
            let mut tape = Tape::new();
            let wv = tape.variable(&w);
            let t = tape.tanh(wv)?;
            let shifted = tape.add_scalar(t, 1.0)?;
            let x_adv = tape.scale(shifted, 0.5)?;
            let x0 = tape.constant(x);
            let diff = tape.sub(x_adv, x0)?;
            let sq = tape.mul(diff, diff)?;
            let l2_sq = tape.sum(sq)?;
            let logits = model.logits_on_tape(&mut tape, x_adv)?;
            let z_true = tape.select_class(logits, &[y_true])?;
            let z_other = tape.row_max_excluding(logits, Some(&[y_true]))?;
            let margin = tape.sub(z_true, z_other)?;
            let hinge = tape.clamp(margin, -kappa, f32::INFINITY)?;
            let hinge_sum = tape.sum(hinge)?;
            let weighted = tape.scale(hinge_sum, c as f32)?;
            let objective = tape.add(l2_sq, weighted)?;
            if !tape.data(objective)[0].is_finite() {
                return Err(AttackError::NonFiniteObjective { sample: sample_index });
            }

            let candidate = tape.tensor(x_adv);
            let pred = tape.tensor(logits).argmax_rows()?[0];
            let l2 = candidate.l2_dist(x)?;
            if pred != y_true {
                success_at_c = true;
                if best.as_ref().map(|(b, _)| l2 < *b).unwrap_or(true) {
                    best = Some((l2, candidate.clone()));
                }
            }
            last = candidate;

            tape.backward(objective)?;
            let grad = tape.grad(wv).expect("w gradient");
            for (wi, &g) in w.data_mut().iter_mut().zip(grad) {
                *wi -= lr * g;
            }
        }

        if success_at_c {
            hi = c;
        } else {
            lo = c;
        }
        c = if hi.is_finite() { (lo + hi) / 2.0 } else { c * 10.0 };
    }

    Ok(match best {
        Some((l2, adversarial)) => CwOutcome { adversarial, success: true, l2 },
        None => {
            let l2 = last.l2_dist(x)?;
            CwOutcome { adversarial: last, success: false, l2 }
        }
    })
}

// ── Batch crafting ───────────────────────────────────────────────────

/// Per-sample record in an adversarial batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: usize,
    pub orig_pred: usize,
    pub adv_pred: usize,
    pub success: bool,
    pub l2: f32,
    pub linf: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// Original and perturbed images with prediction bookkeeping. Crafted
/// only on samples the model classifies correctly.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub originals: Vec<Tensor>,
    pub adversarial: Vec<Tensor>,
    pub records: Vec<SampleRecord>,
    pub config: AttackConfig,
}

impl AdversarialBatch {
    pub fn success_count(&self) -> usize {
        self.records.iter().filter(|r| r.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.success_count() as f64 / self.records.len() as f64
        }
    }
}

/// Craft adversarial examples for every correctly-classified item.
pub fn craft_batch(
    model: &dyn TapedClassifier,
    items: &[(Tensor, usize)],
    config: &AttackConfig,
) -> Result<AdversarialBatch, AttackError> {
    config.validate()?;
    let mut originals = Vec::new();
    let mut adversarial = Vec::new();
    let mut records = Vec::new();

    for (img, label) in items {
        let single = batchify(img);
        let orig_pred = predict_one(model, &single)?;
        if orig_pred != *label {
            continue;
        }
        let sample_index = records.len();
        let (adv, iterations, flag) = match *config {
            AttackConfig::Fgsm { eps } => (fgsm(model, &single, *label, eps)?, None, None),
            AttackConfig::Bim { eps, steps, step_size } => {
                (bim(model, &single, *label, eps, steps, step_size)?, None, None)
            }
            AttackConfig::Deepfool { overshoot, max_iter } => {
                let out = deepfool(model, &single, *label, overshoot, max_iter)?;
                let flag = out.zero_gradient.then(|| "zero boundary gradient".to_string());
                (out.adversarial, Some(out.iterations), flag)
            }
            AttackConfig::Cw { kappa, c_steps, iterations, lr } => {
                let out =
                    cw_l2(model, &single, *label, kappa, c_steps, iterations, lr, sample_index)?;
                (out.adversarial, None, None)
            }
        };
        let adv_pred = predict_one(model, &adv)?;
        records.push(SampleRecord {
            label: *label,
            orig_pred,
            adv_pred,
            success: adv_pred != orig_pred,
            l2: adv.l2_dist(&single)?,
            linf: adv.linf_dist(&single)?,
            iterations,
            flag,
        });
        originals.push(single);
        adversarial.push(adv);
    }

    Ok(AdversarialBatch { originals, adversarial, records, config: config.clone() })
}

fn batchify(img: &Tensor) -> Tensor {
    let mut shape = Vec::with_capacity(img.rank() + 1);
    shape.push(1);
    shape.extend_from_slice(img.shape());
    Tensor::new(shape, img.data().to_vec()).expect("same length")
}

/// Predicted class and its softmax probability, for sheet captions.
pub fn predicted_confidence(
    model: &dyn TapedClassifier,
    x: &Tensor,
) -> Result<(usize, f32), AttackError> {
    let logits = logits_of(model, x)?;
    let probs = logits.softmax_rows()?;
    let pred = probs.argmax_rows()?[0];
    Ok((pred, probs.data()[pred]))
}


#[cfg(test)]
mod tests {
    use super::linear_fixture::LinearBinary;
    use super::*;

    fn linear_model() -> LinearBinary {
        LinearBinary {
            w: Tensor::new(vec![1, 4], vec![0.8, -0.5, 0.3, 0.9]).unwrap(),
            b: -0.6,
        }
    }

    fn sample_x() -> Tensor {
        Tensor::new(vec![1, 4], vec![0.4, 0.6, 0.5, 0.3]).unwrap()
    }

    #[test]
    fn fgsm_zero_eps_is_identity() {
        let model = linear_model();
        let x = sample_x();
        let adv = fgsm(&model, &x, 0, 0.0).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn bim_single_step_equals_fgsm_bitwise() {
        let model = linear_model();
        let x = sample_x();
        let eps = 0.07;
        let a = fgsm(&model, &x, 0, eps).unwrap();
        let b = bim(&model, &x, 0, eps, 1, eps).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn bim_respects_linf_budget_and_unit_interval() {
        let model = linear_model();
        let x = sample_x();
        let eps = 0.15;
        let adv = bim(&model, &x, 0, eps, 7, 0.05).unwrap();
        assert!(adv.linf_dist(&x).unwrap() <= eps + 1e-6);
        assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fgsm_gradient_sign_matches_finite_differences() {
        let model = linear_model();
        let x = sample_x();
        let (grad, _) = loss_input_grad(&model, &x, 0).unwrap();
        let h = 1e-3;
        for i in 0..4usize {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            let loss_of = |t: &Tensor| -> f64 {
                let mut tape = Tape::new();
                let xv = tape.constant(t);
                let logits = model.logits_on_tape(&mut tape, xv).unwrap();
                let l = tape.cross_entropy_loss(logits, &[0]).unwrap();
                tape.data(l)[0] as f64
            };
            let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h as f64);
            assert_eq!(fd.signum() as i32, grad.data()[i].signum() as i32);
        }
    }

    #[test]
    fn deepfool_matches_linear_closed_form() {
        let model = linear_model();
        let x = sample_x();
        // f(x) < 0: predicted class 0.
        let fx = model.f(&x);
        assert!(fx < 0.0);
        let overshoot = 0.02;
        let out = deepfool(&model, &x, 0, overshoot, 50).unwrap();
        assert!(out.success);
        assert_eq!(out.iterations, 1);
        let w_norm_sq: f64 = model.w.data().iter().map(|&v| (v as f64).powi(2)).sum();
        for (i, (&adv, &orig)) in out.adversarial.data().iter().zip(x.data()).enumerate() {
            let want = (1.0 + overshoot) as f64
                * (-(fx as f64) * model.w.data()[i] as f64 / w_norm_sq);
            assert!(
                ((adv - orig) as f64 - want).abs() < 1e-6,
                "component {i}: {} vs {want}",
                adv - orig
            );
        }
    }

    #[test]
    fn deepfool_zero_overshoot_lands_on_boundary() {
        let model = linear_model();
        let x = sample_x();
        let out = deepfool(&model, &x, 0, 0.0, 50).unwrap();
        assert!(model.f(&out.adversarial).abs() < 1e-5);
    }

    #[test]
    fn deepfool_early_exit_on_misclassified_input() {
        let model = linear_model();
        let x = sample_x();
        // Claim the true label is 1; the model says 0, so the sample is
        // already "misclassified" and returns unchanged.
        let out = deepfool(&model, &x, 1, 0.02, 50).unwrap();
        assert!(out.success);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.adversarial.data(), x.data());
    }

    #[test]
    fn cw_trivial_success_on_misclassified_input() {
        let model = linear_model();
        let x = sample_x();
        let out = cw_l2(&model, &x, 1, 0.0, 3, 30, 0.01, 0).unwrap();
        assert!(out.success);
        assert!(out.l2 < 1e-3, "l2 {}", out.l2);
    }

    #[test]
    fn cw_approaches_minimal_distance_on_linear_model() {
        let model = linear_model();
        let x = sample_x();
        let fx = model.f(&x);
        let w_norm: f64 =
            model.w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let minimal = (fx.abs() as f64) / w_norm;
        let out = cw_l2(&model, &x, 0, 0.0, 6, 300, 0.01, 0).unwrap();
        assert!(out.success);
        assert!(
            (out.l2 as f64) <= minimal * 1.10,
            "l2 {} vs minimal {minimal}",
            out.l2
        );
        assert!(out.adversarial.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn craft_batch_skips_misclassified_and_counts_successes() {
        let model = linear_model();
        // Two items at the same x with both labels; the model predicts 0,
        // so the label-1 item is excluded from crafting.
        let items = vec![
            (Tensor::new(vec![4], vec![0.4, 0.6, 0.5, 0.3]).unwrap(), 0),
            (Tensor::new(vec![4], vec![0.4, 0.6, 0.5, 0.3]).unwrap(), 1),
        ];
        let batch = craft_batch(&model, &items, &AttackConfig::Fgsm { eps: 0.3 }).unwrap();
        assert_eq!(batch.records.len(), 1);
        assert_eq!(batch.records[0].label, 0);
        // eps 0 keeps predictions, so the success rate is zero.
        let none = craft_batch(&model, &items, &AttackConfig::Fgsm { eps: 0.0 }).unwrap();
        assert_eq!(none.success_count(), 0);
        assert_eq!(none.success_rate(), 0.0);
    }
}
