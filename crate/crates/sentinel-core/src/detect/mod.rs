//! The Mahalanobis confidence-score detector: per-tap class-conditional
//! Gaussian statistics, signed-gradient input preprocessing, per-layer
//! confidence scores, a logistic-regression layer ensemble, and the
//! threshold rule, plus the ".det" artifact format.
//!
//! Scoring convention throughout: higher means more in-distribution. A
//! layer confidence is the maximum over classes of the negated squared
//! Mahalanobis distance, so it is never positive.

pub mod baselines;
pub mod logreg;

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::container::{atomic_write, put_u32, FileError, Reader};
use crate::gaussian::{ClassGaussianStats, GaussianError};
use crate::metrics::{auroc, MetricsError, ScoredSample};
use crate::model::{ModelError, SmallCnn, TapPoint};
use crate::tensor::{io as ten_io, Tape, Tensor, TensorError};

pub use baselines::{lid_estimate, lid_features, msp_score, odin_score, LidEstimate};
pub use logreg::{fit_logistic, LogisticFit};

#[derive(Debug)]
pub enum DetectError {
    Tensor(TensorError),
    Model(ModelError),
    Gaussian(GaussianError),
    Metrics(MetricsError),
    File(FileError),
    /// All fused scores identical for one layer; the fuser cannot fit.
    DegenerateLayer { layer: usize },
    /// Detector was fitted against different model weights.
    DigestMismatch { expected: String, got: String },
    TooFewSamples { needed: usize, got: usize },
    BadConfig(String),
}

impl fmt::Display for DetectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Gaussian(e) => write!(f, "{e}"),
            Self::Metrics(e) => write!(f, "{e}"),
            Self::File(e) => write!(f, "{e}"),
            Self::DegenerateLayer { layer } => {
                write!(f, "layer {layer}: all scores identical, ensemble cannot be fitted")
            }
            Self::DigestMismatch { expected, got } => write!(
                f,
                "detector was fitted for model digest {expected} but scoring model has {got}"
            ),
            Self::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            Self::BadConfig(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for DetectError {}

impl From<TensorError> for DetectError {
    fn from(e: TensorError) -> Self {
        DetectError::Tensor(e)
    }
}

impl From<ModelError> for DetectError {
    fn from(e: ModelError) -> Self {
        DetectError::Model(e)
    }
}

impl From<GaussianError> for DetectError {
    fn from(e: GaussianError) -> Self {
        DetectError::Gaussian(e)
    }
}

impl From<MetricsError> for DetectError {
    fn from(e: MetricsError) -> Self {
        DetectError::Metrics(e)
    }
}

impl From<FileError> for DetectError {
    fn from(e: FileError) -> Self {
        DetectError::File(e)
    }
}

const SCORE_BATCH: usize = 16;

// ── Feature extraction ───────────────────────────────────────────────

/// Per-layer, per-sample feature vectors for a set of images.
pub fn tap_features(
    model: &SmallCnn,
    images: &[Tensor],
) -> Result<Vec<Vec<Vec<f64>>>, DetectError> {
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.num_taps()];
    for chunk in images.chunks(SCORE_BATCH) {
        let batch = Tensor::stack(chunk)?;
        let (_, taps) = model.forward_with_taps(&batch)?;
        for (layer, tap) in taps.iter().enumerate() {
            let d = tap.shape()[1];
            for row in 0..chunk.len() {
                per_layer[layer].push(
                    tap.data()[row * d..(row + 1) * d].iter().map(|&v| v as f64).collect(),
                );
            }
        }
    }
    Ok(per_layer)
}

/// Fit per-tap Gaussian statistics from a labeled image set.
pub fn fit_stats(
    model: &SmallCnn,
    items: &[(Tensor, usize)],
    lambda: Option<f64>,
) -> Result<Vec<ClassGaussianStats>, DetectError> {
    let images: Vec<Tensor> = items.iter().map(|(t, _)| t.clone()).collect();
    let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    let per_layer = tap_features(model, &images)?;
    per_layer
        .into_iter()
        .enumerate()
        .map(|(layer, features)| {
            ClassGaussianStats::fit(layer, &features, &labels, model.num_classes(), lambda)
                .map_err(DetectError::from)
        })
        .collect()
}

// ── Preprocessing (controlled-noise calibration) ─────────────────────

fn inv_chol_tensor(stats: &ClassGaussianStats) -> Tensor {
    let d = stats.dim();
    let w = stats.inv_chol_lower();
    Tensor::new(vec![d, d], w.iter().map(|&v| v as f32).collect()).expect("square matrix")
}

/// Gradient of the summed squared Mahalanobis distance (to each sample's
/// closest class, found at eps = 0) with respect to the input batch.
fn distance_input_grad(
    model: &SmallCnn,
    stats: &ClassGaussianStats,
    batch: &Tensor,
    closest: &[usize],
) -> Result<Tensor, DetectError> {
    let d = stats.dim();
    let n = batch.shape()[0];
    let mut mu = vec![0.0f32; n * d];
    for (row, &c) in closest.iter().enumerate() {
        for (j, &v) in stats.mean(c).iter().enumerate() {
            mu[row * d + j] = v as f32;
        }
    }
    let mu = Tensor::new(vec![n, d], mu)?;
    let w = inv_chol_tensor(stats);

    let mut tape = Tape::new();
    let xv = tape.variable(batch);
    let fwd = model.forward_on_tape(&mut tape, xv)?;
    let tap = fwd.taps[stats.layer()];
    let mu_v = tape.constant(&mu);
    let centered = tape.sub(tap, mu_v)?;
    let wv = tape.constant(&w);
    let y = tape.linear(centered, wv, None)?;
    let sq = tape.mul(y, y)?;
    let total = tape.sum(sq)?;
    tape.backward(total)?;
    Ok(tape.grad_tensor(xv).expect("input gradient"))
}

/// Gradient of the squared Mahalanobis distance to the closest class
/// (found on the unperturbed input) with respect to a single `[3,H,W]`
/// image.
pub fn distance_gradient(
    model: &SmallCnn,
    stats: &ClassGaussianStats,
    x: &Tensor,
) -> Result<Tensor, DetectError> {
    let batch = Tensor::stack(std::slice::from_ref(x))?;
    let feats = tap_features_single_layer(model, std::slice::from_ref(&batch), stats.layer())?;
    let closest = vec![stats.closest_class(&feats[0])?];
    let grad = distance_input_grad(model, stats, &batch, &closest)?;
    Ok(grad.row(0)?)
}

/// Controlled-noise preprocessing for one layer:
/// `x_tilde = clamp(x - eps * sign(grad_x d_closest(x)), 0, 1)`, with the
/// closest class found on the unperturbed input and held fixed.
/// Takes and returns a single unbatched `[3,H,W]` image.
pub fn preprocess_input(
    model: &SmallCnn,
    stats: &ClassGaussianStats,
    x: &Tensor,
    eps: f32,
) -> Result<Tensor, DetectError> {
    if eps < 0.0 {
        return Err(DetectError::BadConfig(format!("eps must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let grad = distance_gradient(model, stats, x)?;
    Ok(x.sub(&grad.sign().scale(eps)?)?.clamp(0.0, 1.0))
}

fn tap_features_single_layer(
    model: &SmallCnn,
    batches: &[Tensor],
    layer: usize,
) -> Result<Vec<Vec<f64>>, DetectError> {
    let mut out = Vec::new();
    for batch in batches {
        let (_, taps) = model.forward_with_taps(batch)?;
        let tap = &taps[layer];
        let d = tap.shape()[1];
        for row in 0..tap.shape()[0] {
            out.push(tap.data()[row * d..(row + 1) * d].iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

/// Per-layer confidence `M_l` for a slice of single images: max over
/// classes of the negated squared distance, on the preprocessed input
/// when `eps > 0`.
pub fn layer_confidences(
    model: &SmallCnn,
    stats: &ClassGaussianStats,
    images: &[Tensor],
    eps: f32,
) -> Result<Vec<f64>, DetectError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_BATCH) {
        let batch = Tensor::stack(chunk)?;
        let scored = if eps > 0.0 {
            let feats =
                tap_features_single_layer(model, std::slice::from_ref(&batch), stats.layer())?;
            let closest: Vec<usize> = feats
                .iter()
                .map(|f| stats.closest_class(f))
                .collect::<Result<_, _>>()?;
            let grad = distance_input_grad(model, stats, &batch, &closest)?;
            batch.sub(&grad.sign().scale(eps)?)?.clamp(0.0, 1.0)
        } else {
            batch
        };
        let feats =
            tap_features_single_layer(model, std::slice::from_ref(&scored), stats.layer())?;
        for f in feats {
            out.push(stats.confidence(&f)?);
        }
    }
    Ok(out)
}

/// Single-sample `M_l`.
pub fn layer_confidence(
    model: &SmallCnn,
    stats: &ClassGaussianStats,
    x: &Tensor,
    eps: f32,
) -> Result<f64, DetectError> {
    Ok(layer_confidences(model, stats, std::slice::from_ref(x), eps)?[0])
}

// ── Ensemble fitting ─────────────────────────────────────────────────

/// The ensemble fit outcome: weights over layer scores, the selected
/// preprocessing magnitude, and the validation AUROC per grid point.
#[derive(Debug, Clone)]
pub struct FittedEnsemble {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub epsilon: f32,
    pub auroc: f64,
    pub grid: Vec<(f32, f64)>,
}

/// Per-layer score matrix (rows = samples) at one preprocessing level.
fn score_matrix(
    model: &SmallCnn,
    stats: &[ClassGaussianStats],
    images: &[Tensor],
    eps: f32,
) -> Result<Vec<Vec<f64>>, DetectError> {
    let mut rows = vec![Vec::with_capacity(stats.len()); images.len()];
    for layer_stats in stats {
        let col = layer_confidences(model, layer_stats, images, eps)?;
        for (row, v) in rows.iter_mut().zip(col) {
            row.push(v);
        }
    }
    Ok(rows)
}

/// Grid-search the preprocessing magnitude and fit the layer ensemble:
/// for each eps, per-layer scores on both validation sets feed a logistic
/// regression; the eps with the best fused validation AUROC wins.
pub fn fit_ensemble(
    model: &SmallCnn,
    stats: &[ClassGaussianStats],
    validation_pos: &[Tensor],
    validation_neg: &[Tensor],
    eps_grid: &[f32],
) -> Result<FittedEnsemble, DetectError> {
    if validation_pos.is_empty() || validation_neg.is_empty() {
        return Err(DetectError::BadConfig(
            "ensemble fitting needs non-empty positive and negative validation sets".to_string(),
        ));
    }
    if eps_grid.is_empty() {
        return Err(DetectError::BadConfig("empty eps grid".to_string()));
    }

    let mut best: Option<(usize, f64, LogisticFit)> = None;
    let mut grid = Vec::with_capacity(eps_grid.len());
    for (gi, &eps) in eps_grid.iter().enumerate() {
        let pos = score_matrix(model, stats, validation_pos, eps)?;
        let neg = score_matrix(model, stats, validation_neg, eps)?;
        let mut features = pos.clone();
        features.extend(neg.iter().cloned());
        let mut labels = vec![true; pos.len()];
        labels.extend(std::iter::repeat(false).take(neg.len()));

        let fit = fit_logistic(&features, &labels)?;
        let samples: Vec<ScoredSample> = features
            .iter()
            .zip(&labels)
            .map(|(f, &l)| ScoredSample::new(fit.score(f), l))
            .collect();
        let area = auroc(&samples)?;
        grid.push((eps, area));
        if best.as_ref().map(|(_, b, _)| area > *b).unwrap_or(true) {
            best = Some((gi, area, fit));
        }
    }
    let (gi, area, fit) = best.expect("non-empty grid");
    Ok(FittedEnsemble {
        alpha: fit.weights,
        bias: fit.bias,
        epsilon: eps_grid[gi],
        auroc: area,
        grid,
    })
}

/// Threshold at the lower 5th percentile (linear interpolation) of
/// in-distribution validation scores, so TPR >= 95% on that set.
pub fn calibrate_threshold(scores: &[f64]) -> Result<f64, DetectError> {
    if scores.len() < 20 {
        return Err(DetectError::TooFewSamples { needed: 20, got: scores.len() });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let pos = 0.05 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

// ── The detector artifact ────────────────────────────────────────────

/// Where the fuser's negative validation examples came from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub model_digest: String,
    pub fit_seed: u64,
    pub validation_positives: usize,
    pub validation_negatives: usize,
    pub negative_source: String,
}

/// Fitted detector: per-layer statistics, preprocessing magnitude,
/// ensemble weights, and decision threshold.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    stats: Vec<ClassGaussianStats>,
    epsilon: f32,
    alpha: Vec<f64>,
    bias: f64,
    threshold: f64,
    tap_manifest: Vec<TapPoint>,
    provenance: Provenance,
}

/// One scored input.
#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub layer_scores: Vec<f64>,
    pub ensemble_score: f64,
    pub in_distribution: bool,
    pub wall_time: Duration,
}

impl DetectorModel {
    pub fn assemble(
        stats: Vec<ClassGaussianStats>,
        ensemble: &FittedEnsemble,
        threshold: f64,
        tap_manifest: Vec<TapPoint>,
        provenance: Provenance,
    ) -> Result<Self, DetectError> {
        if stats.is_empty() || stats.len() != ensemble.alpha.len() {
            return Err(DetectError::BadConfig(format!(
                "{} layer stats vs {} ensemble weights",
                stats.len(),
                ensemble.alpha.len()
            )));
        }
        if !ensemble.alpha.iter().all(|a| a.is_finite())
            || !ensemble.bias.is_finite()
            || !threshold.is_finite()
            || ensemble.epsilon < 0.0
        {
            return Err(DetectError::BadConfig(
                "ensemble weights, bias, eps and threshold must be finite".to_string(),
            ));
        }
        Ok(DetectorModel {
            stats,
            epsilon: ensemble.epsilon,
            alpha: ensemble.alpha.clone(),
            bias: ensemble.bias,
            threshold,
            tap_manifest,
            provenance,
        })
    }

    pub fn stats(&self) -> &[ClassGaussianStats] {
        &self.stats
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, rho: f64) {
        self.threshold = rho;
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn tap_manifest(&self) -> &[TapPoint] {
        &self.tap_manifest
    }

    /// Fused score `M* = b + sum alpha_l M_l` for a slice of images.
    pub fn ensemble_scores(
        &self,
        model: &SmallCnn,
        images: &[Tensor],
    ) -> Result<Vec<f64>, DetectError> {
        self.check_digest(model)?;
        let rows = score_matrix(model, &self.stats, images, self.epsilon)?;
        Ok(rows
            .iter()
            .map(|r| self.bias + self.alpha.iter().zip(r).map(|(a, m)| a * m).sum::<f64>())
            .collect())
    }

    /// Score one `[3,H,W]` input and apply the threshold rule
    /// (`M* >= rho` is in-distribution, boundary inclusive).
    pub fn score(&self, model: &SmallCnn, x: &Tensor) -> Result<ScoreRecord, DetectError> {
        self.check_digest(model)?;
        let start = Instant::now();
        let mut layer_scores = Vec::with_capacity(self.stats.len());
        for stats in &self.stats {
            layer_scores.push(layer_confidence(model, stats, x, self.epsilon)?);
        }
        let ensemble_score = self.bias
            + self.alpha.iter().zip(&layer_scores).map(|(a, m)| a * m).sum::<f64>();
        Ok(ScoreRecord {
            layer_scores,
            ensemble_score,
            in_distribution: ensemble_score >= self.threshold,
            wall_time: start.elapsed(),
        })
    }

    fn check_digest(&self, model: &SmallCnn) -> Result<(), DetectError> {
        let got = model.digest();
        if got != self.provenance.model_digest {
            return Err(DetectError::DigestMismatch {
                expected: self.provenance.model_digest.clone(),
                got,
            });
        }
        Ok(())
    }
}

// ── .det container ───────────────────────────────────────────────────

const MAGIC: &[u8; 7] = b"SNTLDET";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct DetHeader {
    epsilon: f32,
    alpha: Vec<f64>,
    bias: f64,
    threshold: f64,
    lambda_per_layer: Vec<f64>,
    counts_per_layer: Vec<Vec<usize>>,
    tap_manifest: Vec<TapPoint>,
    provenance: Provenance,
    num_layers: usize,
}

pub fn encode(detector: &DetectorModel) -> Vec<u8> {
    let header = DetHeader {
        epsilon: detector.epsilon,
        alpha: detector.alpha.clone(),
        bias: detector.bias,
        threshold: detector.threshold,
        lambda_per_layer: detector.stats.iter().map(|s| s.lambda()).collect(),
        counts_per_layer: detector.stats.iter().map(|s| s.counts().to_vec()).collect(),
        tap_manifest: detector.tap_manifest.clone(),
        provenance: detector.provenance.clone(),
        num_layers: detector.stats.len(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, header_json.len() as u32);
    out.extend_from_slice(&header_json);
    for stats in &detector.stats {
        let d = stats.dim();
        let c = stats.num_classes();
        let mut means = vec![0.0f32; c * d];
        for class in 0..c {
            for (j, &v) in stats.mean(class).iter().enumerate() {
                means[class * d + j] = v as f32;
            }
        }
        let sections = [
            Tensor::new(vec![c, d], means).expect("means shape"),
            Tensor::new(vec![d, d], stats.covariance().iter().map(|&v| v as f32).collect())
                .expect("cov shape"),
            Tensor::new(vec![d, d], stats.chol_lower().iter().map(|&v| v as f32).collect())
                .expect("chol shape"),
        ];
        for t in sections {
            let bytes = ten_io::encode(&t);
            put_u32(&mut out, bytes.len() as u32);
            out.extend_from_slice(&bytes);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DetectorModel, DetectError> {
    let mut r = Reader::new(bytes);
    if r.take(7).map_err(DetectError::File)? != MAGIC {
        return Err(DetectError::File(FileError::BadMagic { expected: "SNTLDET" }));
    }
    let version = r.u8().map_err(DetectError::File)?;
    if version != VERSION {
        return Err(DetectError::File(FileError::UnsupportedVersion {
            expected: VERSION,
            got: version,
        }));
    }
    let header_len = r.u32().map_err(DetectError::File)? as usize;
    let header: DetHeader = serde_json::from_slice(r.take(header_len).map_err(DetectError::File)?)
        .map_err(|e| DetectError::File(FileError::Metadata(e.to_string())))?;

    let mut stats = Vec::with_capacity(header.num_layers);
    for layer in 0..header.num_layers {
        let section = |r: &mut Reader| -> Result<Tensor, DetectError> {
            let len = r.u32().map_err(DetectError::File)? as usize;
            ten_io::decode(r.take(len).map_err(DetectError::File)?).map_err(DetectError::File)
        };
        let means_t = section(&mut r)?;
        let cov_t = section(&mut r)?;
        let chol_t = section(&mut r)?;
        let (c, d) = (means_t.shape()[0], means_t.shape()[1]);
        let means: Vec<Vec<f64>> = (0..c)
            .map(|class| {
                means_t.data()[class * d..(class + 1) * d].iter().map(|&v| v as f64).collect()
            })
            .collect();
        let covariance: Vec<f64> = cov_t.data().iter().map(|&v| v as f64).collect();
        let chol: Vec<f64> = chol_t.data().iter().map(|&v| v as f64).collect();
        stats.push(
            ClassGaussianStats::from_parts(
                layer,
                means,
                covariance,
                chol,
                header.lambda_per_layer[layer],
                header.counts_per_layer[layer].clone(),
            )
            .map_err(DetectError::Gaussian)?,
        );
    }
    if r.remaining() != 0 {
        return Err(DetectError::File(FileError::Metadata(format!(
            "{} trailing bytes",
            r.remaining()
        ))));
    }

    Ok(DetectorModel {
        stats,
        epsilon: header.epsilon,
        alpha: header.alpha,
        bias: header.bias,
        threshold: header.threshold,
        tap_manifest: header.tap_manifest,
        provenance: header.provenance,
    })
}

pub fn save(path: &Path, detector: &DetectorModel) -> Result<(), DetectError> {
    atomic_write(path, &encode(detector)).map_err(DetectError::File)
}

pub fn load(path: &Path) -> Result<DetectorModel, DetectError> {
    let bytes = std::fs::read(path).map_err(|e| DetectError::File(FileError::Io(e)))?;
    decode(&bytes)
}

/// The preprocessing-magnitude grid searched during ensemble fitting.
pub fn default_eps_grid() -> Vec<f32> {
    vec![0.0, 0.0005, 0.001, 0.0014, 0.002, 0.005, 0.01]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_tap_manifest;

    fn toy_stats(layer: usize, dim: usize) -> ClassGaussianStats {
        // Identity covariance, means at 0 and at 2*e1.
        let mut mean1 = vec![0.0f64; dim];
        mean1[0] = 2.0;
        let mut eye = vec![0.0f64; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        ClassGaussianStats::from_parts(
            layer,
            vec![vec![0.0; dim], mean1],
            eye.clone(),
            eye,
            0.0,
            vec![1, 1],
        )
        .unwrap()
    }

    #[test]
    fn confidence_is_never_positive_and_zero_at_mean() {
        let stats = toy_stats(0, 3);
        assert_eq!(stats.confidence(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(stats.confidence(&[0.7, -0.3, 0.2]).unwrap() < 0.0);
    }

    #[test]
    fn calibration_percentile_interpolates() {
        let scores: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let rho = calibrate_threshold(&scores).unwrap();
        assert!((rho - 5.95).abs() < 1e-12, "rho {rho}");
        let kept = scores.iter().filter(|&&s| s >= rho).count();
        assert!(kept as f64 / scores.len() as f64 >= 0.95);
    }

    #[test]
    fn calibration_constant_scores() {
        let scores = vec![3.25f64; 25];
        let rho = calibrate_threshold(&scores).unwrap();
        assert_eq!(rho, 3.25);
        // TPR = 100% under the boundary-inclusive rule.
        assert!(scores.iter().all(|&s| s >= rho));
    }

    #[test]
    fn calibration_needs_twenty_samples() {
        let scores = vec![1.0f64; 19];
        assert!(matches!(
            calibrate_threshold(&scores),
            Err(DetectError::TooFewSamples { needed: 20, got: 19 })
        ));
    }

    #[test]
    fn calibration_keeps_tpr_with_outlier() {
        let mut scores: Vec<f64> = (0..40).map(|v| v as f64).collect();
        scores[0] = -1e15;
        let rho = calibrate_threshold(&scores).unwrap();
        let tpr = scores.iter().filter(|&&s| s >= rho).count() as f64 / scores.len() as f64;
        assert!(tpr >= 0.95);
    }

    fn fitted_toy_detector() -> (SmallCnn, DetectorModel) {
        let model = SmallCnn::new(2, 8, 1).unwrap();
        let stats =
            vec![toy_stats(0, 16), toy_stats(1, 32), toy_stats(2, 64), toy_stats(3, 64)];
        let ensemble = FittedEnsemble {
            alpha: vec![0.5, 0.25, 0.2, 0.05],
            bias: 0.1,
            epsilon: 0.0,
            auroc: 1.0,
            grid: vec![(0.0, 1.0)],
        };
        let provenance = Provenance {
            model_digest: model.digest(),
            fit_seed: 7,
            validation_positives: 10,
            validation_negatives: 10,
            negative_source: "test".to_string(),
        };
        let det = DetectorModel::assemble(
            stats,
            &ensemble,
            -5.0,
            default_tap_manifest(),
            provenance,
        )
        .unwrap();
        (model, det)
    }

    #[test]
    fn score_record_is_consistent_and_checks_digest() {
        let (model, det) = fitted_toy_detector();
        let x = Tensor::from_fn(vec![3, 8, 8], |i| (i % 9) as f32 / 9.0);
        let rec = det.score(&model, &x).unwrap();
        let recomputed = det.bias()
            + det
                .alpha()
                .iter()
                .zip(&rec.layer_scores)
                .map(|(a, m)| a * m)
                .sum::<f64>();
        assert!((rec.ensemble_score - recomputed).abs() < 1e-6);
        assert!(rec.layer_scores.iter().all(|&m| m <= 0.0));
        assert_eq!(rec.in_distribution, rec.ensemble_score >= det.threshold());

        let other = SmallCnn::new(2, 8, 99).unwrap();
        assert!(matches!(
            det.score(&other, &x),
            Err(DetectError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn decision_monotone_in_threshold() {
        let (model, mut det) = fitted_toy_detector();
        let x = Tensor::from_fn(vec![3, 8, 8], |i| (i % 5) as f32 / 5.0);
        let base = det.score(&model, &x).unwrap();
        // Raising rho can only turn accepts into rejects.
        det.set_threshold(base.ensemble_score);
        assert!(det.score(&model, &x).unwrap().in_distribution);
        det.set_threshold(base.ensemble_score + 1e-9);
        assert!(!det.score(&model, &x).unwrap().in_distribution);
    }

    #[test]
    fn boundary_rule_is_inclusive_with_zero_alpha() {
        let model = SmallCnn::new(2, 8, 2).unwrap();
        let stats =
            vec![toy_stats(0, 16), toy_stats(1, 32), toy_stats(2, 64), toy_stats(3, 64)];
        let ensemble = FittedEnsemble {
            alpha: vec![0.0; 4],
            bias: 0.0,
            epsilon: 0.0,
            auroc: 0.5,
            grid: vec![(0.0, 0.5)],
        };
        let det = DetectorModel::assemble(
            stats,
            &ensemble,
            0.0,
            default_tap_manifest(),
            Provenance {
                model_digest: model.digest(),
                fit_seed: 0,
                validation_positives: 1,
                validation_negatives: 1,
                negative_source: "test".to_string(),
            },
        )
        .unwrap();
        let x = Tensor::zeros(vec![3, 8, 8]);
        let rec = det.score(&model, &x).unwrap();
        assert_eq!(rec.ensemble_score, 0.0);
        assert!(rec.in_distribution);
    }

    #[test]
    fn det_container_round_trip_preserves_scores() {
        let (model, det) = fitted_toy_detector();
        let bytes = encode(&det);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.alpha(), det.alpha());
        assert_eq!(back.threshold(), det.threshold());
        assert_eq!(back.epsilon(), det.epsilon());
        assert_eq!(back.provenance(), det.provenance());
        // A second encode of the decoded detector is byte-identical: the
        // persisted statistics are exactly representable in f32.
        assert_eq!(encode(&back), bytes);

        let x = Tensor::from_fn(vec![3, 8, 8], |i| (i % 7) as f32 / 7.0);
        let a = det.score(&model, &x).unwrap();
        let b = back.score(&model, &x).unwrap();
        // Fit-time statistics are f64; persistence quantizes to f32.
        let rel = (a.ensemble_score - b.ensemble_score).abs()
            / a.ensemble_score.abs().max(1.0);
        assert!(rel < 1e-4, "{} vs {}", a.ensemble_score, b.ensemble_score);
    }
}
