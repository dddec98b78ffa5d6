//! Threshold-free and threshold-based detection metrics over binary
//! scores (higher = more in-distribution), plus the report table renderer.
//!
//! Conventions: positives are in-distribution samples; a threshold `t`
//! predicts positive when `score >= t`. Equal scores are grouped into a
//! single ROC/PR step. AUROC is the trapezoidal area, which equals
//! `P(score_pos > score_neg) + ½·P(equal)`.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// Metrics need at least one positive and one negative sample.
    SingleClass { positives: usize, negatives: usize },
    NonFiniteScore,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SingleClass { positives, negatives } => write!(
                f,
                "need both classes: {positives} positive(s), {negatives} negative(s)"
            ),
            Self::NonFiniteScore => write!(f, "scores must be finite"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// One scored sample: higher score means "more in-distribution";
/// `is_positive` marks actual in-distribution samples.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSample {
    pub score: f64,
    pub is_positive: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_positive: bool) -> Self {
        ScoredSample { score, is_positive }
    }
}

/// Which class counts as positive for a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrPositive {
    /// In-distribution is the positive class.
    In,
    /// Abnormal (out) is the positive class; scores are negated.
    Out,
}

fn validate(samples: &[ScoredSample]) -> Result<(usize, usize), MetricsError> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let positives = samples.iter().filter(|s| s.is_positive).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Samples sorted by descending score, grouped at equal scores, as
/// cumulative `(threshold, tp, fp)` rows.
fn descending_groups(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].is_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// ROC curve: `(FPR, TPR)` at every distinct threshold, descending, from
/// `(0,0)` to `(1,1)`. Tied scores collapse into one step.
pub fn roc_points(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (p, n) = validate(samples)?;
    let mut points = vec![(0.0, 0.0)];
    for (_, tp, fp) in descending_groups(samples) {
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

/// Area under the ROC curve by trapezoidal integration of [`roc_points`].
pub fn auroc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let points = roc_points(samples)?;
    let mut area = 0.0f64;
    for w in points.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        area += (x2 - x1) * (y1 + y2) / 2.0;
    }
    Ok(area)
}

/// TNR at the highest threshold whose TPR reaches `tpr_target`.
pub fn tnr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64, MetricsError> {
    let (p, n) = validate(samples)?;
    for (_, tp, fp) in descending_groups(samples) {
        if tp as f64 / p as f64 >= tpr_target {
            let tnr = (n - fp) as f64 / n as f64;
            return Ok(tnr);
        }
    }
    // TPR reaches 1.0 at the lowest threshold, so the sweep always returns
    // for any target <= 1. Targets above 1 are unsatisfiable.
    Ok(0.0)
}

/// Area under the precision-recall curve in average-precision form:
/// `AP = Σ (R_k − R_{k−1}) · P_k` over descending-score groups.
pub fn aupr(samples: &[ScoredSample], positive: PrPositive) -> Result<f64, MetricsError> {
    let flipped: Vec<ScoredSample>;
    let view: &[ScoredSample] = match positive {
        PrPositive::In => samples,
        PrPositive::Out => {
            flipped = samples
                .iter()
                .map(|s| ScoredSample::new(-s.score, !s.is_positive))
                .collect();
            &flipped
        }
    };
    let (p, _) = validate(view)?;
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for (_, tp, fp) in descending_groups(view) {
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Maximum over thresholds of balanced accuracy `(TPR + TNR) / 2`.
/// Floor is 0.5 (the empty-accept and accept-all thresholds).
pub fn detection_accuracy(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let (p, n) = validate(samples)?;
    let mut best = 0.5f64;
    for (_, tp, fp) in descending_groups(samples) {
        let tpr = tp as f64 / p as f64;
        let tnr = (n - fp) as f64 / n as f64;
        best = best.max((tpr + tnr) / 2.0);
    }
    Ok(best)
}

// ── Report ───────────────────────────────────────────────────────────

/// The five detection metrics, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSet {
    pub tnr_at_tpr95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub detection_accuracy: f64,
}

impl MetricSet {
    pub fn compute(samples: &[ScoredSample]) -> Result<Self, MetricsError> {
        Ok(MetricSet {
            tnr_at_tpr95: tnr_at_tpr(samples, 0.95)?,
            auroc: auroc(samples)?,
            aupr_in: aupr(samples, PrPositive::In)?,
            aupr_out: aupr(samples, PrPositive::Out)?,
            detection_accuracy: detection_accuracy(samples)?,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "tnr_at_tpr95" => Some(self.tnr_at_tpr95),
            "auroc" => Some(self.auroc),
            "aupr_in" => Some(self.aupr_in),
            "aupr_out" => Some(self.aupr_out),
            "detection_accuracy" => Some(self.detection_accuracy),
            _ => None,
        }
    }
}

/// One (model, detector, abnormality source) result row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub detector: String,
    pub source: String,
    pub n_positive: usize,
    pub n_negative: usize,
    pub metrics: MetricSet,
}

/// Full evaluation report. The embedded config and seed are sufficient to
/// re-run the pipeline that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub config: serde_json::Value,
}

const DETECTOR_ORDER: [&str; 4] = ["MSP", "ODIN", "LID", "Mahalanobis"];
const SOURCE_ORDER: [&str; 4] = ["FGSM", "BIM", "DeepFool", "CW"];
const METRIC_ROWS: [(&str, &str); 5] = [
    ("TNR at TPR 95%", "tnr_at_tpr95"),
    ("AUROC", "auroc"),
    ("AUPR-in", "aupr_in"),
    ("AUPR-out", "aupr_out"),
    ("Detection accuracy", "detection_accuracy"),
];

fn rank_in(order: &[&str], name: &str) -> (usize, String) {
    match order.iter().position(|&o| o == name) {
        Some(i) => (i, String::new()),
        None => (order.len(), name.to_string()),
    }
}

/// Assemble rows into a report with canonical row order (model, then
/// detector, then source).
pub fn make_report(
    mut rows: Vec<EvalRow>,
    config_digest: String,
    seed: u64,
    config: serde_json::Value,
) -> EvalReport {
    rows.sort_by(|a, b| {
        (a.model.as_str(), rank_in(&DETECTOR_ORDER, &a.detector), rank_in(&SOURCE_ORDER, &a.source))
            .cmp(&(
                b.model.as_str(),
                rank_in(&DETECTOR_ORDER, &b.detector),
                rank_in(&SOURCE_ORDER, &b.source),
            ))
    });
    EvalReport { config_digest, seed, rows, config }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    fn ordered_unique(&self, key: impl Fn(&EvalRow) -> &str, order: &[&str]) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for row in &self.rows {
            let k = key(row);
            if !seen.iter().any(|s| s == k) {
                seen.push(k.to_string());
            }
        }
        seen.sort_by(|a, b| rank_in(order, a).cmp(&rank_in(order, b)));
        seen
    }

    /// Render the table: models outer, metric rows inner, one column per
    /// detector × source with sources in attack order. Values in percent
    /// with two decimals; missing combinations stay empty.
    pub fn to_csv(&self) -> String {
        let detectors = self.ordered_unique(|r| &r.detector, &DETECTOR_ORDER);
        let sources = self.ordered_unique(|r| &r.source, &SOURCE_ORDER);
        let models = self.ordered_unique(|r| &r.model, &[]);

        let mut out = String::from("Model,Metric");
        for d in &detectors {
            for s in &sources {
                out.push_str(&format!(",{d} {s}"));
            }
        }
        out.push('\n');

        for m in &models {
            for (label, key) in METRIC_ROWS {
                out.push_str(&format!("{m},{label}"));
                for d in &detectors {
                    for s in &sources {
                        out.push(',');
                        let cell = self
                            .rows
                            .iter()
                            .find(|r| &r.model == m && &r.detector == d && &r.source == s)
                            .and_then(|r| r.metrics.get(key));
                        if let Some(v) = cell {
                            out.push_str(&format!("{:.2}", v * 100.0));
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed(pos: &[f64], neg: &[f64]) -> Vec<ScoredSample> {
        pos.iter()
            .map(|&s| ScoredSample::new(s, true))
            .chain(neg.iter().map(|&s| ScoredSample::new(s, false)))
            .collect()
    }

    #[test]
    fn roc_minimal_case() {
        let pts = roc_points(&mixed(&[1.0], &[0.0])).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn roc_collapses_ties() {
        let pts = roc_points(&mixed(&[0.5, 0.5], &[0.5])).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn roc_rejects_single_class() {
        let samples: Vec<ScoredSample> =
            [1.0, 2.0].iter().map(|&s| ScoredSample::new(s, true)).collect();
        assert!(matches!(
            roc_points(&samples),
            Err(MetricsError::SingleClass { .. })
        ));
    }

    #[test]
    fn auroc_perfect_and_coin_flip() {
        assert_eq!(auroc(&mixed(&[2.0, 3.0], &[0.0, 1.0])).unwrap(), 1.0);
        // 2 of 4 pairs won: 0.9>0.8, 0.9>0.2, 0.1<0.8, 0.1<0.2.
        let v = auroc(&mixed(&[0.9, 0.1], &[0.8, 0.2])).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auroc_label_flip_symmetry() {
        let samples = mixed(&[0.9, 0.4, 0.35], &[0.5, 0.3]);
        let flipped: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample::new(s.score, !s.is_positive))
            .collect();
        let a = auroc(&samples).unwrap();
        let b = auroc(&flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tnr_at_tpr_threshold_scan() {
        // pos = 1..=100, neg = {0.5}: t=6 gives TPR 0.95, neg 0.5 < 6.
        let pos: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let v = tnr_at_tpr(&mixed(&pos, &[0.5]), 0.95).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn tnr_perfectly_separated() {
        assert_eq!(tnr_at_tpr(&mixed(&[5.0, 6.0, 7.0], &[1.0, 2.0]), 0.95).unwrap(), 1.0);
    }

    #[test]
    fn aupr_tied_scores_is_base_rate() {
        // All tied: AP equals the positive base rate.
        let v = aupr(&mixed(&[1.0, 1.0, 1.0], &[1.0]), PrPositive::In).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn aupr_perfect_both_orientations() {
        let samples = mixed(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(aupr(&samples, PrPositive::In).unwrap(), 1.0);
        assert_eq!(aupr(&samples, PrPositive::Out).unwrap(), 1.0);
    }

    #[test]
    fn detection_accuracy_cases() {
        assert_eq!(detection_accuracy(&mixed(&[2.0], &[1.0])).unwrap(), 1.0);
        let v = detection_accuracy(&mixed(&[0.9, 0.1], &[0.8, 0.2])).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
        let tied = detection_accuracy(&mixed(&[1.0, 1.0], &[1.0])).unwrap();
        assert_eq!(tied, 0.5);
    }

    #[test]
    fn report_renders_percent_cells() {
        let perfect = MetricSet {
            tnr_at_tpr95: 1.0,
            auroc: 1.0,
            aupr_in: 1.0,
            aupr_out: 1.0,
            detection_accuracy: 1.0,
        };
        let rows = vec![EvalRow {
            model: "smallcnn".to_string(),
            detector: "Mahalanobis".to_string(),
            source: "FGSM".to_string(),
            n_positive: 10,
            n_negative: 10,
            metrics: perfect,
        }];
        let report = make_report(rows, "digest".to_string(), 7, serde_json::json!({}));
        let csv = report.to_csv();
        assert!(csv.contains("Mahalanobis FGSM"));
        for line in csv.lines().skip(1) {
            assert!(line.ends_with("100.00"), "line: {line}");
        }
    }

    #[test]
    fn report_column_order_is_attack_order() {
        let m = MetricSet {
            tnr_at_tpr95: 0.5,
            auroc: 0.5,
            aupr_in: 0.5,
            aupr_out: 0.5,
            detection_accuracy: 0.5,
        };
        let rows: Vec<EvalRow> = ["CW", "FGSM", "DeepFool", "BIM"]
            .iter()
            .map(|s| EvalRow {
                model: "m".to_string(),
                detector: "LID".to_string(),
                source: s.to_string(),
                n_positive: 1,
                n_negative: 1,
                metrics: m.clone(),
            })
            .collect();
        let report = make_report(rows, "d".to_string(), 0, serde_json::json!({}));
        let header = report.to_csv().lines().next().unwrap().to_string();
        assert_eq!(
            header,
            "Model,Metric,LID FGSM,LID BIM,LID DeepFool,LID CW"
        );
    }

    #[test]
    fn report_json_round_trip_re_renders_identically() {
        let m = MetricSet {
            tnr_at_tpr95: 0.123456,
            auroc: 0.9,
            aupr_in: 0.8,
            aupr_out: 0.7,
            detection_accuracy: 0.6,
        };
        let rows = vec![EvalRow {
            model: "m".to_string(),
            detector: "MSP".to_string(),
            source: "OOD".to_string(),
            n_positive: 5,
            n_negative: 5,
            metrics: m,
        }];
        let report = make_report(rows, "d".to_string(), 1, serde_json::json!({"k": 1}));
        let json = report.to_json();
        let parsed = EvalReport::from_json(&json).unwrap();
        assert_eq!(parsed.to_csv(), report.to_csv());
        assert_eq!(parsed.to_json(), json);
    }
}
