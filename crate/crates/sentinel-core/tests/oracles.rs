//! Independent-oracle checks for the Gaussian machinery and the detection
//! metrics: explicit-inverse Mahalanobis at tiny dimension, a sampling
//! oracle with known population parameters, brute-force class search, the
//! pairwise AUROC oracle, and exhaustive threshold-enumeration oracles for
//! AUPR and detection accuracy.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use sentinel_core::gaussian::ClassGaussianStats;
use sentinel_core::metrics::{self, PrPositive, ScoredSample};
use sentinel_core::rng::{derive_seed, seeded};

// ── Dense helpers for the oracle side (f64, explicit) ────────────────

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Gauss-Jordan inverse — the route the implementation must never take.
fn explicit_inverse(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        for j in 0..n {
            a.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let p = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * n + col];
            for j in 0..n {
                a[row * n + j] -= f * a[col * n + j];
                inv[row * n + j] -= f * inv[col * n + j];
            }
        }
    }
    inv
}

fn quad_form(inv: &[f64], r: &[f64]) -> f64 {
    let n = r.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += r[i] * inv[i * n + j] * r[j];
        }
    }
    acc
}

/// Random SPD system of dimension d: A·Aᵀ + I.
fn random_spd(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut at = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            at[i * d + j] = a[j * d + i];
        }
    }
    let mut m = mat_mul(&a, &at, d);
    for i in 0..d {
        m[i * d + i] += 1.0;
    }
    m
}

fn chol_lower(m: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut acc = m[i * d + j];
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + i] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    l
}

fn stats_from_spd(means: Vec<Vec<f64>>, spd: &[f64], d: usize) -> ClassGaussianStats {
    let counts = vec![1usize; means.len()];
    ClassGaussianStats::from_parts(0, means, spd.to_vec(), chol_lower(spd, d), 0.0, counts)
        .unwrap()
}

/// 200 random SPD systems (d <= 8): the triangular-solve distance matches
/// explicit-inverse evaluation within 1e-8, and closest_class matches an
/// exhaustive per-class comparison on every query.
#[test]
fn mahalanobis_matches_explicit_inverse_oracle() {
    for case in 0..200 {
        let mut rng = seeded(derive_seed(0xD157, &format!("spd{case}")));
        let d = rng.random_range(1..=8usize);
        let classes = rng.random_range(2..=4usize);
        let spd = random_spd(&mut rng, d);
        let inv = explicit_inverse(&spd, d);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let stats = stats_from_spd(means.clone(), &spd, d);

        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut best = (0usize, f64::INFINITY);
            for (c, mean) in means.iter().enumerate() {
                let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
                let expected = quad_form(&inv, &r);
                let got = stats.mahalanobis_sq(&x, c).unwrap();
                assert!(
                    (got - expected).abs() < 1e-8,
                    "case {case} class {c}: {got} vs {expected}"
                );
                if expected < best.1 {
                    best = (c, expected);
                }
            }
            assert_eq!(stats.closest_class(&x).unwrap(), best.0, "case {case}");
        }
    }
}

/// 500 samples from two known 3-D Gaussians with a shared covariance:
/// fitted means within 0.1 of truth, fitted covariance within 0.1
/// element-wise.
#[test]
fn fit_recovers_known_population_parameters() {
    let mut rng = seeded(derive_seed(0xD157, "sampling"));
    let d = 3;
    // Target covariance via its Cholesky factor.
    let spd = random_spd(&mut rng, d);
    let scale = 0.08;
    let cov_true: Vec<f64> = spd.iter().map(|v| v * scale).collect();
    let l = chol_lower(&cov_true, d);
    let mu = [vec![1.0, -0.5, 0.25], vec![-1.0, 0.75, -0.25]];

    fn gauss(rng: &mut ChaCha20Rng) -> f64 {
        // Box-Muller.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..500 {
        let c = i % 2;
        let z: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let mut x = mu[c].clone();
        for row in 0..d {
            for k in 0..=row {
                x[row] += l[row * d + k] * z[k];
            }
        }
        features.push(x);
        labels.push(c);
    }

    let stats = ClassGaussianStats::fit(0, &features, &labels, 2, None).unwrap();
    for c in 0..2 {
        for (got, want) in stats.mean(c).iter().zip(&mu[c]) {
            assert!((got - want).abs() < 0.1, "mean[{c}]: {got} vs {want}");
        }
    }
    for (got, want) in stats.covariance().iter().zip(&cov_true) {
        assert!((got - want).abs() < 0.1, "cov: {got} vs {want}");
    }
}

/// 200 random queries, C=3, d=4: closest_class agrees with exhaustive
/// distance comparison on every query.
#[test]
fn closest_class_matches_brute_force() {
    let mut rng = seeded(derive_seed(0xD157, "brute"));
    let d = 4;
    let features: Vec<Vec<f64>> = (0..60)
        .map(|i| {
            let center = (i % 3) as f64 * 2.0;
            (0..d).map(|_| center + rng.random_range(-1.0..1.0)).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let stats = ClassGaussianStats::fit(0, &features, &labels, 3, None).unwrap();

    for _ in 0..200 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..6.0)).collect();
        let dists: Vec<f64> =
            (0..3).map(|c| stats.mahalanobis_sq(&x, c).unwrap()).collect();
        let mut brute = 0;
        for c in 1..3 {
            if dists[c] < dists[brute] {
                brute = c;
            }
        }
        assert_eq!(stats.closest_class(&x).unwrap(), brute);
    }
}

// ── Metric oracles ───────────────────────────────────────────────────

fn random_samples(rng: &mut ChaCha20Rng, max_n: usize, tie_prone: bool) -> Vec<ScoredSample> {
    let n_pos = rng.random_range(1..=max_n / 2);
    let n_neg = rng.random_range(1..=max_n / 2);
    let draw = |rng: &mut ChaCha20Rng| -> f64 {
        if tie_prone {
            // Coarse grid makes ties common.
            (rng.random_range(-5i32..=5) as f64) / 2.0
        } else {
            rng.random_range(-10.0..10.0)
        }
    };
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for _ in 0..n_pos {
        out.push(ScoredSample::new(draw(rng), true));
    }
    for _ in 0..n_neg {
        out.push(ScoredSample::new(draw(rng), false));
    }
    out
}

fn auroc_pairwise_oracle(samples: &[ScoredSample]) -> f64 {
    let pos: Vec<f64> = samples.iter().filter(|s| s.is_positive).map(|s| s.score).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| !s.is_positive).map(|s| s.score).collect();
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                acc += 1.0;
            } else if p == n {
                acc += 0.5;
            }
        }
    }
    acc / (pos.len() as f64 * neg.len() as f64)
}

fn distinct_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut t: Vec<f64> = samples.iter().map(|s| s.score).collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn counts_at(samples: &[ScoredSample], t: f64) -> (usize, usize) {
    let tp = samples.iter().filter(|s| s.is_positive && s.score >= t).count();
    let fp = samples.iter().filter(|s| !s.is_positive && s.score >= t).count();
    (tp, fp)
}

fn aupr_enumeration_oracle(samples: &[ScoredSample]) -> f64 {
    let p = samples.iter().filter(|s| s.is_positive).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_thresholds(samples) {
        let (tp, fp) = counts_at(samples, t);
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

fn detection_accuracy_scan_oracle(samples: &[ScoredSample]) -> f64 {
    let p = samples.iter().filter(|s| s.is_positive).count() as f64;
    let n = samples.len() as f64 - p;
    let mut thresholds = distinct_thresholds(samples);
    thresholds.push(thresholds[0] + 1.0); // predict-nothing-positive sentinel
    let mut best: f64 = 0.0;
    for t in thresholds {
        let (tp, fp) = counts_at(samples, t);
        let tpr = tp as f64 / p;
        let tnr = (n - fp as f64) / n;
        best = best.max((tpr + tnr) / 2.0);
    }
    best
}

/// AUROC trapezoid equals the pairwise-comparison oracle (ties counted
/// half) to 1e-12; AUPR and detection accuracy match exhaustive threshold
/// enumeration to 1e-12. 1,000 random instances of up to 200 samples.
#[test]
fn metrics_match_enumeration_oracles() {
    for case in 0..1000 {
        let mut rng = seeded(derive_seed(0x0E7A1, &format!("m{case}")));
        let samples = random_samples(&mut rng, 200, case % 3 == 0);

        let a = metrics::auroc(&samples).unwrap();
        assert!(
            (a - auroc_pairwise_oracle(&samples)).abs() < 1e-12,
            "auroc case {case}"
        );

        let pr = metrics::aupr(&samples, PrPositive::In).unwrap();
        assert!(
            (pr - aupr_enumeration_oracle(&samples)).abs() < 1e-12,
            "aupr-in case {case}"
        );
        let flipped: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample::new(-s.score, !s.is_positive))
            .collect();
        let pr_out = metrics::aupr(&samples, PrPositive::Out).unwrap();
        assert!(
            (pr_out - aupr_enumeration_oracle(&flipped)).abs() < 1e-12,
            "aupr-out case {case}"
        );

        let da = metrics::detection_accuracy(&samples).unwrap();
        assert!(
            (da - detection_accuracy_scan_oracle(&samples)).abs() < 1e-12,
            "detection accuracy case {case}"
        );
    }
}

/// Identically distributed scores, 10,000 per side: TNR at TPR 95% lands
/// near the analytic 5% expectation.
#[test]
fn tnr_at_tpr95_on_identical_distributions() {
    let mut rng = seeded(derive_seed(0x0E7A1, "identical"));
    let samples: Vec<ScoredSample> = (0..20_000)
        .map(|i| ScoredSample::new(rng.random_range(0.0..1.0), i % 2 == 0))
        .collect();
    let v = metrics::tnr_at_tpr(&samples, 0.95).unwrap();
    assert!((v - 0.05).abs() < 0.03, "tnr {v}");
}
