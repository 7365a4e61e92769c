//! Evaluation suite: Gaussian NLL, closed-form Gaussian CRPS, centered
//! quantile miscalibration (CQM), classification NLL, confidence-binned ECE,
//! rank-based AUROC, and entropy utilities. Natural log everywhere.

use crate::error::{GapaError, Result};
use crate::tensor::Matrix;
use statrs::distribution::{ContinuousCDF, Normal};

/// Per-sample Gaussian negative log-likelihood
/// `½·log(2πσ²) + (y−μ)²/(2σ²)`.
pub fn gaussian_nll_one(y: f64, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(GapaError::NonPositiveVariance { value: sigma2 });
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() + (y - mu) * (y - mu) / (2.0 * sigma2))
}

/// Batch mean of the Gaussian NLL.
pub fn gaussian_nll(y: &[f64], mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    check_same_len("gaussian_nll", y.len(), mu.len(), sigma2.len())?;
    let mut acc = 0.0;
    for i in 0..y.len() {
        acc += gaussian_nll_one(y[i], mu[i], sigma2[i])?;
    }
    Ok(acc / y.len() as f64)
}

fn check_same_len(context: &'static str, a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c || a == 0 {
        return Err(GapaError::DimensionMismatch {
            context,
            expected: a,
            got: b.min(c),
        });
    }
    Ok(())
}

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form CRPS of a Gaussian predictive:
/// `σ·[ζ(2Φ(ζ)−1) + 2φ(ζ) − 1/√π]` with `ζ = (y−μ)/σ`.
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(GapaError::NonPositiveScale { value: sigma });
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let zeta = (y - mu) / sigma;
    Ok(sigma
        * (zeta * (2.0 * n.cdf(zeta) - 1.0) + 2.0 * std_normal_pdf(zeta)
            - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Centered quantile metric: mean over `levels` of the absolute gap between
/// nominal central coverage `q` and the empirical coverage of
/// `μ ± σ·Φ⁻¹((1+q)/2)`.
pub fn cqm(y: &[f64], mu: &[f64], sigma: &[f64], levels: &[f64]) -> Result<f64> {
    check_same_len("cqm", y.len(), mu.len(), sigma.len())?;
    if levels.is_empty() || levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(GapaError::InvalidParameter {
            what: "cqm levels must lie in (0, 1)".into(),
        });
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let mut acc = 0.0;
    for &q in levels {
        let z = n.inverse_cdf((1.0 + q) / 2.0);
        let covered = y
            .iter()
            .zip(mu)
            .zip(sigma)
            .filter(|((yi, mi), si)| (*yi - *mi).abs() <= z * **si)
            .count();
        let coverage = covered as f64 / y.len() as f64;
        acc += (coverage - q).abs();
    }
    Ok(acc / levels.len() as f64)
}

/// The nine decile levels 0.1, …, 0.9.
pub fn default_cqm_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Per-bin calibration statistics over max-probability confidence, with
/// equal-width bins on [0, 1].
#[derive(Debug, Clone)]
pub struct BinnedCalibration {
    pub n_bins: usize,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Bins predictions by confidence (the max class probability).
pub fn binned_calibration(
    probs: &Matrix,
    labels: &[usize],
    n_bins: usize,
) -> Result<BinnedCalibration> {
    if probs.rows() != labels.len() || probs.rows() == 0 {
        return Err(GapaError::DimensionMismatch {
            context: "binned_calibration",
            expected: probs.rows(),
            got: labels.len(),
        });
    }
    if n_bins == 0 {
        return Err(GapaError::InvalidParameter {
            what: "n_bins must be >= 1".into(),
        });
    }
    let mut counts = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        let mut arg = 0usize;
        let mut conf = row[0];
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > conf {
                conf = p;
                arg = c;
            }
        }
        let bin = ((conf * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
        conf_sum[bin] += conf;
        if arg == label {
            correct[bin] += 1;
        }
    }
    let mean_confidence = conf_sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let accuracy = correct
        .iter()
        .zip(&counts)
        .map(|(&k, &c)| if c > 0 { k as f64 / c as f64 } else { 0.0 })
        .collect();
    Ok(BinnedCalibration {
        n_bins,
        counts,
        mean_confidence,
        accuracy,
    })
}

/// Expected calibration error: `Σ_m (|B_m|/N)·|acc(B_m) − conf(B_m)|`.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    let bins = binned_calibration(probs, labels, n_bins)?;
    let n: usize = bins.counts.iter().sum();
    let mut acc = 0.0;
    for m in 0..bins.n_bins {
        if bins.counts[m] > 0 {
            acc += bins.counts[m] as f64 / n as f64
                * (bins.accuracy[m] - bins.mean_confidence[m]).abs();
        }
    }
    Ok(acc)
}

/// Rank-based (Mann–Whitney) AUROC with midrank tie handling: ties
/// contribute one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(GapaError::DimensionMismatch {
            context: "auroc",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GapaError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks: tied scores share the average of their 1-based ranks.
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Predictive entropy of a probability vector, in nats.
pub fn predictive_entropy(p: &[f64]) -> f64 {
    crate::heads::entropy(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn nll_zero_at_matching_point_and_reference_variance() {
        // σ² = 1/(2π) makes the log term vanish.
        let s2 = 1.0 / (2.0 * std::f64::consts::PI);
        assert!(gaussian_nll_one(3.0, 3.0, s2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nll_one_sigma_residual() {
        let sigma2 = 0.49;
        let want = 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() + 0.5;
        let got = gaussian_nll_one(0.7, 0.0, sigma2).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn nll_matches_pdf_oracle() {
        // Independent oracle: −log of a directly evaluated normal density.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ys = Vec::new();
        let mut mus = Vec::new();
        let mut s2s = Vec::new();
        for _ in 0..50 {
            ys.push(rng.gen_range(-3.0..3.0));
            mus.push(rng.gen_range(-3.0..3.0));
            s2s.push(rng.gen_range(0.01..4.0));
        }
        let got = gaussian_nll(&ys, &mus, &s2s).unwrap();
        let want: f64 = ys
            .iter()
            .zip(&mus)
            .zip(&s2s)
            .map(|((y, m), s2)| {
                let pdf = (-(y - m) * (y - m) / (2.0 * s2)).exp()
                    / (2.0 * std::f64::consts::PI * s2).sqrt();
                -pdf.ln()
            })
            .sum::<f64>()
            / 50.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_non_positive_variance() {
        assert!(matches!(
            gaussian_nll_one(0.0, 0.0, 0.0),
            Err(GapaError::NonPositiveVariance { .. })
        ));
    }

    /// Quadrature oracle: ∫ (F(t) − 1{t ≥ y})² dt, split at the indicator's
    /// jump so each piece is smooth, composite Simpson per piece.
    fn crps_quadrature(y: f64, mu: f64, sigma: f64) -> f64 {
        let n = Normal::new(mu, sigma).unwrap();
        let lo = (mu - 12.0 * sigma).min(y - 12.0 * sigma);
        let hi = (mu + 12.0 * sigma).max(y + 12.0 * sigma);
        let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| -> f64 {
            let steps = 20_000usize; // even
            let h = (b - a) / steps as f64;
            let mut acc = f(a) + f(b);
            for i in 1..steps {
                let t = a + i as f64 * h;
                acc += f(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let below = |t: f64| {
            let c = n.cdf(t);
            c * c
        };
        let above = |t: f64| {
            let c = n.cdf(t) - 1.0;
            c * c
        };
        simpson(lo, y, &below) + simpson(y, hi, &above)
    }

    #[test]
    fn crps_at_center_matches_quadrature_constant() {
        // y = μ, σ = 1 → 2φ(0) − 1/√π = √(2/π) − 1/√π ≈ 0.23370.
        let got = crps_gaussian(0.0, 0.0, 1.0).unwrap();
        let closed = (2.0 / std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert!((got - closed).abs() < 1e-12);
        assert!((got - 0.23370).abs() < 1e-5);
        assert!((got - crps_quadrature(0.0, 0.0, 1.0)).abs() < 1e-8);
    }

    #[test]
    fn crps_degenerates_to_absolute_error() {
        let got = crps_gaussian(2.0, 1.0, 1e-6).unwrap();
        assert!((got - 1.0).abs() < 1e-4);
    }

    #[test]
    fn crps_matches_quadrature_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let y = rng.gen_range(-3.0..3.0);
            let mu = rng.gen_range(-3.0..3.0);
            let sigma = rng.gen_range(0.1..2.5);
            let got = crps_gaussian(y, mu, sigma).unwrap();
            let want = crps_quadrature(y, mu, sigma);
            assert!(got >= 0.0);
            assert!((got - want).abs() < 1e-6, "y={y} mu={mu} s={sigma}: {got} vs {want}");
        }
    }

    #[test]
    fn cqm_well_calibrated_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut y = Vec::with_capacity(n);
        let mut mu = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for _ in 0..n {
            let m = rng.gen_range(-2.0..2.0);
            let s = rng.gen_range(0.3..2.0);
            mu.push(m);
            sigma.push(s);
            y.push(m + s * rng.sample::<f64, _>(StandardNormal));
        }
        let got = cqm(&y, &mu, &sigma, &default_cqm_levels()).unwrap();
        assert!(got < 0.01, "cqm {got}");
    }

    #[test]
    fn cqm_zero_width_intervals() {
        // σ → 0 with y ≠ μ: coverage 0 at all levels, so CQM = mean(levels).
        let levels = default_cqm_levels();
        let y = vec![1.0; 10];
        let mu = vec![0.0; 10];
        let sigma = vec![1e-300; 10];
        let got = cqm(&y, &mu, &sigma, &levels).unwrap();
        let want = levels.iter().sum::<f64>() / levels.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cqm_full_coverage() {
        let levels = default_cqm_levels();
        let y = vec![0.1; 10];
        let mu = vec![0.0; 10];
        let sigma = vec![1e9; 10];
        let got = cqm(&y, &mu, &sigma, &levels).unwrap();
        let want = levels.iter().map(|q| 1.0 - q).sum::<f64>() / levels.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cqm_invariant_to_positive_affine_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 500;
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let levels = default_cqm_levels();
        let base = cqm(&y, &mu, &sigma, &levels).unwrap();
        let (a, b) = (3.7, -1.2);
        let y2: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let mu2: Vec<f64> = mu.iter().map(|v| a * v + b).collect();
        let sigma2: Vec<f64> = sigma.iter().map(|v| a * v).collect();
        let scaled = cqm(&y2, &mu2, &sigma2, &levels).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn ece_confident_and_correct_is_zero() {
        let probs = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let labels = vec![0, 1, 0];
        assert_eq!(ece(&probs, &labels, 15).unwrap(), 0.0);
    }

    #[test]
    fn ece_confident_and_wrong_is_one() {
        let probs = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = vec![1, 0];
        assert_eq!(ece(&probs, &labels, 15).unwrap(), 1.0);
    }

    #[test]
    fn ece_two_bin_hand_case() {
        // Two confidence groups: 0.62 (3 samples, 2 correct) and 0.95
        // (1 sample, correct). Hand-enumerated bins with n_bins = 10:
        // bin 6 gap |2/3 − 0.62| = 0.046667, bin 9 gap |1 − 0.95| = 0.05.
        let probs = Matrix::from_vec(
            4,
            2,
            vec![0.62, 0.38, 0.62, 0.38, 0.62, 0.38, 0.95, 0.05],
        )
        .unwrap();
        let labels = vec![0, 0, 1, 0];
        let got = ece(&probs, &labels, 10).unwrap();
        let want = 0.75 * (2.0f64 / 3.0 - 0.62).abs() + 0.25 * (1.0f64 - 0.95).abs();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ece_is_permutation_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 60;
        let mut data = Vec::new();
        for _ in 0..n {
            let p = rng.gen_range(0.3..1.0);
            data.push(p);
            data.push(1.0 - p);
        }
        let probs = Matrix::from_vec(n, 2, data.clone()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let base = ece(&probs, &labels, 15).unwrap();
        assert!((0.0..=1.0).contains(&base));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let probs_p = Matrix::from_vec(
            n,
            2,
            perm.iter().flat_map(|&r| probs.row(r).to_vec()).collect(),
        )
        .unwrap();
        let labels_p: Vec<usize> = perm.iter().map(|&r| labels[r]).collect();
        assert_eq!(base, ece(&probs_p, &labels_p, 15).unwrap());
    }

    /// O(N²) pairwise-comparison oracle: wins + half-ties over pos×neg pairs.
    fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auroc_perfect_separation() {
        let scores = vec![0.9, 0.8, 0.2, 0.1];
        let labels = vec![true, true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let scores = vec![0.5; 6];
        let labels = vec![true, false, true, false, false, true];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let n = 20;
            // Coarse grid scores force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..8) as f64) / 4.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let got = auroc(&scores, &labels).unwrap();
            let want = auroc_pairwise(&scores, &labels);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn auroc_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..50 {
            let n = 25;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&neg, &labels).unwrap();
            assert!((a + b - 1.0).abs() < 1e-15, "{a} + {b} != 1");
        }
    }

    #[test]
    fn auroc_single_class_is_an_error() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(GapaError::SingleClass)
        ));
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(predictive_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let c = 7usize;
        let uniform = vec![1.0 / c as f64; c];
        assert!((predictive_entropy(&uniform) - (c as f64).ln()).abs() < 1e-12);
        // Direct-sum oracle on a random distribution.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let want: f64 = p.iter().map(|pi| -pi * pi.ln()).sum();
        assert_eq!(predictive_entropy(&p), want);
    }
}
