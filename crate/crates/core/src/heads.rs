//! Converting output-layer Gaussian state into task predictions: the Laplace
//! bridge for categorical probabilities, logit-space Monte-Carlo entropy
//! decomposition (the LM default; sampling happens only in logit space), and
//! the heteroscedastic regression noise head.

use crate::error::{GapaError, Result};
use crate::tensor::{Matrix, Vector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Entropy-based uncertainty split, in nats. `total = aleatoric + epistemic`
/// holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyDecomposition {
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Entropy in nats with the 0·log 0 = 0 convention.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&pi| if pi > 0.0 { -pi * pi.ln() } else { 0.0 })
        .sum()
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Closed-form categorical probabilities from Gaussian logits:
/// `p = softmax(μ_c / sqrt(1 + (π/8) v_c))`. Requires `v ≥ 0`.
pub fn laplace_bridge(mu: &Vector, v: &Vector) -> Result<Vector> {
    if mu.len() != v.len() {
        return Err(GapaError::DimensionMismatch {
            context: "laplace_bridge",
            expected: mu.len(),
            got: v.len(),
        });
    }
    let scaled: Vec<f64> = mu
        .iter()
        .zip(v.iter())
        .map(|(m, var)| m / (1.0 + std::f64::consts::PI / 8.0 * var).sqrt())
        .collect();
    Vector::from_vec(softmax_slice(&scaled))
}

/// Logit-space Monte-Carlo entropy decomposition.
///
/// Keeps the `top_k` logits by mean, draws `S` reparameterized samples
/// `ℓ = μ + sqrt(v) ⊙ ε`, softmaxes each, and splits the predictive entropy
/// into `TU = H(p̄)`, `AU = mean H(p⁽ˢ⁾)`, `EU = TU − AU`.
///
/// Returns the decomposition and the averaged probabilities `p̄` at full
/// length (classes outside the top-k hold zero).
pub fn mc_entropy_decomposition(
    mu: &Vector,
    v: &Vector,
    s: usize,
    top_k: usize,
    seed: u64,
) -> Result<(UncertaintyDecomposition, Vector)> {
    if mu.len() != v.len() {
        return Err(GapaError::DimensionMismatch {
            context: "mc_entropy_decomposition",
            expected: mu.len(),
            got: v.len(),
        });
    }
    if s == 0 || top_k == 0 || top_k > mu.len() {
        return Err(GapaError::InvalidParameter {
            what: format!(
                "need S >= 1 and 1 <= top_k <= {}, got S={s}, top_k={top_k}",
                mu.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_by(|&a, &b| {
        mu.get(b)
            .partial_cmp(&mu.get(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    let kept = &order[..top_k];
    let mu_k: Vec<f64> = kept.iter().map(|&i| mu.get(i)).collect();
    let sd_k: Vec<f64> = kept.iter().map(|&i| v.get(i).sqrt()).collect();

    let mut full = vec![0.0f64; mu.len()];
    if sd_k.iter().all(|&sd| sd == 0.0) {
        // Degenerate draws: every sample is softmax(μ), so AU = TU and the
        // epistemic term is exactly zero.
        let p = softmax_slice(&mu_k);
        let h = entropy(&p);
        for (&i, &pi) in kept.iter().zip(&p) {
            full[i] = pi;
        }
        return Ok((
            UncertaintyDecomposition {
                total: h,
                aleatoric: h,
                epistemic: 0.0,
            },
            Vector::from_vec(full)?,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p_bar = vec![0.0f64; top_k];
    let mut entropy_sum = 0.0;
    let mut logits = vec![0.0f64; top_k];
    for _ in 0..s {
        for i in 0..top_k {
            let eps: f64 = rng.sample(StandardNormal);
            logits[i] = mu_k[i] + sd_k[i] * eps;
        }
        let p = softmax_slice(&logits);
        entropy_sum += entropy(&p);
        for (acc, pi) in p_bar.iter_mut().zip(&p) {
            *acc += pi;
        }
    }
    for acc in &mut p_bar {
        *acc /= s as f64;
    }
    let total = entropy(&p_bar);
    let aleatoric = entropy_sum / s as f64;
    for (&i, &pi) in kept.iter().zip(&p_bar) {
        full[i] = pi;
    }
    Ok((
        UncertaintyDecomposition {
            total,
            aleatoric,
            epistemic: total - aleatoric,
        },
        Vector::from_vec(full)?,
    ))
}

/// BALD score: the mutual information between prediction and model, i.e. the
/// epistemic term of the entropy decomposition over sampled categorical
/// predictives.
pub fn bald_score(mu: &Vector, v: &Vector, s: usize, seed: u64) -> Result<f64> {
    let top_k = mu.len();
    mc_entropy_decomposition(mu, v, s, top_k, seed).map(|(d, _)| d.epistemic)
}

/// Heteroscedastic aleatoric-noise head: a linear map (optionally through
/// one tanh hidden layer) into a softplus with a variance floor,
/// `σ²_ale(x) = softplus(s(x)) + floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHead {
    in_dim: usize,
    hidden: Option<(Matrix, Vector)>,
    w_out: Vector,
    b_out: f64,
    floor: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NoiseHead {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden_width(&self) -> Option<usize> {
        self.hidden.as_ref().map(|(w, _)| w.rows())
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Raw score `s(x)` before the softplus.
    pub fn score(&self, x: &[f64]) -> f64 {
        match &self.hidden {
            None => {
                let mut acc = self.b_out;
                for (w, xi) in self.w_out.iter().zip(x) {
                    acc += w * xi;
                }
                acc
            }
            Some((w1, b1)) => {
                let mut acc = self.b_out;
                for i in 0..w1.rows() {
                    let mut z = b1.get(i);
                    for (j, xi) in x.iter().enumerate() {
                        z += w1.get(i, j) * xi;
                    }
                    acc += self.w_out.get(i) * z.tanh();
                }
                acc
            }
        }
    }

    /// Predicted aleatoric variance, never below the floor.
    pub fn predict_var(&self, x: &[f64]) -> f64 {
        softplus(self.score(x)) + self.floor
    }

    /// Flattened parameters in a fixed order (hidden weights/bias first when
    /// present, then the output weights and bias). Used by the container.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some((w1, b1)) = &self.hidden {
            out.extend_from_slice(w1.data());
            out.extend_from_slice(b1.data());
        }
        out.extend_from_slice(self.w_out.data());
        out.push(self.b_out);
        out
    }

    pub fn param_count(in_dim: usize, hidden: Option<usize>) -> usize {
        match hidden {
            None => in_dim + 1,
            Some(h) => h * in_dim + h + h + 1,
        }
    }

    pub fn from_flat_params(
        in_dim: usize,
        hidden: Option<usize>,
        floor: f64,
        params: &[f64],
    ) -> Result<Self> {
        if params.len() != Self::param_count(in_dim, hidden) {
            return Err(GapaError::DimensionMismatch {
                context: "noise-head parameter count",
                expected: Self::param_count(in_dim, hidden),
                got: params.len(),
            });
        }
        let mut at = 0usize;
        let hidden = match hidden {
            None => None,
            Some(h) => {
                let w1 = Matrix::from_vec(h, in_dim, params[at..at + h * in_dim].to_vec())?;
                at += h * in_dim;
                let b1 = Vector::from_vec(params[at..at + h].to_vec())?;
                at += h;
                Some((w1, b1))
            }
        };
        let out_dim = hidden.as_ref().map(|(w, _)| w.rows()).unwrap_or(in_dim);
        let w_out = Vector::from_vec(params[at..at + out_dim].to_vec())?;
        at += out_dim;
        let b_out = params[at];
        Ok(Self {
            in_dim,
            hidden,
            w_out,
            b_out,
            floor,
        })
    }
}

/// Training setup for [`fit_noise_head`].
#[derive(Debug, Clone)]
pub struct NoiseHeadConfig {
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NoiseHeadConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            epochs: 500,
            lr: 0.05,
            seed: 0,
        }
    }
}

const VAR_FLOOR: f64 = 1e-6;

struct FitState {
    head: NoiseHead,
}

impl FitState {
    fn new(in_dim: usize, cfg: &NoiseHeadConfig) -> Self {
        let hidden = cfg.hidden.map(|h| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let scale = (1.0 / in_dim as f64).sqrt();
            let w1 = Matrix::from_vec(
                h,
                in_dim,
                (0..h * in_dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
            .expect("finite init");
            (w1, Vector::zeros(h))
        });
        let out_dim = hidden.as_ref().map(|(w, _)| w.rows()).unwrap_or(in_dim);
        FitState {
            head: NoiseHead {
                in_dim,
                hidden,
                w_out: Vector::zeros(out_dim),
                b_out: 0.0,
                floor: VAR_FLOOR,
            },
        }
    }

    /// Full-batch loss and gradient of the Gaussian NLL with
    /// `σ²_tot = epi + softplus(s(x)) + floor`. Gradients are analytic
    /// (chain rule through the softplus and the NLL).
    fn loss_and_grad(
        &self,
        features: &Matrix,
        residuals2: &[f64],
        epi_var: &[f64],
    ) -> (f64, Vec<f64>) {
        let n = features.rows();
        let head = &self.head;
        let mut loss = 0.0;
        let mut grad = vec![0.0f64; head.flat_params().len()];
        for r in 0..n {
            let x = features.row(r);
            let s = head.score(x);
            let sigma2 = epi_var[r] + softplus(s) + head.floor;
            loss += residuals2[r] / (2.0 * sigma2)
                + 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
            // dL/dσ² = (σ² − r²)/(2σ⁴); dσ²/ds = sigmoid(s).
            let dl_ds =
                (sigma2 - residuals2[r]) / (2.0 * sigma2 * sigma2) * sigmoid(s);
            match &head.hidden {
                None => {
                    for (j, xi) in x.iter().enumerate() {
                        grad[j] += dl_ds * xi;
                    }
                    grad[head.in_dim] += dl_ds;
                }
                Some((w1, b1)) => {
                    let h = w1.rows();
                    let d = head.in_dim;
                    for i in 0..h {
                        let mut z = b1.get(i);
                        for (j, xi) in x.iter().enumerate() {
                            z += w1.get(i, j) * xi;
                        }
                        let t = z.tanh();
                        let dt = 1.0 - t * t;
                        let w2i = head.w_out.get(i);
                        for (j, xi) in x.iter().enumerate() {
                            grad[i * d + j] += dl_ds * w2i * dt * xi;
                        }
                        grad[h * d + i] += dl_ds * w2i * dt;
                        grad[h * d + h + i] += dl_ds * t;
                    }
                    grad[h * d + h + h] += dl_ds;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        for g in &mut grad {
            *g *= inv_n;
        }
        (loss, grad)
    }

    /// One gradient step. Fails when the step overflows the parameters,
    /// which is how a divergent learning rate first shows up.
    fn apply_step(&mut self, grad: &[f64], lr: f64) -> std::result::Result<(), ()> {
        let params = self.head.flat_params();
        let updated: Vec<f64> = params
            .iter()
            .zip(grad)
            .map(|(p, g)| p - lr * g)
            .collect();
        if !updated.iter().all(|p| p.is_finite()) {
            return Err(());
        }
        self.head = NoiseHead::from_flat_params(
            self.head.in_dim,
            self.head.hidden_width(),
            self.head.floor,
            &updated,
        )
        .expect("same shape and finite");
        Ok(())
    }
}

/// Fits the noise head by plain gradient descent on the Gaussian NLL, with
/// means and epistemic variances held fixed. Returns the lowest-loss
/// parameters seen, so the final loss never exceeds the initial one.
pub fn fit_noise_head(
    features: &Matrix,
    targets: &Vector,
    means: &Vector,
    epi_var: &Vector,
    cfg: &NoiseHeadConfig,
) -> Result<NoiseHead> {
    fit_noise_head_traced(features, targets, means, epi_var, cfg).map(|(h, _)| h)
}

/// As [`fit_noise_head`] but also returns the per-epoch loss trace.
pub fn fit_noise_head_traced(
    features: &Matrix,
    targets: &Vector,
    means: &Vector,
    epi_var: &Vector,
    cfg: &NoiseHeadConfig,
) -> Result<(NoiseHead, Vec<f64>)> {
    let n = features.rows();
    if targets.len() != n || means.len() != n || epi_var.len() != n {
        return Err(GapaError::DimensionMismatch {
            context: "fit_noise_head row counts",
            expected: n,
            got: targets.len().min(means.len()).min(epi_var.len()),
        });
    }
    if n == 0 {
        return Err(GapaError::InvalidParameter {
            what: "noise-head fit needs at least one sample".into(),
        });
    }
    if let Some((i, &e)) = epi_var.data().iter().enumerate().find(|(_, e)| **e < 0.0) {
        return Err(GapaError::NegativeVariance { index: i, value: e });
    }
    let residuals2: Vec<f64> = targets
        .iter()
        .zip(means.iter())
        .map(|(y, m)| (y - m) * (y - m))
        .collect();

    let mut state = FitState::new(features.cols(), cfg);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(f64, NoiseHead)> = None;
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = state.loss_and_grad(features, &residuals2, epi_var.data());
        if !loss.is_finite() {
            return Err(GapaError::NonFiniteLoss { epoch });
        }
        trace.push(loss);
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, state.head.clone()));
        }
        if epoch < cfg.epochs && state.apply_step(&grad, cfg.lr).is_err() {
            return Err(GapaError::NonFiniteLoss { epoch });
        }
    }
    Ok((best.expect("at least one epoch").1, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn vec_of(v: Vec<f64>) -> Vector {
        Vector::from_vec(v).unwrap()
    }

    #[test]
    fn bridge_with_zero_variance_is_softmax() {
        let mu = vec_of(vec![1.0, -0.5, 2.0]);
        let v = Vector::zeros(3);
        let p = laplace_bridge(&mu, &v).unwrap();
        let want = softmax_slice(mu.data());
        assert_eq!(p.data(), &want[..]);
    }

    #[test]
    fn bridge_equal_logits_equal_variance_is_uniform() {
        let mu = vec_of(vec![0.7; 4]);
        let v = vec_of(vec![2.5; 4]);
        let p = laplace_bridge(&mu, &v).unwrap();
        for i in 0..4 {
            assert!((p.get(i) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn bridge_hand_arithmetic_case() {
        // μ = [2, 0], v = [(8/π)·3, 0]: the first logit scales to
        // 2/sqrt(1+3) = 1, so p = softmax([1, 0]).
        let mu = vec_of(vec![2.0, 0.0]);
        let v = vec_of(vec![8.0 / std::f64::consts::PI * 3.0, 0.0]);
        let p = laplace_bridge(&mu, &v).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.get(1) - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bridge_output_is_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let c = rng.gen_range(2..12);
            let mu = vec_of((0..c).map(|_| rng.gen_range(-30.0..30.0)).collect());
            let v = vec_of((0..c).map(|_| rng.gen_range(0.0..50.0)).collect());
            let p = laplace_bridge(&mu, &v).unwrap();
            assert!(p.iter().all(|x| *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn bridge_shift_invariance_holds_only_for_equal_variances() {
        let mu = vec_of(vec![0.2, 1.0, -0.7]);
        let shifted = vec_of(vec![5.2, 6.0, 4.3]);
        let equal_v = vec_of(vec![1.5; 3]);
        let p = laplace_bridge(&mu, &equal_v).unwrap();
        let q = laplace_bridge(&shifted, &equal_v).unwrap();
        for i in 0..3 {
            assert!((p.get(i) - q.get(i)).abs() < 1e-12);
        }
        // Unequal variances break the invariance.
        let uneven_v = vec_of(vec![0.0, 4.0, 9.0]);
        let p2 = laplace_bridge(&mu, &uneven_v).unwrap();
        let q2 = laplace_bridge(&shifted, &uneven_v).unwrap();
        let max_gap = (0..3)
            .map(|i| (p2.get(i) - q2.get(i)).abs())
            .fold(0.0, f64::max);
        assert!(max_gap > 1e-3, "expected visible shift sensitivity, got {max_gap}");
    }

    #[test]
    fn mc_zero_variance_gives_exactly_zero_epistemic() {
        let mu = vec_of(vec![1.0, 0.0, -1.0]);
        let v = Vector::zeros(3);
        let (d, p_bar) = mc_entropy_decomposition(&mu, &v, 512, 3, 7).unwrap();
        assert_eq!(d.epistemic, 0.0);
        assert_eq!(d.total, d.aleatoric);
        assert_eq!(p_bar.data(), &softmax_slice(mu.data())[..]);
    }

    #[test]
    fn mc_single_class_support_has_zero_entropy() {
        let mu = vec_of(vec![3.0, 1.0, 0.0]);
        let v = vec_of(vec![1.0, 1.0, 1.0]);
        let (d, p_bar) = mc_entropy_decomposition(&mu, &v, 64, 1, 3).unwrap();
        assert_eq!(d.total, 0.0);
        assert_eq!(d.aleatoric, 0.0);
        assert_eq!(d.epistemic, 0.0);
        assert_eq!(p_bar.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mc_estimate_matches_high_sample_reference() {
        // 3 classes, μ = 0, v = 1: compare a S = 1e5 run against a 2e6-sample
        // reference within 3 standard errors of the gap.
        let mu = Vector::zeros(3);
        let v = vec_of(vec![1.0; 3]);
        let (d, _) = mc_entropy_decomposition(&mu, &v, 100_000, 3, 11).unwrap();
        let (d_ref, _) = mc_entropy_decomposition(&mu, &v, 2_000_000, 3, 999).unwrap();

        // Empirical SE of the entropy mean at S = 1e5: entropies of softmax
        // samples have std well under 0.25 nats here.
        let se = 0.25 / (100_000f64).sqrt();
        assert!(
            (d.epistemic - d_ref.epistemic).abs() <= 3.0 * (se + 0.25 / (2_000_000f64).sqrt()),
            "EU {} vs reference {}",
            d.epistemic,
            d_ref.epistemic
        );
        // Jensen: EU ≥ 0 up to MC error.
        assert!(d.epistemic >= -3.0 * se);
    }

    #[test]
    fn bald_equals_epistemic_on_shared_seed() {
        let mu = vec_of(vec![0.5, -0.3, 1.2]);
        let v = vec_of(vec![0.7, 0.1, 2.0]);
        let (d, _) = mc_entropy_decomposition(&mu, &v, 256, 3, 21).unwrap();
        assert_eq!(bald_score(&mu, &v, 256, 21).unwrap(), d.epistemic);
    }

    #[test]
    fn bald_zero_variance_is_zero() {
        let mu = vec_of(vec![0.5, -0.3]);
        assert_eq!(bald_score(&mu, &Vector::zeros(2), 128, 0).unwrap(), 0.0);
    }

    #[test]
    fn noise_head_never_predicts_below_floor() {
        let head = NoiseHead::from_flat_params(2, None, VAR_FLOOR, &[-50.0, -50.0, -90.0])
            .unwrap();
        let v = head.predict_var(&[1.0, 1.0]);
        assert!(v >= 1e-6);
    }

    #[test]
    fn zero_residuals_shrink_variance_monotonically() {
        let n = 32;
        let features = Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let y = Vector::zeros(n);
        let mu = Vector::zeros(n);
        let epi = Vector::zeros(n);
        let cfg = NoiseHeadConfig {
            epochs: 300,
            lr: 0.05,
            ..Default::default()
        };
        let (head, trace) = fit_noise_head_traced(&features, &y, &mu, &epi, &cfg).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "loss rose: {pair:?}");
        }
        // Learned aleatoric variance heads toward the floor.
        assert!(head.predict_var(&[1.0]) < 0.05);
    }

    #[test]
    fn constant_residual_recovers_stationary_variance() {
        // Constant residual r on constant features: the Gaussian NLL is
        // stationary at σ²_tot = r².
        let n = 64;
        let r = 0.8;
        let features = Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let y = vec_of(vec![r; n]);
        let mu = Vector::zeros(n);
        let epi = Vector::zeros(n);
        let cfg = NoiseHeadConfig {
            epochs: 4000,
            lr: 0.5,
            ..Default::default()
        };
        let head = fit_noise_head(&features, &y, &mu, &epi, &cfg).unwrap();
        let got = head.predict_var(&[1.0]);
        assert!(
            (got - r * r).abs() / (r * r) < 0.05,
            "learned {got}, want ~{}",
            r * r
        );
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for hidden in [None, Some(4)] {
            let n = 16;
            let d = 3;
            let features = Matrix::from_vec(
                n,
                d,
                (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let y = vec_of((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mu = vec_of((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let epi = vec_of((0..n).map(|_| rng.gen_range(0.0..0.3)).collect());
            let residuals2: Vec<f64> = y
                .iter()
                .zip(mu.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .collect();
            let cfg = NoiseHeadConfig {
                hidden,
                seed: 5,
                ..Default::default()
            };
            let mut state = FitState::new(d, &cfg);
            // Move off the zero init so gradients are generic.
            let p0: Vec<f64> = state
                .head
                .flat_params()
                .iter()
                .map(|p| p + rng.gen_range(-0.3..0.3))
                .collect();
            state.head =
                NoiseHead::from_flat_params(d, hidden, VAR_FLOOR, &p0).unwrap();

            let (_, grad) = state.loss_and_grad(&features, &residuals2, epi.data());
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for k in 0..p0.len() {
                let mut plus = p0.clone();
                plus[k] += h;
                let mut minus = p0.clone();
                minus[k] -= h;
                let loss_at = |params: &[f64]| -> f64 {
                    let head =
                        NoiseHead::from_flat_params(d, hidden, VAR_FLOOR, params).unwrap();
                    let tmp = FitState { head };
                    tmp.loss_and_grad(&features, &residuals2, epi.data()).0
                };
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let denom = grad[k].abs().max(1e-3);
                max_rel = max_rel.max((grad[k] - fd).abs() / denom);
            }
            assert!(max_rel <= 1e-6, "hidden={hidden:?}: max rel err {max_rel}");
        }
    }

    #[test]
    fn divergent_learning_rate_reports_non_finite_loss() {
        let n = 8;
        let features = Matrix::from_vec(n, 1, vec![1e3; n]).unwrap();
        let y = vec_of(vec![1e6; n]);
        let mu = Vector::zeros(n);
        let epi = Vector::zeros(n);
        let cfg = NoiseHeadConfig {
            epochs: 5000,
            lr: 1e300,
            ..Default::default()
        };
        match fit_noise_head(&features, &y, &mu, &epi, &cfg) {
            Err(GapaError::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn head_round_trips_through_flat_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for hidden in [None, Some(5)] {
            let count = NoiseHead::param_count(3, hidden);
            let params: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let head = NoiseHead::from_flat_params(3, hidden, VAR_FLOOR, &params).unwrap();
            assert_eq!(head.flat_params(), params);
        }
    }
}
