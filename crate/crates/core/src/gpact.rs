//! The GP activation layer: a mean-preserving drop-in for a deterministic
//! nonlinearity whose posterior variance is computed by conditioning on the
//! K nearest inducing points.
//!
//! Because every neuron shares the RBF correlation (amplitudes differ, the
//! lengthscale does not) and the jitter is relative, one KNN query and one
//! K×K Cholesky serve all neurons of a layer:
//!
//! ```text
//! σ²_i(z) = c_i² · (1 − rᵀ (R + jitter·I)⁻¹ r)
//! ```
//!
//! with `R` the correlation matrix over the retrieved neighbors and `r` the
//! query-to-neighbor correlations.

use crate::error::Result;
use crate::inducing::InducingSet;
use crate::neighbor::{IndexKind, NeighborIndex};
use crate::network::ActivationTag;
use crate::tensor::{cholesky_solve_vec, dist2, GaussianVector, Matrix, Vector};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// A GP activation attached at one layer.
#[derive(Debug)]
pub struct GapaLayer {
    layer_index: usize,
    activation: ActivationTag,
    inducing: Arc<InducingSet>,
    index: NeighborIndex,
    k: usize,
    aleatoric_var: Option<Vector>,
    clamp_events: AtomicU64,
}

impl GapaLayer {
    /// Builds the layer and its neighbor index. `aleatoric_var` is the
    /// per-neuron observation noise σ²_y (zero/absent for classification).
    pub fn new(
        activation: ActivationTag,
        inducing: Arc<InducingSet>,
        index_kind: IndexKind,
        k: usize,
        aleatoric_var: Option<Vector>,
    ) -> Result<Self> {
        let index = NeighborIndex::build(Arc::clone(&inducing), index_kind)?;
        Self::with_index(activation, inducing, index, k, aleatoric_var)
    }

    /// Builds the layer around an existing index (e.g. one loaded from disk).
    pub fn with_index(
        activation: ActivationTag,
        inducing: Arc<InducingSet>,
        index: NeighborIndex,
        k: usize,
        aleatoric_var: Option<Vector>,
    ) -> Result<Self> {
        if k == 0 || k > inducing.m() {
            return Err(crate::error::GapaError::InvalidParameter {
                what: format!("K={k} must be in 1..=M={}", inducing.m()),
            });
        }
        if let Some(av) = &aleatoric_var {
            if av.len() != inducing.dim() {
                return Err(crate::error::GapaError::DimensionMismatch {
                    context: "aleatoric_var length",
                    expected: inducing.dim(),
                    got: av.len(),
                });
            }
            if let Some((i, &v)) = av.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(crate::error::GapaError::NegativeVariance { index: i, value: v });
            }
        }
        Ok(Self {
            layer_index: inducing.layer_index(),
            activation,
            inducing,
            index,
            k,
            aleatoric_var,
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn activation(&self) -> ActivationTag {
        self.activation
    }

    pub fn inducing(&self) -> &Arc<InducingSet> {
        &self.inducing
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// How often the conditional variance went (slightly) negative in
    /// floating point and was clamped to zero.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Per-neuron epistemic variance at a deterministic query point:
    /// `σ²_i = c_i² − k_iᵀ (K_i + jitter·c_i² I)⁻¹ k_i` over the K retrieved
    /// neighbors, clamped at 0 from below.
    pub fn local_variance(&self, z: &Vector) -> Result<Vector> {
        let neighbors = self.index.query_knn(z, self.k)?;
        let params = self.inducing.params();
        let rows = self.inducing.z();
        let k = neighbors.len();

        // Shared correlation system (R + jitter·I) q = r.
        let mut corr = Matrix::zeros(k, k);
        for a in 0..k {
            corr.set(a, a, 1.0 + params.jitter());
            let ra = rows.row(neighbors[a].row_id);
            for b in a + 1..k {
                let c = params.correlation(dist2(ra, rows.row(neighbors[b].row_id)));
                corr.set(a, b, c);
                corr.set(b, a, c);
            }
        }
        let mut r = Vector::zeros(k);
        for (a, n) in neighbors.iter().enumerate() {
            r.set(a, params.correlation(n.distance * n.distance));
        }
        let q = cholesky_solve_vec(&corr, &r)?;
        let explained = r.dot(&q)?;
        let residual = 1.0 - explained;
        let clamped = if residual < 0.0 {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            residual
        };
        Ok(params.signal_var().map(|c2| c2 * clamped))
    }

    /// Full GP-activation step on a Gaussian input: the mean is exactly
    /// `φ(mean_in)`; the variance is epistemic + first-order input
    /// uncertainty + aleatoric.
    pub fn forward(&self, input: &GaussianVector) -> Result<GaussianVector> {
        let mean_in = input.mean();
        let epistemic = self.local_variance(mean_in)?;
        let mean_out = self.activation.apply(mean_in);
        let mut var_out = Vector::zeros(input.len());
        for i in 0..input.len() {
            let slope = self.activation.derivative(mean_in.get(i));
            let nigp = slope * slope * input.var().get(i);
            let ale = self.aleatoric_var.as_ref().map_or(0.0, |a| a.get(i));
            var_out.set(i, epistemic.get(i) + nigp + ale);
        }
        GaussianVector::new(mean_out, var_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inducing::{InducingMethod, KernelParams};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn make_layer(
        rows: Matrix,
        lengthscale: f64,
        signal_var: Vec<f64>,
        jitter: f64,
        k: usize,
    ) -> GapaLayer {
        let params =
            KernelParams::new(lengthscale, Vector::from_vec(signal_var).unwrap(), jitter)
                .unwrap();
        let set = Arc::new(
            InducingSet::new(1, rows, params, InducingMethod::KMeansPp, [0u8; 32]).unwrap(),
        );
        GapaLayer::new(ActivationTag::Tanh, set, IndexKind::ExactFlat, k, None).unwrap()
    }

    /// Dense GP-conditioning oracle built from first principles: full kernel
    /// matrix, explicit inverse via Gauss-Jordan, quadratic form.
    pub(crate) fn dense_gp_var(
        points: &[Vec<f64>],
        query: &[f64],
        lengthscale: f64,
        c2: f64,
        noise: f64,
    ) -> f64 {
        let m = points.len();
        let kern = |a: &[f64], b: &[f64]| -> f64 {
            c2 * (-dist2(a, b) / (2.0 * lengthscale * lengthscale)).exp()
        };
        // Build (K + noise·I) and invert by Gauss-Jordan elimination.
        let mut aug = vec![vec![0.0f64; 2 * m]; m];
        for i in 0..m {
            for j in 0..m {
                aug[i][j] = kern(&points[i], &points[j]) + if i == j { noise } else { 0.0 };
            }
            aug[i][m + i] = 1.0;
        }
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for c in 0..2 * m {
                aug[col][c] /= p;
            }
            for r in 0..m {
                if r != col {
                    let f = aug[r][col];
                    for c in 0..2 * m {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let kvec: Vec<f64> = points.iter().map(|p| kern(query, p)).collect();
        let mut quad = 0.0;
        for i in 0..m {
            for j in 0..m {
                quad += kvec[i] * aug[i][m + j] * kvec[j];
            }
        }
        kern(query, query) - quad
    }

    #[test]
    fn variance_vanishes_on_inducing_row() {
        let rows = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = make_layer(rows, 1.0, vec![2.0, 0.5], 1e-12, 3);
        let v = layer
            .local_variance(&Vector::from_vec(vec![1.0, 0.0]).unwrap())
            .unwrap();
        for i in 0..2 {
            let c2 = layer.inducing.params().signal_var().get(i);
            assert!(v.get(i) <= 1e-6 * c2, "neuron {i}: {} vs cap {}", v.get(i), 1e-6 * c2);
        }
    }

    #[test]
    fn variance_reverts_to_prior_far_away() {
        let rows = Matrix::from_vec(2, 1, vec![0.0, 0.5]).unwrap();
        let layer = make_layer(rows, 0.3, vec![1.7], 1e-6, 2);
        let v = layer
            .local_variance(&Vector::from_vec(vec![50.0]).unwrap())
            .unwrap();
        assert!((v.get(0) - 1.7).abs() / 1.7 < 1e-6);
    }

    #[test]
    fn small_instance_matches_dense_oracle() {
        let rows = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.5, -0.5, 1.0]).unwrap();
        let jitter = 1e-8;
        let layer = make_layer(rows.clone(), 1.0, vec![1.0, 1.0], jitter, 3);
        let points: Vec<Vec<f64>> = (0..3).map(|r| rows.row(r).to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = layer
                .local_variance(&Vector::from_vec(q.clone()).unwrap())
                .unwrap();
            // c² = 1 so the noise σ_n² = jitter·c² = jitter.
            let want = dense_gp_var(&points, &q, 1.0, 1.0, jitter);
            assert!(
                (got.get(0) - want).abs() < 1e-10,
                "query {q:?}: {} vs {want}",
                got.get(0)
            );
        }
    }

    #[test]
    fn per_neuron_amplitudes_scale_the_oracle() {
        let rows = Matrix::from_vec(4, 3, vec![
            0.0, 0.0, 0.0,
            1.0, 0.0, -0.5,
            0.0, 1.5, 0.3,
            -1.0, 0.2, 0.8,
        ])
        .unwrap();
        let c2s = vec![0.4, 2.5, 1.1];
        let jitter = 1e-6;
        let layer = make_layer(rows.clone(), 0.8, c2s.clone(), jitter, 4);
        let points: Vec<Vec<f64>> = (0..4).map(|r| rows.row(r).to_vec()).collect();
        let q = vec![0.3, 0.3, -0.2];
        let got = layer
            .local_variance(&Vector::from_vec(q.clone()).unwrap())
            .unwrap();
        for (i, &c2) in c2s.iter().enumerate() {
            let want = dense_gp_var(&points, &q, 0.8, c2, jitter * c2);
            assert!(
                (got.get(i) - want).abs() < 1e-10,
                "neuron {i}: {} vs {want}",
                got.get(i)
            );
        }
    }

    #[test]
    fn conservative_under_nested_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..40 {
            let m = rng.gen_range(4..=12);
            let d = rng.gen_range(1..=4);
            let data: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let rows = Matrix::from_vec(m, d, data).unwrap();
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let points: Vec<Vec<f64>> = (0..m).map(|r| rows.row(r).to_vec()).collect();
            let k_small = rng.gen_range(1..m);
            // The KNN subset is nested inside the full set by construction.
            let layer_a = make_layer(rows.clone(), 1.0, vec![1.0; d], 1e-6, k_small);
            let layer_c = make_layer(rows.clone(), 1.0, vec![1.0; d], 1e-6, m);
            let qa = layer_a
                .local_variance(&Vector::from_vec(q.clone()).unwrap())
                .unwrap()
                .get(0);
            let qc = layer_c
                .local_variance(&Vector::from_vec(q.clone()).unwrap())
                .unwrap()
                .get(0);
            assert!(qa >= qc - 1e-10, "subset {qa} < full {qc}");
            let oracle_full = dense_gp_var(&points, &q, 1.0, 1.0, 1e-6);
            assert!((qc - oracle_full).abs() < 1e-8);
        }
    }

    #[test]
    fn monotone_radial_response_single_point() {
        // K = 1: σ²(radius) must never decrease as the query moves away.
        let rows = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let layer = make_layer(rows, 0.7, vec![1.3, 1.3], 1e-6, 1);
        let mut last = -1.0;
        for step in 0..40 {
            let radius = step as f64 * 0.1;
            let v = layer
                .local_variance(&Vector::from_vec(vec![radius, 0.0]).unwrap())
                .unwrap()
                .get(0);
            assert!(v >= last - 1e-15, "radius {radius}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn forward_preserves_mean_and_sums_three_terms() {
        let rows = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let params =
            KernelParams::new(1.0, Vector::from_vec(vec![1.0, 1.0]).unwrap(), 1e-6).unwrap();
        let set = Arc::new(
            InducingSet::new(1, rows, params, InducingMethod::KMeansPp, [0u8; 32]).unwrap(),
        );
        let ale = Vector::from_vec(vec![0.01, 0.02]).unwrap();
        let layer = GapaLayer::new(
            ActivationTag::Tanh,
            set,
            IndexKind::ExactFlat,
            3,
            Some(ale.clone()),
        )
        .unwrap();
        let mean = Vector::from_vec(vec![0.0, 2.0]).unwrap();
        let var = Vector::from_vec(vec![0.3, 0.4]).unwrap();
        let input = GaussianVector::new(mean.clone(), var.clone()).unwrap();
        let out = layer.forward(&input).unwrap();
        // Mean is exactly φ(mean_in).
        assert_eq!(out.mean().get(0), 0.0f64.tanh());
        assert_eq!(out.mean().get(1), 2.0f64.tanh());
        // Variance decomposes as epistemic + (g′)²·v_in + aleatoric.
        let epi = layer.local_variance(&mean).unwrap();
        for i in 0..2 {
            let slope = ActivationTag::Tanh.derivative(mean.get(i));
            let want = epi.get(i) + slope * slope * var.get(i) + ale.get(i);
            assert!((out.var().get(i) - want).abs() < 1e-15);
        }
        // tanh at mean 0 has unit slope: the input-uncertainty term is v.
        let slope0 = ActivationTag::Tanh.derivative(0.0);
        assert_eq!(slope0, 1.0);
    }

    #[test]
    fn relu_dead_zone_blocks_input_uncertainty() {
        let rows = Matrix::from_vec(2, 1, vec![-5.0, 5.0]).unwrap();
        let params =
            KernelParams::new(1.0, Vector::from_vec(vec![1.0]).unwrap(), 1e-6).unwrap();
        let set = Arc::new(
            InducingSet::new(0, rows.clone(), params, InducingMethod::KMeansPp, [0u8; 32])
                .unwrap(),
        );
        let layer =
            GapaLayer::new(ActivationTag::Relu, set, IndexKind::ExactFlat, 2, None).unwrap();
        let input = GaussianVector::new(
            Vector::from_vec(vec![-5.0]).unwrap(),
            Vector::from_vec(vec![1.0]).unwrap(),
        )
        .unwrap();
        let out = layer.forward(&input).unwrap();
        // Slope is zero at −5, so only the epistemic term survives, and the
        // query sits on an inducing row so that term matches the oracle.
        let want = dense_gp_var(&[vec![-5.0], vec![5.0]], &[-5.0], 1.0, 1.0, 1e-6);
        assert!((out.var().get(0) - want).abs() < 1e-10);
    }

    #[test]
    fn zero_input_variance_on_support_with_tiny_jitter_leaves_aleatoric() {
        let rows = Matrix::from_vec(2, 1, vec![0.0, 3.0]).unwrap();
        let params =
            KernelParams::new(1.0, Vector::from_vec(vec![1.0]).unwrap(), 1e-12).unwrap();
        let set = Arc::new(
            InducingSet::new(0, rows, params, InducingMethod::KMeansPp, [0u8; 32]).unwrap(),
        );
        let ale = Vector::from_vec(vec![0.25]).unwrap();
        let layer = GapaLayer::new(
            ActivationTag::Tanh,
            set,
            IndexKind::ExactFlat,
            2,
            Some(ale),
        )
        .unwrap();
        let input = GaussianVector::certain(Vector::from_vec(vec![3.0]).unwrap());
        let out = layer.forward(&input).unwrap();
        assert!((out.var().get(0) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn output_variance_is_always_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows = Matrix::from_vec(
            20,
            2,
            (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let layer = make_layer(rows, 0.5, vec![1.0, 1.0], 1e-9, 10);
        for _ in 0..200 {
            let q = Vector::from_vec(vec![
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ])
            .unwrap();
            let v = layer.local_variance(&q).unwrap();
            assert!(v.iter().all(|x| *x >= 0.0));
        }
    }
}
