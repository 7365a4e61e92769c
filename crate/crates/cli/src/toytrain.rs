//! Minimal tanh-MLP trainer for the desk-scale experiment harness. This
//! exists only to produce frozen toy backbones for the pipeline; GAPA itself
//! never trains or touches weights.

use gapa_core::error::{GapaError, Result};
use gapa_core::network::{ActivationTag, LayerSpec, NetworkSpec, TaskKind};
use gapa_core::tensor::{Matrix, Vector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;

/// Trainer knobs. Plain full-batch gradient descent with momentum and L2
/// weight decay (decay keeps logit scales moderate, which the toy
/// uncertainty experiments depend on).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            epochs: 1500,
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

struct Mlp {
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

impl Mlp {
    fn init(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                Matrix::from_vec(
                    fan_out,
                    fan_in,
                    (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect(),
                )
                .expect("finite init"),
            );
            biases.push(Vector::zeros(fan_out));
        }
        Self { weights, biases }
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass keeping every pre-activation and hidden state, for
    /// backprop. tanh between all linear maps, linear output.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut hs = vec![x.to_vec()];
        let mut zs = Vec::new();
        for l in 0..self.n_layers() {
            let w = &self.weights[l];
            let h = &hs[l];
            let mut z = vec![0.0; w.rows()];
            for (i, zi) in z.iter_mut().enumerate() {
                let mut acc = self.biases[l].get(i);
                for (j, hj) in h.iter().enumerate() {
                    acc += w.get(i, j) * hj;
                }
                *zi = acc;
            }
            let h_next = if l + 1 < self.n_layers() {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z.clone()
            };
            zs.push(z);
            hs.push(h_next);
        }
        (zs, hs)
    }
}

fn softmax_inplace(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

enum Objective {
    CrossEntropy(Vec<usize>),
    SquaredError(Vec<f64>),
}

fn train(
    inputs: &[Vec<f64>],
    objective: &Objective,
    in_dim: usize,
    out_dim: usize,
    cfg: &TrainConfig,
) -> Mlp {
    let mut dims = vec![in_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(out_dim);
    let mut mlp = Mlp::init(&dims, cfg.seed);
    let n = inputs.len() as f64;
    let mut vel_w: Vec<Vec<f64>> = mlp
        .weights
        .iter()
        .map(|w| vec![0.0; w.data().len()])
        .collect();
    let mut vel_b: Vec<Vec<f64>> = mlp
        .biases
        .iter()
        .map(|b| vec![0.0; b.len()])
        .collect();

    for _ in 0..cfg.epochs {
        let mut grad_w: Vec<Vec<f64>> = mlp
            .weights
            .iter()
            .map(|w| vec![0.0; w.data().len()])
            .collect();
        let mut grad_b: Vec<Vec<f64>> = mlp
            .biases
            .iter()
            .map(|b| vec![0.0; b.len()])
            .collect();

        for (s, x) in inputs.iter().enumerate() {
            let (zs, hs) = mlp.forward_trace(x);
            let top = zs.last().unwrap().clone();
            // d(loss)/d(output pre-activation)
            let mut delta: Vec<f64> = match objective {
                Objective::CrossEntropy(labels) => {
                    let mut p = top;
                    softmax_inplace(&mut p);
                    p[labels[s]] -= 1.0;
                    p.iter().map(|v| v / n).collect()
                }
                Objective::SquaredError(targets) => {
                    vec![2.0 * (top[0] - targets[s]) / n]
                }
            };
            for l in (0..mlp.n_layers()).rev() {
                let h_in = &hs[l];
                let w = &mlp.weights[l];
                for (i, di) in delta.iter().enumerate() {
                    grad_b[l][i] += di;
                    for (j, hj) in h_in.iter().enumerate() {
                        grad_w[l][i * w.cols() + j] += di * hj;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; w.cols()];
                    for (j, pj) in prev.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (i, di) in delta.iter().enumerate() {
                            acc += w.get(i, j) * di;
                        }
                        // tanh'(z) through the stored pre-activation.
                        let t = zs[l - 1][j].tanh();
                        *pj = acc * (1.0 - t * t);
                    }
                    delta = prev;
                }
            }
        }

        for l in 0..mlp.n_layers() {
            let w = &mut mlp.weights[l];
            let cols = w.cols();
            for i in 0..w.rows() {
                for j in 0..cols {
                    let v = &mut vel_w[l][i * cols + j];
                    *v = cfg.momentum * *v - cfg.lr * grad_w[l][i * cols + j];
                    w.set(i, j, w.get(i, j) + *v);
                }
                let vb = &mut vel_b[l][i];
                *vb = cfg.momentum * *vb - cfg.lr * grad_b[l][i];
                let updated = mlp.biases[l].get(i) + *vb;
                mlp.biases[l].set(i, updated);
            }
        }
    }
    mlp
}

fn into_network(mlp: Mlp, task: TaskKind, in_dim: usize) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut gapa_points = Vec::new();
    let n = mlp.n_layers();
    for (l, (w, b)) in mlp.weights.into_iter().zip(mlp.biases).enumerate() {
        layers.push(LayerSpec::Linear { weight: w, bias: b });
        if l + 1 < n {
            gapa_points.push(layers.len());
            layers.push(LayerSpec::Activation(ActivationTag::Tanh));
        }
    }
    NetworkSpec::new(layers, gapa_points, task, in_dim)
}

/// Trains a tanh-MLP classifier on labeled samples; every tanh layer is a
/// GAPA attachment point.
pub fn train_classifier(samples: &[Sample], n_classes: usize, cfg: &TrainConfig) -> Result<NetworkSpec> {
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| GapaError::InvalidParameter {
                what: format!("sample {} has no label", s.id),
            })
        })
        .collect::<Result<_>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(GapaError::InvalidParameter {
            what: format!("label {bad} out of range for {n_classes} classes"),
        });
    }
    let in_dim = inputs[0].len();
    let mlp = train(&inputs, &Objective::CrossEntropy(labels), in_dim, n_classes, cfg);
    into_network(mlp, TaskKind::Classification, in_dim)
}

/// Trains a tanh-MLP regressor (scalar output) on targeted samples.
pub fn train_regressor(samples: &[Sample], cfg: &TrainConfig) -> Result<NetworkSpec> {
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let targets: Vec<f64> = samples
        .iter()
        .map(|s| {
            s.target.ok_or_else(|| GapaError::InvalidParameter {
                what: format!("sample {} has no target", s.id),
            })
        })
        .collect::<Result<_>>()?;
    let in_dim = inputs[0].len();
    let mlp = train(&inputs, &Objective::SquaredError(targets), in_dim, 1, cfg);
    into_network(mlp, TaskKind::Regression, in_dim)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn classifier_accuracy(net: &NetworkSpec, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let Some(label) = s.label else { continue };
        let logits = net.forward_vector(&s.input()?)?;
        let mut arg = 0;
        for c in 1..logits.len() {
            if logits.get(c) > logits.get(arg) {
                arg = c;
            }
        }
        total += 1;
        if arg == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
