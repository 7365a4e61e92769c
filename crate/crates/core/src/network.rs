//! Declarative frozen-backbone representation and the exact deterministic
//! forward pass that GP augmentation must preserve.
//!
//! The mean helpers here (`linear_mean`, `rmsnorm_mean`, `attention_mean`,
//! `softmax`) are shared with the variance-propagation module so that the
//! mean path of an augmented pass is bit-identical to
//! [`NetworkSpec::forward_deterministic`].

use crate::error::{GapaError, Result};
use crate::tensor::{matvec, Matrix, Vector};
use serde::{Deserialize, Serialize};

/// Element-wise nonlinearity with its exact analytic derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationTag {
    Relu,
    Tanh,
    Silu,
    Identity,
}

impl ActivationTag {
    /// g(z)
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Self::Tanh => z.tanh(),
            Self::Silu => z * logistic(z),
            Self::Identity => z,
        }
    }

    /// g′(z). For ReLU the derivative at 0 is taken as 0, matching the value
    /// branch.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Silu => {
                let s = logistic(z);
                s * (1.0 + z * (1.0 - s))
            }
            Self::Identity => 1.0,
        }
    }

    pub fn apply(self, z: &Vector) -> Vector {
        z.map(|v| self.value(v))
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One frozen layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear {
        weight: Matrix,
        bias: Vector,
    },
    Activation(ActivationTag),
    RmsNorm {
        gamma: Vector,
        eps: f64,
    },
    SelfAttention {
        wq: Matrix,
        wk: Matrix,
        wv: Matrix,
        wo: Matrix,
        heads: usize,
        causal: bool,
    },
    /// Softmax over the incoming vector (probability head).
    SoftmaxHead,
}

impl LayerSpec {
    /// Output width for a given input width, validating conformance.
    pub fn out_width(&self, in_width: usize) -> Result<usize> {
        match self {
            Self::Linear { weight, bias } => {
                if weight.cols() != in_width {
                    return Err(GapaError::DimensionMismatch {
                        context: "Linear input width",
                        expected: weight.cols(),
                        got: in_width,
                    });
                }
                if bias.len() != weight.rows() {
                    return Err(GapaError::DimensionMismatch {
                        context: "Linear bias length",
                        expected: weight.rows(),
                        got: bias.len(),
                    });
                }
                Ok(weight.rows())
            }
            Self::Activation(_) | Self::SoftmaxHead => Ok(in_width),
            Self::RmsNorm { gamma, eps } => {
                if *eps <= 0.0 {
                    return Err(GapaError::InvalidParameter {
                        what: format!("RMSNorm eps must be > 0, got {eps}"),
                    });
                }
                if gamma.len() != in_width {
                    return Err(GapaError::DimensionMismatch {
                        context: "RMSNorm gamma length",
                        expected: in_width,
                        got: gamma.len(),
                    });
                }
                Ok(in_width)
            }
            Self::SelfAttention {
                wq,
                wk,
                wv,
                wo,
                heads,
                ..
            } => {
                if *heads == 0 {
                    return Err(GapaError::InvalidParameter {
                        what: "SelfAttention heads must be >= 1".into(),
                    });
                }
                for (name, w) in [("Wq", wq), ("Wk", wk), ("Wv", wv)] {
                    if w.cols() != in_width {
                        return Err(GapaError::DimensionMismatch {
                            context: "SelfAttention projection input width",
                            expected: in_width,
                            got: w.cols(),
                        });
                    }
                    if w.rows() % heads != 0 {
                        return Err(GapaError::InvalidParameter {
                            what: format!("{name} rows {} not divisible by {heads} heads", w.rows()),
                        });
                    }
                }
                if wq.rows() != wk.rows() {
                    return Err(GapaError::DimensionMismatch {
                        context: "SelfAttention Wq/Wk rows",
                        expected: wq.rows(),
                        got: wk.rows(),
                    });
                }
                if wo.cols() != wv.rows() {
                    return Err(GapaError::DimensionMismatch {
                        context: "SelfAttention Wo input width",
                        expected: wv.rows(),
                        got: wo.cols(),
                    });
                }
                Ok(wo.rows())
            }
        }
    }
}

/// What the network's output means downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
    TokenLm,
}

/// A frozen backbone: ordered layers, the activation layers to replace with
/// GP activations, and the task the output feeds.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    gapa_points: Vec<usize>,
    task: TaskKind,
    input_width: usize,
}

impl NetworkSpec {
    /// Validates layer conformance and that every attachment point indexes an
    /// `Activation` layer.
    pub fn new(
        layers: Vec<LayerSpec>,
        gapa_points: Vec<usize>,
        task: TaskKind,
        input_width: usize,
    ) -> Result<Self> {
        let mut width = input_width;
        for layer in &layers {
            width = layer.out_width(width)?;
        }
        let mut points = gapa_points;
        points.sort_unstable();
        points.dedup();
        for &p in &points {
            match layers.get(p) {
                Some(LayerSpec::Activation(_)) => {}
                _ => {
                    return Err(GapaError::InvalidParameter {
                        what: format!("gapa_point {p} does not index an Activation layer"),
                    })
                }
            }
        }
        Ok(Self {
            layers,
            gapa_points: points,
            task,
            input_width,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn gapa_points(&self) -> &[usize] {
        &self.gapa_points
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        let mut width = self.input_width;
        for layer in &self.layers {
            width = layer.out_width(width).expect("validated at construction");
        }
        width
    }

    /// Width of the pre-activation entering layer `index`.
    pub fn width_at(&self, index: usize) -> usize {
        let mut width = self.input_width;
        for layer in &self.layers[..index] {
            width = layer.out_width(width).expect("validated at construction");
        }
        width
    }

    /// Evaluates the frozen network on a sequence of input vectors.
    ///
    /// Non-attention layers act position-wise; self-attention mixes
    /// positions (with causal masking when flagged). A single-vector input is
    /// the one-position case. This is the canonical point prediction.
    pub fn forward_deterministic(&self, inputs: &[Vector]) -> Result<Vec<Vector>> {
        self.forward_with_tap(inputs, None).map(|(out, _)| out)
    }

    /// Single-vector convenience wrapper.
    pub fn forward_vector(&self, input: &Vector) -> Result<Vector> {
        let out = self.forward_deterministic(std::slice::from_ref(input))?;
        Ok(out.into_iter().next().expect("one position in, one out"))
    }

    /// Forward pass that additionally captures the pre-activation entering
    /// layer `tap` (one row per position).
    pub fn forward_with_tap(
        &self,
        inputs: &[Vector],
        tap: Option<usize>,
    ) -> Result<(Vec<Vector>, Option<Vec<Vector>>)> {
        if inputs.is_empty() {
            return Err(GapaError::InvalidParameter {
                what: "forward pass needs at least one input position".into(),
            });
        }
        for x in inputs {
            if x.len() != self.input_width {
                return Err(GapaError::DimensionMismatch {
                    context: "network input width",
                    expected: self.input_width,
                    got: x.len(),
                });
            }
        }
        let mut state: Vec<Vector> = inputs.to_vec();
        let mut tapped = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            if tap == Some(idx) {
                tapped = Some(state.clone());
            }
            state = match layer {
                LayerSpec::Linear { weight, bias } => state
                    .iter()
                    .map(|x| linear_mean(weight, bias, x))
                    .collect::<Result<_>>()?,
                LayerSpec::Activation(tag) => state.iter().map(|x| tag.apply(x)).collect(),
                LayerSpec::RmsNorm { gamma, eps } => {
                    state.iter().map(|x| rmsnorm_mean(gamma, *eps, x)).collect()
                }
                LayerSpec::SelfAttention {
                    wq,
                    wk,
                    wv,
                    wo,
                    heads,
                    causal,
                } => attention_mean(wq, wk, wv, wo, *heads, *causal, &state)?,
                LayerSpec::SoftmaxHead => state.iter().map(softmax).collect(),
            };
        }
        Ok((state, tapped))
    }
}

/// `W x + b`, the linear-layer mean path.
pub fn linear_mean(weight: &Matrix, bias: &Vector, x: &Vector) -> Result<Vector> {
    matvec(weight, x)?.add(bias)
}

/// Deterministic RMSNorm on the mean: `γ ⊙ x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm_mean(gamma: &Vector, eps: f64, x: &Vector) -> Vector {
    let d = x.len() as f64;
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / d;
    let inv_rms = 1.0 / (ms + eps).sqrt();
    let mut out = Vector::zeros(x.len());
    for i in 0..x.len() {
        out.set(i, gamma.get(i) * x.get(i) * inv_rms);
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(x: &Vector) -> Vector {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / sum).collect()).expect("softmax is finite")
}

/// Per-head deterministic attention weights for a projected query/key pair.
///
/// Returns, for each position `t`, the softmax row over source positions
/// (restricted to `s <= t` when causal). Used by both the mean path and the
/// variance rules.
pub fn attention_weights(
    q: &[Vector],
    k: &[Vector],
    heads: usize,
    causal: bool,
) -> Vec<Vec<Vector>> {
    let n = q.len();
    let d_head = q[0].len() / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * d_head;
        let mut per_t = Vec::with_capacity(n);
        for t in 0..n {
            let limit = if causal { t + 1 } else { n };
            let mut scores = Vector::zeros(limit);
            for s in 0..limit {
                let mut e = 0.0;
                for c in 0..d_head {
                    e += q[t].get(lo + c) * k[s].get(lo + c);
                }
                scores.set(s, e * scale);
            }
            per_t.push(softmax(&scores));
        }
        weights.push(per_t);
    }
    weights
}

/// Full multi-head self-attention mean path.
pub fn attention_mean(
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    heads: usize,
    causal: bool,
    xs: &[Vector],
) -> Result<Vec<Vector>> {
    let q: Vec<Vector> = xs.iter().map(|x| matvec(wq, x)).collect::<Result<_>>()?;
    let k: Vec<Vector> = xs.iter().map(|x| matvec(wk, x)).collect::<Result<_>>()?;
    let v: Vec<Vector> = xs.iter().map(|x| matvec(wv, x)).collect::<Result<_>>()?;
    let weights = attention_weights(&q, &k, heads, causal);
    let d_head_v = v[0].len() / heads;
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut concat = Vector::zeros(v[0].len());
        for (h, per_t) in weights.iter().enumerate() {
            let lo = h * d_head_v;
            let a = &per_t[t];
            for s in 0..a.len() {
                let w = a.get(s);
                for c in 0..d_head_v {
                    concat.set(lo + c, concat.get(lo + c) + w * v[s].get(lo + c));
                }
            }
        }
        out.push(matvec(wo, &concat)?);
    }
    Ok(out)
}
