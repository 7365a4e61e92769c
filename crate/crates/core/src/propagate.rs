//! Push Gaussian state through every frozen layer kind: exact squared-weight
//! rules for linear maps, the first-order delta method for element-wise
//! nonlinearities, and the transformer rules (RMSNorm, self-attention
//! variants A/B, softmax).
//!
//! Means always follow the deterministic forward pass — the mean helpers are
//! the same functions [`NetworkSpec::forward_deterministic`] calls, so an
//! augmented pass is bit-identical on the mean path.

use crate::error::{GapaError, Result};
use crate::gpact::GapaLayer;
use crate::network::{
    attention_mean, attention_weights, linear_mean, rmsnorm_mean, softmax, ActivationTag,
    LayerSpec, NetworkSpec,
};
use crate::tensor::{hadamard, matvec, GaussianVector, Matrix, Vector};
use std::collections::BTreeMap;

/// Token positions of Gaussian state with a shared width.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSequence {
    positions: Vec<GaussianVector>,
}

impl GaussianSequence {
    pub fn new(positions: Vec<GaussianVector>) -> Result<Self> {
        if positions.is_empty() {
            return Err(GapaError::InvalidParameter {
                what: "sequence must have at least one position".into(),
            });
        }
        let width = positions[0].len();
        if positions.iter().any(|p| p.len() != width) {
            return Err(GapaError::DimensionMismatch {
                context: "GaussianSequence shared width",
                expected: width,
                got: positions.iter().map(|p| p.len()).find(|w| *w != width).unwrap(),
            });
        }
        Ok(Self { positions })
    }

    pub fn certain(means: &[Vector]) -> Result<Self> {
        Self::new(means.iter().map(|m| GaussianVector::certain(m.clone())).collect())
    }

    pub fn positions(&self) -> &[GaussianVector] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.positions[0].len()
    }

    pub fn into_positions(self) -> Vec<GaussianVector> {
        self.positions
    }
}

/// Linear layer: mean `Wμ + b`, variance `(W⊙W)·v`.
pub fn propagate_linear(
    weight: &Matrix,
    bias: &Vector,
    input: &GaussianVector,
) -> Result<GaussianVector> {
    let mean = linear_mean(weight, bias, input.mean())?;
    let var = matvec(&weight.squared(), input.var())?;
    GaussianVector::new(mean, var)
}

/// Element-wise delta method: mean `g(μ)`, variance `g′(μ)² ⊙ v`.
pub fn propagate_elementwise(tag: ActivationTag, input: &GaussianVector) -> GaussianVector {
    let mean = tag.apply(input.mean());
    let slopes = input.mean().map(|m| {
        let s = tag.derivative(m);
        s * s
    });
    let var = hadamard(&slopes, input.var()).expect("same width");
    GaussianVector::new(mean, var).expect("slope² · v ≥ 0")
}

/// RMSNorm with a deterministic second moment: `s² = mean(μ²) + mean(v) + eps`,
/// mean path via mean-only RMS, variance `γ² ⊙ v / s²`.
pub fn propagate_rmsnorm(gamma: &Vector, eps: f64, input: &GaussianVector) -> GaussianVector {
    let mean = rmsnorm_mean(gamma, eps, input.mean());
    let d = input.len() as f64;
    let s2 = input.mean().iter().map(|m| m * m).sum::<f64>() / d
        + input.var().iter().sum::<f64>() / d
        + eps;
    let mut var = Vector::zeros(input.len());
    for i in 0..input.len() {
        let g = gamma.get(i);
        var.set(i, g * g * input.var().get(i) / s2);
    }
    GaussianVector::new(mean, var).expect("non-negative by construction")
}

/// Softmax variance by the delta method:
/// `Var(s_k) = s_k²[(1−s_k)² v_k + Σ_{i≠k} s_i² v_i]`,
/// where `s` is the softmax of the means.
pub fn propagate_softmax_var(s: &Vector, v: &Vector) -> Vector {
    let weighted: Vec<f64> = s
        .iter()
        .zip(v.iter())
        .map(|(si, vi)| si * si * vi)
        .collect();
    let total: f64 = weighted.iter().sum();
    let mut out = Vector::zeros(s.len());
    for k in 0..s.len() {
        let sk = s.get(k);
        let excl = total - weighted[k];
        let diag = (1.0 - sk) * (1.0 - sk) * v.get(k);
        out.set(k, sk * sk * (diag + excl));
    }
    out
}

/// Softmax head: mean is the deterministic softmax, variance by
/// [`propagate_softmax_var`].
pub fn propagate_softmax_head(input: &GaussianVector) -> GaussianVector {
    let mean = softmax(input.mean());
    let var = propagate_softmax_var(&mean, input.var());
    GaussianVector::new(mean, var).expect("non-negative by construction")
}

/// Residual connection under the diagonal independence assumption: means add
/// and variances add.
pub fn residual_add(a: &GaussianVector, b: &GaussianVector) -> Result<GaussianVector> {
    let mean = a.mean().add(b.mean())?;
    let var = a.var().add(b.var())?;
    GaussianVector::new(mean, var)
}

/// Which attention variance rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionVariant {
    /// Deterministic attention weights; only value variance propagates.
    #[default]
    A,
    /// Delta-method variance on the attention logits and weights as well.
    B,
}

struct AttentionSpec<'a> {
    wq: &'a Matrix,
    wk: &'a Matrix,
    wv: &'a Matrix,
    wo: &'a Matrix,
    heads: usize,
    causal: bool,
}

fn attention_propagate(
    spec: &AttentionSpec<'_>,
    input: &GaussianSequence,
    variant: AttentionVariant,
) -> Result<GaussianSequence> {
    let n = input.len();
    let means: Vec<Vector> = input.positions().iter().map(|p| p.mean().clone()).collect();
    let out_means = attention_mean(spec.wq, spec.wk, spec.wv, spec.wo, spec.heads, spec.causal, &means)?;

    let q: Vec<Vector> = means.iter().map(|x| matvec(spec.wq, x)).collect::<Result<_>>()?;
    let k: Vec<Vector> = means.iter().map(|x| matvec(spec.wk, x)).collect::<Result<_>>()?;
    let v: Vec<Vector> = means.iter().map(|x| matvec(spec.wv, x)).collect::<Result<_>>()?;
    let wv2 = spec.wv.squared();
    let var_v: Vec<Vector> = input
        .positions()
        .iter()
        .map(|p| matvec(&wv2, p.var()))
        .collect::<Result<_>>()?;
    let weights = attention_weights(&q, &k, spec.heads, spec.causal);

    // Variant B additionally needs query/key variances and the per-pair
    // logit variances pushed through the softmax rule.
    let (var_q, var_k) = if variant == AttentionVariant::B {
        let wq2 = spec.wq.squared();
        let wk2 = spec.wk.squared();
        (
            input
                .positions()
                .iter()
                .map(|p| matvec(&wq2, p.var()))
                .collect::<Result<Vec<_>>>()?,
            input
                .positions()
                .iter()
                .map(|p| matvec(&wk2, p.var()))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let d_head_v = v[0].len() / spec.heads;
    let d_head_qk = q[0].len() / spec.heads;
    let mut out_positions = Vec::with_capacity(n);
    for t in 0..n {
        let mut concat_var = Vector::zeros(v[0].len());
        for (h, per_t) in weights.iter().enumerate() {
            let a = &per_t[t];
            let lo_v = h * d_head_v;
            match variant {
                AttentionVariant::A => {
                    // Var(y_{t,i}) = Σ_s a_ts² Var(v_{s,i})
                    for s in 0..a.len() {
                        let w2 = a.get(s) * a.get(s);
                        for c in 0..d_head_v {
                            let idx = lo_v + c;
                            concat_var.set(
                                idx,
                                concat_var.get(idx) + w2 * var_v[s].get(idx),
                            );
                        }
                    }
                }
                AttentionVariant::B => {
                    // Var(e_ts) = (1/d_k) Σ_h [q²Var(k) + k²Var(q) + Var(q)Var(k)]
                    let lo_qk = h * d_head_qk;
                    let mut var_e = Vector::zeros(a.len());
                    for s in 0..a.len() {
                        let mut acc = 0.0;
                        for c in 0..d_head_qk {
                            let qt = q[t].get(lo_qk + c);
                            let ks = k[s].get(lo_qk + c);
                            let vq = var_q[t].get(lo_qk + c);
                            let vk = var_k[s].get(lo_qk + c);
                            acc += qt * qt * vk + ks * ks * vq + vq * vk;
                        }
                        var_e.set(s, acc / d_head_qk as f64);
                    }
                    let var_a = propagate_softmax_var(a, &var_e);
                    // Var(y_{t,i}) = Σ_s [Var(a)·μ_v² + a²·Var(v) + Var(a)·Var(v)]
                    for s in 0..a.len() {
                        let ats = a.get(s);
                        let va = var_a.get(s);
                        for c in 0..d_head_v {
                            let idx = lo_v + c;
                            let mv = v[s].get(idx);
                            let vv = var_v[s].get(idx);
                            concat_var.set(
                                idx,
                                concat_var.get(idx)
                                    + va * mv * mv
                                    + ats * ats * vv
                                    + va * vv,
                            );
                        }
                    }
                }
            }
        }
        let out_var = matvec(&spec.wo.squared(), &concat_var)?;
        out_positions.push(GaussianVector::new(out_means[t].clone(), out_var)?);
    }
    GaussianSequence::new(out_positions)
}

/// Variant A self-attention: deterministic attention weights, value variance
/// only.
pub fn propagate_attention_a(
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    heads: usize,
    causal: bool,
    input: &GaussianSequence,
) -> Result<GaussianSequence> {
    attention_propagate(
        &AttentionSpec { wq, wk, wv, wo, heads, causal },
        input,
        AttentionVariant::A,
    )
}

/// Variant B self-attention: attention-weight variance via the delta method
/// on the scaled logits and the softmax rule.
pub fn propagate_attention_b(
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    heads: usize,
    causal: bool,
    input: &GaussianSequence,
) -> Result<GaussianSequence> {
    attention_propagate(
        &AttentionSpec { wq, wk, wv, wo, heads, causal },
        input,
        AttentionVariant::B,
    )
}

/// A frozen network with GP activations attached at its attachment points.
#[derive(Debug)]
pub struct AugmentedNetwork {
    net: NetworkSpec,
    gapa: BTreeMap<usize, GapaLayer>,
    variant: AttentionVariant,
}

impl AugmentedNetwork {
    /// Attaches GP activation layers, checking each against its declared
    /// point, layer width, and the spec's fingerprint.
    pub fn new(
        net: NetworkSpec,
        layers: Vec<GapaLayer>,
        variant: AttentionVariant,
    ) -> Result<Self> {
        let mut gapa = BTreeMap::new();
        for layer in layers {
            let idx = layer.layer_index();
            if !net.gapa_points().contains(&idx) {
                return Err(GapaError::InvalidParameter {
                    what: format!("layer {idx} is not a GAPA attachment point of this network"),
                });
            }
            let width = net.width_at(idx);
            if layer.inducing().dim() != width {
                return Err(GapaError::DimensionMismatch {
                    context: "inducing width vs layer width",
                    expected: width,
                    got: layer.inducing().dim(),
                });
            }
            match net.layers()[idx] {
                LayerSpec::Activation(tag) if tag == layer.activation() => {}
                _ => {
                    return Err(GapaError::InvalidParameter {
                        what: format!("GAPA layer at {idx} does not match the network activation"),
                    })
                }
            }
            gapa.insert(idx, layer);
        }
        Ok(Self { net, gapa, variant })
    }

    /// Plain wrapper with no GP layers: propagation reproduces the
    /// deterministic forward with zero variance.
    pub fn bare(net: NetworkSpec) -> Self {
        Self {
            net,
            gapa: BTreeMap::new(),
            variant: AttentionVariant::default(),
        }
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn gapa_layers(&self) -> impl Iterator<Item = &GapaLayer> {
        self.gapa.values()
    }

    /// Propagates a deterministic input sequence (variance starts at zero)
    /// through the network.
    pub fn propagate(&self, inputs: &[Vector]) -> Result<GaussianSequence> {
        self.propagate_gaussian(&GaussianSequence::certain(inputs)?)
    }

    /// Single-vector convenience wrapper.
    pub fn propagate_vector(&self, input: &Vector) -> Result<GaussianVector> {
        let seq = self.propagate(std::slice::from_ref(input))?;
        Ok(seq.into_positions().into_iter().next().expect("one position"))
    }

    /// Propagates an already-uncertain state, dispatching per layer kind.
    pub fn propagate_gaussian(&self, input: &GaussianSequence) -> Result<GaussianSequence> {
        if input.width() != self.net.input_width() {
            return Err(GapaError::DimensionMismatch {
                context: "network input width",
                expected: self.net.input_width(),
                got: input.width(),
            });
        }
        let mut state = input.clone();
        for (idx, layer) in self.net.layers().iter().enumerate() {
            state = match layer {
                LayerSpec::Linear { weight, bias } => GaussianSequence::new(
                    state
                        .positions()
                        .iter()
                        .map(|p| propagate_linear(weight, bias, p))
                        .collect::<Result<_>>()?,
                )?,
                LayerSpec::Activation(tag) => match self.gapa.get(&idx) {
                    Some(gapa) => GaussianSequence::new(
                        state
                            .positions()
                            .iter()
                            .map(|p| gapa.forward(p))
                            .collect::<Result<_>>()?,
                    )?,
                    None => GaussianSequence::new(
                        state
                            .positions()
                            .iter()
                            .map(|p| propagate_elementwise(*tag, p))
                            .collect(),
                    )?,
                },
                LayerSpec::RmsNorm { gamma, eps } => GaussianSequence::new(
                    state
                        .positions()
                        .iter()
                        .map(|p| propagate_rmsnorm(gamma, *eps, p))
                        .collect(),
                )?,
                LayerSpec::SelfAttention {
                    wq,
                    wk,
                    wv,
                    wo,
                    heads,
                    causal,
                } => attention_propagate(
                    &AttentionSpec {
                        wq,
                        wk,
                        wv,
                        wo,
                        heads: *heads,
                        causal: *causal,
                    },
                    &state,
                    self.variant,
                )?,
                LayerSpec::SoftmaxHead => GaussianSequence::new(
                    state.positions().iter().map(propagate_softmax_head).collect(),
                )?,
            };
        }
        Ok(state)
    }
}
