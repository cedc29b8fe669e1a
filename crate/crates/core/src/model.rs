//! Architectures shared by the predictive-coding and backpropagation trainers.
//!
//! A [`ModelSpec`] expands into an ordered list of [`LayerDesc`]s. Layer 0 is
//! the input; every other layer computes its prediction from the values of
//! its parent layers and its own parameters. The same [`Network::build_mu`]
//! code path serves both trainers, so their forward passes agree exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Unary, Var};
use crate::distributions::{FamilyKind, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    HardTanh,
    Sigmoid,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    M1,
    M2,
    M3,
}

/// Architecture description, independent of parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Classifier {
        variant: Variant,
        input: usize,
        width: usize,
        hidden: usize,
        classes: usize,
        /// Adds a learnable per-node variance to every layer.
        #[serde(default)]
        trainable_sigma: bool,
    },
    Vae {
        input: usize,
        enc_layers: usize,
        dec_layers: usize,
        width: usize,
        latent: usize,
    },
    CausalLm {
        vocab: usize,
        d_model: usize,
        ffn_hidden: usize,
        max_len: usize,
    },
}

fn classifier(variant: Variant, width: usize, hidden: usize) -> ModelSpec {
    ModelSpec::Classifier {
        variant,
        input: 784,
        width,
        hidden,
        classes: 10,
        trainable_sigma: false,
    }
}

/// Tanh hidden layers and a tanh output.
pub fn build_m1(width: usize, hidden: usize) -> ModelSpec {
    classifier(Variant::M1, width, hidden)
}

/// Tanh hidden layers and a softmax output.
pub fn build_m2(width: usize, hidden: usize) -> ModelSpec {
    classifier(Variant::M2, width, hidden)
}

/// As M2, with the second hidden layer also softmax.
pub fn build_m3(width: usize, hidden: usize) -> ModelSpec {
    classifier(Variant::M3, width, hidden)
}

pub fn build_vae(enc_layers: usize, dec_layers: usize, width: usize, latent: usize) -> Result<ModelSpec> {
    if latent == 0 || !latent.is_multiple_of(2) {
        return Err(Error::Invalid(format!("latent width {latent} must be even and positive")));
    }
    Ok(ModelSpec::Vae {
        input: 784,
        enc_layers,
        dec_layers,
        width,
        latent,
    })
}

pub fn build_causal_lm(vocab: usize, d_model: usize, max_len: usize) -> Result<ModelSpec> {
    if vocab < 4 {
        return Err(Error::Invalid(format!("vocab {vocab} must be at least 4")));
    }
    Ok(ModelSpec::CausalLm {
        vocab,
        d_model,
        ffn_hidden: 2 * d_model,
        max_len,
    })
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("model.{what} must be positive")));
        match *self {
            ModelSpec::Classifier {
                variant,
                input,
                width,
                hidden,
                classes,
                ..
            } => {
                if input == 0 {
                    return bad("input");
                }
                if width == 0 {
                    return bad("width");
                }
                if classes == 0 {
                    return bad("classes");
                }
                if hidden == 0 || (variant == Variant::M3 && hidden < 2) {
                    return Err(Error::Invalid("model.hidden is too small for the variant".into()));
                }
            }
            ModelSpec::Vae {
                input,
                enc_layers,
                dec_layers,
                width,
                latent,
            } => {
                if input == 0 || width == 0 {
                    return bad("width");
                }
                if enc_layers == 0 || dec_layers == 0 {
                    return bad("enc_layers/dec_layers");
                }
                if latent == 0 || latent % 2 != 0 {
                    return Err(Error::Invalid(format!("model.latent {latent} must be even and positive")));
                }
            }
            ModelSpec::CausalLm {
                vocab,
                d_model,
                ffn_hidden,
                max_len,
            } => {
                if vocab < 4 {
                    return Err(Error::Invalid("model.vocab must be at least 4".into()));
                }
                if d_model == 0 || ffn_hidden == 0 {
                    return bad("d_model");
                }
                if max_len < 3 {
                    return Err(Error::Invalid("model.max_len must be at least 3".into()));
                }
            }
        }
        Ok(())
    }

    pub fn has_trainable_sigma(&self) -> bool {
        matches!(self, ModelSpec::Classifier { trainable_sigma: true, .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Classifier { variant: Variant::M1, .. } => "m1",
            ModelSpec::Classifier { variant: Variant::M2, .. } => "m2",
            ModelSpec::Classifier { variant: Variant::M3, .. } => "m3",
            ModelSpec::Vae { .. } => "vae",
            ModelSpec::CausalLm { .. } => "lm",
        }
    }

    /// Expands the spec into layer descriptors, input first.
    pub fn layers(&self) -> Vec<LayerDesc> {
        match *self {
            ModelSpec::Classifier {
                variant,
                input,
                width,
                hidden,
                classes,
                trainable_sigma,
            } => {
                let mut out = vec![LayerDesc::input(input)];
                for h in 1..=hidden {
                    let act = if variant == Variant::M3 && h == 2 {
                        Activation::Softmax
                    } else {
                        Activation::Tanh
                    };
                    let fan = if h == 1 { input } else { width };
                    out.push(LayerDesc::dense(format!("hidden{h}"), h - 1, fan, width, act));
                }
                let act = if variant == Variant::M1 {
                    Activation::Tanh
                } else {
                    Activation::Softmax
                };
                out.push(LayerDesc::dense("output".into(), hidden, width, classes, act));
                if trainable_sigma {
                    for l in out.iter_mut().skip(1) {
                        l.params.push(ParamDesc::new("var", vec![l.width], Init::Const(1.0)));
                    }
                }
                out
            }
            ModelSpec::Vae {
                input,
                enc_layers,
                dec_layers,
                width,
                latent,
            } => {
                let mut out = vec![LayerDesc::input(input)];
                for h in 1..=enc_layers {
                    let fan = if h == 1 { input } else { width };
                    out.push(LayerDesc::dense(format!("enc{h}"), h - 1, fan, width, Activation::HardTanh));
                }
                let b = enc_layers + 1;
                let half = latent / 2;
                out.push(LayerDesc {
                    name: "bottleneck".into(),
                    op: LayerOp::GaussianHead,
                    parents: vec![b - 1],
                    width: latent,
                    family: FamilyKind::FullGaussian,
                    params: vec![
                        ParamDesc::new("w_mean", vec![width, half], Init::Uniform(width)),
                        ParamDesc::new("b_mean", vec![half], Init::Uniform(width)),
                        ParamDesc::new("w_var", vec![width, half], Init::Uniform(width)),
                        ParamDesc::new("b_var", vec![half], Init::Uniform(width)),
                    ],
                });
                let mut first = LayerDesc::dense("dec1".into(), b, half, width, Activation::HardTanh);
                first.op = LayerOp::Reparam {
                    act: Activation::HardTanh,
                };
                out.push(first);
                for h in 2..=dec_layers {
                    out.push(LayerDesc::dense(format!("dec{h}"), b + h - 1, width, width, Activation::HardTanh));
                }
                let last = b + dec_layers;
                out.push(LayerDesc::dense("output".into(), last, width, input, Activation::Sigmoid));
                out
            }
            ModelSpec::CausalLm {
                vocab,
                d_model: d,
                ffn_hidden,
                max_len,
            } => {
                let fan = Init::Uniform(d);
                vec![
                    LayerDesc {
                        name: "tokens".into(),
                        op: LayerOp::Input,
                        parents: vec![],
                        width: max_len,
                        family: FamilyKind::Categorical,
                        params: vec![],
                    },
                    LayerDesc {
                        name: "embed".into(),
                        op: LayerOp::Embed,
                        parents: vec![0],
                        width: d,
                        family: FamilyKind::GaussianIdentity,
                        params: vec![
                            ParamDesc::new("token", vec![vocab, d], Init::Normal(1.0)),
                            ParamDesc::new("position", vec![max_len, d], Init::Normal(0.1)),
                        ],
                    },
                    LayerDesc {
                        name: "attn_probs".into(),
                        op: LayerOp::AttnProbs,
                        parents: vec![1],
                        width: max_len,
                        family: FamilyKind::Categorical,
                        params: vec![
                            ParamDesc::new("w_q", vec![d, d], fan),
                            ParamDesc::new("b_q", vec![d], fan),
                            ParamDesc::new("w_k", vec![d, d], fan),
                            ParamDesc::new("b_k", vec![d], fan),
                        ],
                    },
                    LayerDesc {
                        name: "attn_out".into(),
                        op: LayerOp::AttnOut,
                        parents: vec![1, 2],
                        width: d,
                        family: FamilyKind::GaussianIdentity,
                        params: vec![
                            ParamDesc::new("w_v", vec![d, d], fan),
                            ParamDesc::new("b_v", vec![d], fan),
                            ParamDesc::new("w_o", vec![d, d], fan),
                            ParamDesc::new("b_o", vec![d], fan),
                            ParamDesc::new("ln_gain", vec![d], Init::Const(1.0)),
                            ParamDesc::new("ln_bias", vec![d], Init::Const(0.0)),
                        ],
                    },
                    LayerDesc {
                        name: "ffn".into(),
                        op: LayerOp::Ffn,
                        parents: vec![3],
                        width: d,
                        family: FamilyKind::GaussianIdentity,
                        params: vec![
                            ParamDesc::new("w_1", vec![d, ffn_hidden], fan),
                            ParamDesc::new("b_1", vec![ffn_hidden], fan),
                            ParamDesc::new("w_2", vec![ffn_hidden, d], Init::Uniform(ffn_hidden)),
                            ParamDesc::new("b_2", vec![d], Init::Uniform(ffn_hidden)),
                            ParamDesc::new("ln_gain", vec![d], Init::Const(1.0)),
                            ParamDesc::new("ln_bias", vec![d], Init::Const(0.0)),
                        ],
                    },
                    LayerDesc::dense("output".into(), 4, d, vocab, Activation::Softmax),
                ]
            }
        }
    }
}

/// How a layer computes its prediction from its parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerOp {
    Input,
    /// `act(x W + b)`.
    Dense { act: Activation },
    /// Mean half `x W_m + b_m`, variance half `softplus(x W_v + b_v) + floor`.
    GaussianHead,
    /// Dense layer fed with the reparameterised sample `u + noise * sqrt(var)`
    /// of a Gaussian parent.
    Reparam { act: Activation },
    /// Token plus learned position embedding.
    Embed,
    /// Causal attention probabilities `softmax(Q K^T / sqrt(d))`, `[B, S, S]`.
    AttnProbs,
    /// `LN(x + (A V) W_o)` from the embedding and the attention probabilities.
    AttnOut,
    /// `LN(x + W_2 tanh(W_1 x))`.
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform(usize),
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDesc {
    fn new(name: &str, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = self.shape.iter().product();
        let data: Vec<f64> = match self.init {
            Init::Uniform(fan) => {
                let b = 1.0 / (fan as f64).sqrt();
                let u = Uniform::new_inclusive(-b, b);
                (0..n).map(|_| u.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        Tensor::from_parts(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub op: LayerOp,
    pub parents: Vec<usize>,
    /// Size of the last axis of the layer value.
    pub width: usize,
    /// Distribution family the layer takes under the KL energy.
    pub family: FamilyKind,
    pub params: Vec<ParamDesc>,
}

impl LayerDesc {
    fn input(width: usize) -> Self {
        Self {
            name: "input".into(),
            op: LayerOp::Input,
            parents: vec![],
            width,
            family: FamilyKind::GaussianIdentity,
            params: vec![],
        }
    }

    fn dense(name: String, parent: usize, fan_in: usize, width: usize, act: Activation) -> Self {
        let family = if act == Activation::Softmax {
            FamilyKind::Categorical
        } else {
            FamilyKind::GaussianIdentity
        };
        Self {
            name,
            op: LayerOp::Dense { act },
            parents: vec![parent],
            width,
            family,
            params: vec![
                ParamDesc::new("w", vec![fan_in, width], Init::Uniform(fan_in)),
                ParamDesc::new("b", vec![width], Init::Uniform(fan_in)),
            ],
        }
    }

    /// Index of the learnable variance, if the layer has one.
    pub fn var_param(&self) -> Option<usize> {
        self.params.iter().position(|p| p.name == "var")
    }
}

/// Per-call context for building predictions.
#[derive(Debug, Clone, Copy)]
pub struct LayerCtx<'a> {
    pub batch: usize,
    /// Sequence length for token models, 1 otherwise.
    pub seq: usize,
    /// Reparameterisation noise, `[batch, latent / 2]`.
    pub noise: Option<&'a Tensor>,
}

/// A model spec together with parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub layers: Vec<LayerDesc>,
    pub params: Vec<Vec<Tensor>>,
}

impl Network {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| l.params.iter().map(|p| p.sample(&mut rng)).collect())
            .collect();
        Ok(Self { spec, layers, params })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(spec: ModelSpec, params: Vec<Vec<Tensor>>) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        if params.len() != layers.len() {
            return Err(Error::Format(format!(
                "expected parameters for {} layers, found {}",
                layers.len(),
                params.len()
            )));
        }
        for (l, (desc, ps)) in layers.iter().zip(&params).enumerate() {
            if ps.len() != desc.params.len() {
                return Err(Error::Format(format!("layer {l}: wrong parameter count")));
            }
            for (p, t) in desc.params.iter().zip(ps) {
                if p.shape != t.shape() {
                    return Err(Error::Format(format!(
                        "layer {l} parameter {}: shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.shape
                    )));
                }
            }
        }
        Ok(Self { spec, layers, params })
    }

    /// Index of the output layer.
    pub fn output(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::numel).sum()
    }

    pub fn is_token_model(&self) -> bool {
        matches!(self.spec, ModelSpec::CausalLm { .. })
    }

    /// Index of the Gaussian bottleneck layer, for VAEs.
    pub fn bottleneck(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.op == LayerOp::GaussianHead)
    }

    /// Builds the prediction of layer `l` on `g` from parent values `inputs`
    /// and parameter nodes `params`.
    pub fn build_mu(&self, g: &mut Graph, l: usize, inputs: &[Var], params: &[Var], ctx: &LayerCtx) -> Result<Var> {
        let desc = &self.layers[l];
        if inputs.len() != desc.parents.len() || params.len() != desc.params.len() {
            return Err(Error::Invalid(format!("layer {l}: wrong number of inputs")));
        }
        match desc.op {
            LayerOp::Input => Err(Error::Invalid("the input layer has no prediction".into())),
            LayerOp::Dense { act } => {
                let z = affine(g, inputs[0], params[0], params[1])?;
                activate(g, z, act)
            }
            LayerOp::GaussianHead => {
                let m = affine(g, inputs[0], params[0], params[1])?;
                let r = affine(g, inputs[0], params[2], params[3])?;
                let s = g.unary(r, Unary::Softplus)?;
                let s = g.add_const(s, VAR_FLOOR)?;
                g.concat_last(m, s)
            }
            LayerOp::Reparam { act } => {
                let w = g.shape(inputs[0]).last().copied().unwrap_or(0);
                let h = w / 2;
                let u = g.slice_last(inputs[0], 0, h)?;
                let z = match ctx.noise {
                    None => u,
                    Some(noise) => {
                        let s = g.slice_last(inputs[0], h, w)?;
                        let s = g.clamp_min(s, VAR_FLOOR)?;
                        let sd = g.unary(s, Unary::Sqrt)?;
                        let n = g.constant(noise.clone());
                        let e = g.mul(n, sd)?;
                        g.add(u, e)?
                    }
                };
                let z = affine(g, z, params[0], params[1])?;
                activate(g, z, act)
            }
            LayerOp::Embed => {
                let ids = g.value(inputs[0]);
                let (b, s) = (ctx.batch, ctx.seq);
                if ids.numel() != b * s {
                    return Err(Error::Invalid(format!("token matrix has {} entries, expected {b}x{s}", ids.numel())));
                }
                let max_len = g.shape(params[1])[0];
                if s > max_len {
                    return Err(Error::Invalid(format!("sequence length {s} exceeds max_len {max_len}")));
                }
                let tok: Vec<usize> = ids.data().iter().map(|&v| v as usize).collect();
                let pos: Vec<usize> = (0..b * s).map(|i| i % s).collect();
                let te = g.gather(params[0], &tok)?;
                let pe = g.gather(params[1], &pos)?;
                g.add(te, pe)
            }
            LayerOp::AttnProbs => {
                let (b, s) = (ctx.batch, ctx.seq);
                let d = g.shape(inputs[0])[1];
                let q = affine(g, inputs[0], params[0], params[1])?;
                let k = affine(g, inputs[0], params[2], params[3])?;
                let q = g.reshape(q, &[b, s, d])?;
                let k = g.reshape(k, &[b, s, d])?;
                let scores = g.bmm_t(q, k, false, true)?;
                let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
                g.causal_softmax(scores)
            }
            LayerOp::AttnOut => {
                let (b, s) = (ctx.batch, ctx.seq);
                let x = inputs[0];
                let d = g.shape(x)[1];
                let v = affine(g, x, params[0], params[1])?;
                let v = g.reshape(v, &[b, s, d])?;
                let o = g.bmm_t(inputs[1], v, false, false)?;
                let o = g.reshape(o, &[b * s, d])?;
                let y = affine(g, o, params[2], params[3])?;
                let r = g.add(x, y)?;
                norm(g, r, params[4], params[5])
            }
            LayerOp::Ffn => {
                let x = inputs[0];
                let h = affine(g, x, params[0], params[1])?;
                let h = g.tanh(h)?;
                let y = affine(g, h, params[2], params[3])?;
                let r = g.add(x, y)?;
                norm(g, r, params[4], params[5])
            }
        }
    }

    /// Pure forward pass returning every layer value, input first.
    pub fn forward(&self, input: &Tensor, ctx: &LayerCtx) -> Result<Vec<Tensor>> {
        self.check_input(input, ctx)?;
        let mut values = vec![input.clone()];
        for l in 1..self.layers.len() {
            let mut g = Graph::new();
            let inputs: Vec<Var> = self.layers[l]
                .parents
                .iter()
                .map(|&p| g.constant(values[p].clone()))
                .collect();
            let params: Vec<Var> = self.params[l].iter().map(|t| g.constant(t.clone())).collect();
            let mu = self.build_mu(&mut g, l, &inputs, &params, ctx)?;
            values.push(g.value(mu).clone());
        }
        Ok(values)
    }

    pub fn check_input(&self, input: &Tensor, ctx: &LayerCtx) -> Result<()> {
        let expected = if self.is_token_model() {
            vec![ctx.batch, ctx.seq]
        } else {
            vec![ctx.batch, self.layers[0].width]
        };
        if input.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: input.shape().to_vec(),
                rhs: expected,
            });
        }
        Ok(())
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = g.matmul(x, w)?;
    g.add_row(z, b)
}

fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

pub fn activate(g: &mut Graph, z: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(z),
        Activation::Tanh => g.tanh(z),
        Activation::HardTanh => g.unary(z, Unary::HardTanh),
        Activation::Sigmoid => g.sigmoid(z),
        Activation::Relu => g.unary(z, Unary::Relu),
        Activation::Softmax => {
            let axis = g.shape(z).len() - 1;
            g.softmax(z, axis)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(batch: usize) -> LayerCtx<'static> {
        LayerCtx {
            batch,
            seq: 1,
            noise: None,
        }
    }

    #[test]
    fn classifier_families() {
        let fam = |s: ModelSpec| s.layers().iter().skip(1).map(|l| l.family).collect::<Vec<_>>();
        use FamilyKind::*;
        assert_eq!(
            fam(build_m2(512, 3)),
            vec![GaussianIdentity, GaussianIdentity, GaussianIdentity, Categorical]
        );
        assert_eq!(fam(build_m1(8, 3)), vec![GaussianIdentity; 4]);
        let m3 = fam(build_m3(8, 3));
        assert_eq!(m3.iter().filter(|f| **f == Categorical).count(), 2);
        assert_eq!(m3[1], Categorical);
    }

    #[test]
    fn softmax_layers_are_categorical() {
        let specs = [
            build_m1(6, 3),
            build_m2(6, 3),
            build_m3(6, 3),
            build_vae(2, 2, 6, 4).unwrap(),
            build_causal_lm(10, 8, 6).unwrap(),
        ];
        for s in specs {
            for l in s.layers() {
                let softmax = matches!(l.op, LayerOp::Dense { act: Activation::Softmax } | LayerOp::AttnProbs);
                if l.op != LayerOp::Input {
                    assert_eq!(softmax, l.family == FamilyKind::Categorical, "{}", l.name);
                }
            }
        }
    }

    #[test]
    fn zero_weights_propagate_zero() {
        let mut net = Network::new(build_m1(5, 3), 1).unwrap();
        for ps in &mut net.params {
            for p in ps {
                *p = Tensor::zeros(p.shape());
            }
        }
        let d = Tensor::full(&[2, 784], 0.7);
        let vals = net.forward(&d, &ctx(2)).unwrap();
        for v in &vals[1..] {
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn vae_rejects_odd_latent() {
        assert!(build_vae(2, 2, 16, 31).is_err());
        assert!(build_causal_lm(3, 8, 10).is_err());
    }

    #[test]
    fn vae_zero_noise_feeds_mean() {
        let net = Network::new(build_vae(1, 1, 6, 4).unwrap(), 3).unwrap();
        let d = Tensor::full(&[1, 784], 0.5);
        let zero = Tensor::zeros(&[1, 2]);
        let a = net.forward(&d, &ctx(1)).unwrap();
        let c = LayerCtx {
            batch: 1,
            seq: 1,
            noise: Some(&zero),
        };
        let b = net.forward(&d, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let net = Network::new(build_causal_lm(7, 4, 5).unwrap(), 0).unwrap();
        let ids = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let c = LayerCtx {
            batch: 1,
            seq: 1,
            noise: None,
        };
        let vals = net.forward(&ids, &c).unwrap();
        assert_eq!(vals[2].data(), &[1.0]);
    }

    #[test]
    fn sequence_longer_than_max_len_is_rejected() {
        let net = Network::new(build_causal_lm(7, 4, 3).unwrap(), 0).unwrap();
        let ids = Tensor::zeros(&[1, 4]);
        let c = LayerCtx {
            batch: 1,
            seq: 4,
            noise: None,
        };
        assert!(net.forward(&ids, &c).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = Network::new(build_m2(4, 2), 0).unwrap();
        assert!(Network::from_params(net.spec.clone(), net.params.clone()).is_ok());
        let mut bad = net.params.clone();
        bad[1][0] = Tensor::zeros(&[3, 3]);
        assert!(Network::from_params(net.spec.clone(), bad).is_err());
    }
}
