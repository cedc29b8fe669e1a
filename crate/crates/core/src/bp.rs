//! Backpropagation baseline over the same layer graphs as the PC trainer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::distributions::{kl_diag_gaussian, split_halves, PROB_FLOOR, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::{Optimizer, OptimizerKind};
use crate::pc::{apply_gradients, Feed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Squared error summed over outputs, averaged over the batch.
    Mse,
    /// `-sum target * ln(output)` on a softmax head, averaged over the batch
    /// (over unmasked positions for token models).
    CrossEntropy,
    /// Squared reconstruction error plus `KL(N(u, var) || N(0, I))` at the
    /// bottleneck, averaged over the batch.
    VaeElbo,
}

/// Records the whole forward pass on `g`. Returns the layer values and the
/// parameter nodes.
pub fn build_forward(net: &Network, g: &mut Graph, feed: &Feed, trainable: bool) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
    net.check_input(&feed.input, &feed.ctx())?;
    let mut values = vec![g.constant(feed.input.clone())];
    let mut params = vec![Vec::new()];
    for l in 1..net.layers.len() {
        let inputs: Vec<Var> = net.layers[l].parents.iter().map(|&p| values[p]).collect();
        let ps: Vec<Var> = net.params[l]
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let mu = net.build_mu(g, l, &inputs, &ps, &feed.ctx())?;
        values.push(mu);
        params.push(ps);
    }
    Ok((values, params))
}

fn build_loss(net: &Network, g: &mut Graph, values: &[Var], feed: &Feed, loss: Loss) -> Result<Var> {
    let target = feed
        .target
        .as_ref()
        .ok_or_else(|| Error::Invalid("loss needs a target".into()))?;
    let out = *values.last().expect("output layer");
    if g.shape(out) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: g.shape(out).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let o = g.constant(target.clone());
    let per_row = match loss {
        Loss::Mse | Loss::VaeElbo => {
            let d = g.sub(out, o)?;
            let sq = g.square(d)?;
            g.sum_last(sq)?
        }
        Loss::CrossEntropy => {
            let f = g.clamp_min(out, PROB_FLOOR)?;
            let lf = g.ln(f)?;
            let t = g.mul(o, lf)?;
            let s = g.sum_last(t)?;
            g.scale(s, -1.0)?
        }
    };
    let (total, count) = match &feed.row_mask {
        Some(m) => {
            let mv = g.constant(m.clone());
            let w = g.mul(per_row, mv)?;
            (g.sum(w)?, m.sum().max(1.0))
        }
        None => (g.sum(per_row)?, feed.batch as f64),
    };
    let mut total = total;
    if loss == Loss::VaeElbo {
        let b = net
            .bottleneck()
            .ok_or_else(|| Error::Invalid("vae-elbo loss needs a Gaussian bottleneck".into()))?;
        let kl = prior_kl(g, values[b])?;
        total = g.add(total, kl)?;
    }
    g.scale(total, 1.0 / count)
}

/// `KL(N(u, var) || N(0, I)) = 1/2 sum(var + u^2 - 1 - ln var)` on a value
/// holding mean and variance halves.
fn prior_kl(g: &mut Graph, z: Var) -> Result<Var> {
    let w = g.shape(z).last().copied().unwrap_or(0);
    let u = g.slice_last(z, 0, w / 2)?;
    let s = g.slice_last(z, w / 2, w)?;
    let s = g.clamp_min(s, VAR_FLOOR)?;
    let u2 = g.square(u)?;
    let ls = g.ln(s)?;
    let t = g.add(s, u2)?;
    let t = g.sub(t, ls)?;
    let t = g.add_const(t, -1.0)?;
    let t = g.sum(t)?;
    g.scale(t, 0.5)
}

/// Loss value without gradients.
pub fn bp_loss(net: &Network, feed: &Feed, loss: Loss) -> Result<f64> {
    let mut g = Graph::new();
    let (values, _) = build_forward(net, &mut g, feed, false)?;
    let l = build_loss(net, &mut g, &values, feed, loss)?;
    Ok(g.value(l).item())
}

/// Loss and its gradient with respect to every parameter.
pub fn bp_gradients(net: &Network, feed: &Feed, loss: Loss) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let (values, params) = build_forward(net, &mut g, feed, true)?;
    let l = build_loss(net, &mut g, &values, feed, loss)?;
    let value = g.value(l).item();
    if !value.is_finite() {
        return Err(Error::Divergence("loss is not finite".into()));
    }
    let mut grads = g.backward(l)?;
    let out = params
        .iter()
        .zip(&net.params)
        .map(|(vs, ts)| {
            vs.iter()
                .zip(ts)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        })
        .collect();
    Ok((value, out))
}

/// Standalone ELBO-style loss on plain tensors: squared reconstruction error
/// plus the prior KL of the bottleneck, summed over the batch.
pub fn vae_elbo_loss(reconstruction: &Tensor, target: &Tensor, u: &Tensor, var: &Tensor) -> Result<f64> {
    if reconstruction.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "vae_elbo_loss",
            lhs: reconstruction.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if u.shape() != var.shape() {
        return Err(Error::ShapeMismatch {
            op: "vae_elbo_loss",
            lhs: u.shape().to_vec(),
            rhs: var.shape().to_vec(),
        });
    }
    let rec: f64 = reconstruction
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let zeros = vec![0.0; u.numel()];
    let ones = vec![1.0; u.numel()];
    Ok(rec + kl_diag_gaussian(u.data(), var.data(), &zeros, &ones)?)
}

/// Splits a bottleneck value into `(u, var)` tensors.
pub fn bottleneck_parts(z: &Tensor) -> Result<(Tensor, Tensor)> {
    let (u, s) = split_halves(z)?;
    let mut shape = z.shape().to_vec();
    *shape.last_mut().expect("non-scalar") /= 2;
    Ok((Tensor::new(shape.clone(), u)?, Tensor::new(shape, s)?))
}

#[derive(Debug, Clone)]
pub struct BpTrainer {
    pub loss: Loss,
    opt: Optimizer,
}

impl BpTrainer {
    pub fn new(loss: Loss, optimizer: OptimizerKind, lr: f64) -> Result<Self> {
        Ok(Self {
            loss,
            opt: Optimizer::new(optimizer, lr)?,
        })
    }

    /// One optimizer step on the loss. Returns the loss before the step.
    pub fn train_step(&mut self, net: &mut Network, feed: &Feed) -> Result<f64> {
        bp_train_step(net, feed, self.loss, &mut self.opt)
    }
}

pub fn bp_train_step(net: &mut Network, feed: &Feed, loss: Loss, opt: &mut Optimizer) -> Result<f64> {
    let (value, grads) = bp_gradients(net, feed, loss)?;
    apply_gradients(net, &grads, opt)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_m2, build_vae, ModelSpec, Variant};
    use crate::pc::predict;

    #[test]
    fn elbo_examples() {
        let z = Tensor::zeros(&[1, 3]);
        let e = vae_elbo_loss(&z, &z, &Tensor::zeros(&[1, 2]), &Tensor::ones(&[1, 2])).unwrap();
        assert_eq!(e, 0.0);
        let kl = vae_elbo_loss(&z, &z, &Tensor::ones(&[1, 1]), &Tensor::ones(&[1, 1])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        assert!(vae_elbo_loss(&z, &z, &Tensor::ones(&[1, 1]), &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn zero_error_mse_has_zero_gradient() {
        let spec = ModelSpec::Classifier {
            variant: Variant::M1,
            input: 3,
            width: 4,
            hidden: 2,
            classes: 2,
            trainable_sigma: false,
        };
        let net = Network::new(spec, 2).unwrap();
        let x = Tensor::full(&[2, 3], 0.3);
        let y = predict(&net, &Feed::dense(x.clone(), None)).unwrap();
        let (l, grads) = bp_gradients(&net, &Feed::dense(x, Some(y)), Loss::Mse).unwrap();
        assert_eq!(l, 0.0);
        assert!(grads.iter().flatten().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn parameter_counts_match_pc() {
        let net = Network::new(build_m2(16, 3), 0).unwrap();
        let mut g = Graph::new();
        let x = Tensor::zeros(&[1, 784]);
        let (_, ps) = build_forward(&net, &mut g, &Feed::dense(x, None), true).unwrap();
        let n: usize = ps.iter().flatten().map(|&v| g.value(v).numel()).sum();
        assert_eq!(n, net.param_count());
    }

    #[test]
    fn vae_training_reduces_loss() {
        let mut net = Network::new(build_vae(1, 1, 16, 4).unwrap(), 1).unwrap();
        let x = Tensor::new(vec![2, 784], (0..1568).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let mut f = Feed::dense(x.clone(), Some(x));
        f.noise = Some(Tensor::zeros(&[2, 2]));
        let mut tr = BpTrainer::new(Loss::VaeElbo, OptimizerKind::Adam, 1e-3).unwrap();
        let first = tr.train_step(&mut net, &f).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = tr.train_step(&mut net, &f).unwrap();
        }
        assert!(last < first);
    }
}
