//! Encoding, decoding, posterior sampling and latent interpolation for VAEs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::distributions::VAR_FLOOR;
use crate::error::{Error, Result};
use crate::model::{LayerCtx, Network};
use crate::tensor::Tensor;

fn bottleneck(net: &Network) -> Result<usize> {
    net.bottleneck()
        .ok_or_else(|| Error::Invalid(format!("model {} has no Gaussian bottleneck", net.spec.name())))
}

/// Bottleneck values `[n, latent]` (mean half, variance half) for images
/// `[n, features]`.
pub fn encode(net: &Network, images: &Tensor) -> Result<Tensor> {
    let b = bottleneck(net)?;
    let ctx = LayerCtx {
        batch: images.rows(),
        seq: 1,
        noise: None,
    };
    let values = net.forward(images, &ctx)?;
    Ok(values[b].clone())
}

/// Decodes latent codes `[n, latent / 2]` through the decoder.
pub fn decode(net: &Network, codes: &Tensor) -> Result<Tensor> {
    let b = bottleneck(net)?;
    let half = net.layers[b].width / 2;
    if codes.rank() != 2 || codes.last_dim() != half {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: codes.shape().to_vec(),
            rhs: vec![codes.rows(), half],
        });
    }
    let n = codes.rows();
    let mut z = Vec::with_capacity(n * 2 * half);
    for r in 0..n {
        z.extend_from_slice(codes.row(r));
        z.extend(std::iter::repeat_n(1.0, half));
    }
    let mut values: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    values[b] = Some(Tensor::new(vec![n, 2 * half], z)?);
    let ctx = LayerCtx {
        batch: n,
        seq: 1,
        noise: None,
    };
    for l in b + 1..net.layers.len() {
        let mut g = Graph::new();
        let mut inputs: Vec<Var> = Vec::new();
        for &p in &net.layers[l].parents {
            let v = values[p]
                .clone()
                .ok_or_else(|| Error::Invalid("decoder reads a layer before the bottleneck".into()))?;
            inputs.push(g.constant(v));
        }
        let params: Vec<Var> = net.params[l].iter().map(|t| g.constant(t.clone())).collect();
        let mu = net.build_mu(&mut g, l, &inputs, &params, &ctx)?;
        values[l] = Some(g.value(mu).clone());
    }
    Ok(values.pop().flatten().expect("decoder output"))
}

fn split(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let w = z.last_dim();
    let row = z.row(0);
    (row[..w / 2].to_vec(), row[w / 2..].to_vec())
}

/// Decodes from the posterior mean of each image.
pub fn reconstruct(net: &Network, images: &Tensor) -> Result<Tensor> {
    let z = encode(net, images)?;
    let half = z.last_dim() / 2;
    let mut u = Vec::with_capacity(z.rows() * half);
    for r in 0..z.rows() {
        u.extend_from_slice(&z.row(r)[..half]);
    }
    decode(net, &Tensor::new(vec![z.rows(), half], u)?)
}

/// Encodes one image and decodes `count` draws from its posterior.
pub fn sample_posterior(net: &Network, image: &[f64], count: usize, seed: u64) -> Result<Tensor> {
    let x = Tensor::new(vec![1, image.len()], image.to_vec())?;
    let (u, var) = split(&encode(net, &x)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = Vec::with_capacity(count * u.len());
    for _ in 0..count {
        for (m, v) in u.iter().zip(&var) {
            let e: f64 = StandardNormal.sample(&mut rng);
            codes.push(m + v.max(VAR_FLOOR).sqrt() * e);
        }
    }
    decode(net, &Tensor::new(vec![count, u.len()], codes)?)
}

/// Decodes `steps` evenly spaced points on the segment between the posterior
/// means of two images, endpoints included.
pub fn traverse(net: &Network, a: &[f64], b: &[f64], steps: usize) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::Invalid("traversal needs at least 2 steps".into()));
    }
    let x = Tensor::new(vec![2, a.len()], a.iter().chain(b).copied().collect())?;
    let z = encode(net, &x)?;
    let half = z.last_dim() / 2;
    let (ua, ub) = (&z.row(0)[..half], &z.row(1)[..half]);
    let mut codes = Vec::with_capacity(steps * half);
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        codes.extend(ua.iter().zip(ub).map(|(p, q)| (1.0 - t) * p + t * q));
    }
    decode(net, &Tensor::new(vec![steps, half], codes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_m2, build_vae};

    fn img(v: f64) -> Vec<f64> {
        (0..784).map(|i| ((i % 13) as f64 * v).fract()).collect()
    }

    #[test]
    fn traverse_endpoints_are_reconstructions() {
        let net = Network::new(build_vae(1, 1, 8, 4).unwrap(), 2).unwrap();
        let (a, b) = (img(0.3), img(0.7));
        let t = traverse(&net, &a, &b, 2).unwrap();
        let x = Tensor::new(vec![2, 784], a.iter().chain(&b).copied().collect()).unwrap();
        let r = reconstruct(&net, &x).unwrap();
        for (p, q) in t.data().iter().zip(r.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn self_traversal_is_constant() {
        let net = Network::new(build_vae(1, 1, 8, 4).unwrap(), 2).unwrap();
        let a = img(0.3);
        let t = traverse(&net, &a, &a, 5).unwrap();
        for r in 1..5 {
            for (p, q) in t.row(r).iter().zip(t.row(0)) {
                assert!((p - q).abs() < 0.05);
            }
        }
    }

    #[test]
    fn non_vae_rejected() {
        let net = Network::new(build_m2(4, 2), 0).unwrap();
        assert!(encode(&net, &Tensor::zeros(&[1, 784])).is_err());
    }
}
