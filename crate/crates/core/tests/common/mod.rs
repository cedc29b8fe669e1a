//! Reference implementations used as oracles. They work on plain slices and
//! share no arithmetic with the library beyond reading its parameters.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use gpc::model::{Activation, LayerOp, Network};
use gpc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn simplex(rng: &mut impl Rng, rows: usize, w: usize) -> Tensor {
    let mut v = Vec::new();
    for _ in 0..rows {
        let r: Vec<f64> = (0..w).map(|_| rng.gen_range(0.02..1.0)).collect();
        let s: f64 = r.iter().sum();
        v.extend(r.iter().map(|x| x / s));
    }
    Tensor::new(vec![rows, w], v).unwrap()
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + var.ln() + (2.0 * PI).ln())
}

/// `KL(N(u, s) || N(uh, sh))` by composite Simpson integration of
/// `p ln(p / q)` over twenty standard deviations around `u`.
pub fn kl_quadrature(u: f64, s: f64, uh: f64, sh: f64) -> f64 {
    let sd = s.sqrt();
    let (a, b) = (u - 20.0 * sd, u + 20.0 * sd);
    let n = 40_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lp = log_normal_pdf(x, u, s);
        lp.exp() * (lp - log_normal_pdf(x, uh, sh))
    };
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// `KL(N(u, s) || N(uh, sh))` written out for one coordinate.
pub fn kl_closed_1d(u: f64, s: f64, uh: f64, sh: f64) -> f64 {
    0.5 * ((s + (u - uh) * (u - uh)) / sh + (sh / s).ln() - 1.0)
}

pub fn act(a: Activation, z: &mut [f64]) {
    match a {
        Activation::Identity => {}
        Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::HardTanh => z.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            z.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
        }
    }
}

/// `act(x W + b)` row by row.
pub fn dense(x: &[f64], rows: usize, w: &Tensor, b: &Tensor, a: Activation) -> Vec<f64> {
    let (n, k) = (w.shape()[0], w.shape()[1]);
    let mut out = naive_matmul(x, w.data(), rows, n, k);
    for r in 0..rows {
        let row = &mut out[r * k..(r + 1) * k];
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
        act(a, row);
    }
    out
}

/// Layer activations of a dense feed-forward network computed with plain
/// loops.
pub fn dense_forward(net: &Network, x: &Tensor) -> Vec<Vec<f64>> {
    let rows = x.rows();
    let mut vals = vec![x.data().to_vec()];
    for l in 1..net.layers.len() {
        let LayerOp::Dense { act: a } = net.layers[l].op else {
            panic!("dense_forward only handles dense layers");
        };
        let p = &net.params[l];
        let prev = &vals[net.layers[l].parents[0]];
        vals.push(dense(prev, rows, &p[0], &p[1], a));
    }
    vals
}
