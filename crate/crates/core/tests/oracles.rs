//! Library results checked against independent reference computations.

mod common;

use common::*;
use gpc::autodiff::Graph;
use gpc::bp::{self, Loss};
use gpc::data::{self, one_hot};
use gpc::distributions::{self as dist, DistributionFamily, LayerEnergy};
use gpc::model::{build_causal_lm, build_vae, ModelSpec, Network, Variant};
use gpc::pc::{self, EnergyMode, Feed};
use gpc::Tensor;
use rand::Rng;

fn classifier(variant: Variant, input: usize, width: usize, hidden: usize, classes: usize) -> ModelSpec {
    ModelSpec::Classifier {
        variant,
        input,
        width,
        hidden,
        classes,
        trainable_sigma: false,
    }
}

#[test]
fn matmul_5x7_by_7x3() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[5, 7], -2.0, 2.0);
    let b = uniform(&mut r, &[7, 3], -2.0, 2.0);
    let c = a.matmul(&b).unwrap();
    for (x, y) in c.data().iter().zip(naive_matmul(a.data(), b.data(), 5, 7, 3)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_length_8_matches_direct_formula() {
    let mut r = rng(2);
    let v = uniform(&mut r, &[8], -5.0, 5.0);
    let s = v.softmax(0).unwrap();
    let denom: f64 = v.data().iter().map(|x| x.exp()).sum();
    for (p, x) in s.data().iter().zip(v.data()) {
        assert!((p - x.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn sum_tanh_linear_map_gradients() {
    let mut r = rng(3);
    let (n, k) = (4, 3);
    let w = uniform(&mut r, &[n, k], -2.0, 2.0);
    let x = uniform(&mut r, &[1, n], -2.0, 2.0);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.param(w.clone());
    let z = g.matmul(xv, wv).unwrap();
    let t = g.tanh(z).unwrap();
    let root = g.sum(t).unwrap();
    let grads = g.backward(root).unwrap();
    let f = |xs: &[f64], ws: &[f64]| -> f64 { naive_matmul(xs, ws, 1, n, k).iter().map(|v| v.tanh()).sum() };
    for i in 0..w.numel() {
        let fd = central(|ws| f(x.data(), ws), w.data(), i, 1e-5);
        assert!(rel(grads.get(wv).unwrap().data()[i], fd, 1e-8) < 1e-6);
    }
    for i in 0..x.numel() {
        let fd = central(|xs| f(xs, w.data()), x.data(), i, 1e-5);
        assert!(rel(grads.get(xv).unwrap().data()[i], fd, 1e-8) < 1e-6);
    }
}

#[test]
fn squared_error_is_twice_unit_variance_kl() {
    let mut r = rng(4);
    for _ in 0..200 {
        let phi = uniform(&mut r, &[2, 5], -3.0, 3.0);
        let mu = uniform(&mut r, &[2, 5], -3.0, 3.0);
        let kl: f64 = phi.data().iter().zip(mu.data()).map(|(&p, &m)| kl_closed_1d(p, 1.0, m, 1.0)).sum();
        let e = dist::energy_gaussian_identity(&phi, &mu).unwrap();
        assert!((e - 2.0 * kl).abs() < 1e-10 * e.max(1.0));
    }
}

#[test]
fn trainable_energy_is_kl_minus_variance_constant() {
    let mut r = rng(5);
    for _ in 0..200 {
        let phi = uniform(&mut r, &[3, 4], -2.0, 2.0);
        let mu = uniform(&mut r, &[3, 4], -2.0, 2.0);
        let var = uniform(&mut r, &[4], 0.2, 3.0);
        let mut expect = 0.0;
        for (row_p, row_m) in phi.data().chunks(4).zip(mu.data().chunks(4)) {
            for i in 0..4 {
                let v = var.data()[i];
                // KL(N(phi, 1) || N(mu, v)) carries (1/v - 1)/2 on top of the energy.
                expect += kl_closed_1d(row_p[i], 1.0, row_m[i], v) - 0.5 * (1.0 / v - 1.0);
            }
        }
        let e = dist::energy_gaussian_trainable(&phi, &mu, &var).unwrap();
        assert!((e - expect).abs() < 1e-10);
    }
    let q = kl_quadrature(0.3, 1.0, -0.4, 2.5);
    assert!((q - kl_closed_1d(0.3, 1.0, -0.4, 2.5)).abs() < 1e-8);
}

#[test]
fn categorical_energy_matches_monte_carlo() {
    let mut r = rng(6);
    let n = 1_000_000;
    for seed in 0..3 {
        let phi = simplex(&mut r, 1, 6);
        let mu = simplex(&mut r, 1, 6);
        let fam = DistributionFamily::Categorical;
        let kl = dist::energy_categorical(&phi, &mu).unwrap();
        assert!(kl >= 0.0);
        let mc = dist::mc_cross_entropy(&fam, &phi, &mu, n, seed).unwrap() - dist::entropy(&fam, &phi).unwrap();
        let (p, m) = (phi.data(), mu.data());
        let mean: f64 = p.iter().zip(m).map(|(a, b)| a * b.ln()).sum();
        let second: f64 = p.iter().zip(m).map(|(a, b)| a * b.ln() * b.ln()).sum();
        let se = ((second - mean * mean) / n as f64).sqrt();
        assert!((mc - kl).abs() < 3.0 * se, "mc {mc} kl {kl} se {se}");
    }
}

#[test]
fn full_gaussian_unit_vs_e_variance() {
    let e = std::f64::consts::E;
    let phi = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let mu = Tensor::new(vec![1, 2], vec![0.0, e]).unwrap();
    let got = dist::energy_full_gaussian(&phi, &mu).unwrap();
    assert!((got - 0.5 / e).abs() < 1e-12);
    assert!((kl_quadrature(0.0, 1.0, 0.0, e) - 0.5 / e).abs() < 1e-6);
}

#[test]
fn full_gaussian_matches_quadrature() {
    let mut r = rng(7);
    for _ in 0..20 {
        let h = 3;
        let mut p = Vec::new();
        let mut m = Vec::new();
        for v in [&mut p, &mut m] {
            v.extend((0..h).map(|_| r.gen_range(-2.0..2.0)));
            v.extend((0..h).map(|_| r.gen_range(0.3..3.0)));
        }
        let q: f64 = (0..h).map(|i| kl_quadrature(p[i], p[h + i], m[i], m[h + i])).sum();
        let phi = Tensor::new(vec![1, 2 * h], p).unwrap();
        let mu = Tensor::new(vec![1, 2 * h], m).unwrap();
        assert!((dist::energy_full_gaussian(&phi, &mu).unwrap() - q).abs() < 1e-6);
    }
}

#[test]
fn gaussian_cross_entropy_monte_carlo() {
    let n = 1_000_000;
    let phi = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
    let mu = Tensor::new(vec![1, 2], vec![-0.25, 0.5]).unwrap();
    let fam = DistributionFamily::GaussianIdentity;
    let mc = dist::mc_cross_entropy(&fam, &phi, &mu, n, 3).unwrap();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut h = 0.0;
    let mut var = 0.0;
    for (p, m) in phi.data().iter().zip(mu.data()) {
        let eps = p - m;
        h += 0.5 * eps * eps + 0.5 + 0.5 * ln2pi;
        // Var[(eps + z)^2 / 2] for z ~ N(0, 1).
        var += eps * eps + 0.5;
    }
    let se = (var / n as f64).sqrt();
    assert!((mc - h).abs() < 3.0 * se, "mc {mc} closed form {h} se {se}");
}

#[test]
fn forward_init_equals_loop_forward_and_bp_forward() {
    let mut r = rng(8);
    for variant in [Variant::M1, Variant::M2, Variant::M3] {
        let net = Network::new(classifier(variant, 12, 7, 3, 4), r.gen()).unwrap();
        let x = uniform(&mut r, &[5, 12], 0.0, 1.0);
        let feed = Feed::dense(x.clone(), None);
        let state = pc::forward_init(&net, &feed).unwrap();
        let oracle = dense_forward(&net, &x);
        let mut g = Graph::new();
        let (vals, _) = bp::build_forward(&net, &mut g, &feed, false).unwrap();
        for l in 0..net.layers.len() {
            for ((a, b), c) in state.phi[l].data().iter().zip(&oracle[l]).zip(g.value(vals[l]).data()) {
                assert!((a - b).abs() < 1e-12);
                assert!((a - c).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn one_unit_chain_inference_by_hand() {
    let spec = classifier(Variant::M1, 1, 1, 1, 1);
    let (w1, b1, w2, b2) = (0.7, -0.2, 1.3, 0.1);
    let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
    let params = vec![
        vec![],
        vec![t(w1), Tensor::vector(vec![b1]).unwrap()],
        vec![t(w2), Tensor::vector(vec![b2]).unwrap()],
    ];
    let net = Network::from_params(spec, params).unwrap();
    let (d, o, beta) = (0.4, -0.5, 0.5);
    let mut state = pc::forward_init(&net, &Feed::dense(t(d), None)).unwrap();
    state.release_input();
    state.clamp_output(&t(o)).unwrap();

    let mu1 = (w1 * d + b1).tanh();
    let mu2 = (w2 * mu1 + b2).tanh();
    // Step 1: only the output error is non-zero, so only phi_1 moves.
    let phi1 = mu1 + beta * 2.0 * (o - mu2) * (1.0 - mu2 * mu2) * w2;
    pc::infer_step(&net, &mut state, EnergyMode::F, beta).unwrap();
    assert_eq!(state.phi[0].item(), d);
    assert!((state.phi[1].item() - phi1).abs() < 1e-14);
    // Step 2: phi_0 follows -beta d(phi_1 - f(phi_0))^2 / d phi_0.
    let expect0 = d - beta * (-2.0 * (phi1 - mu1) * (1.0 - mu1 * mu1) * w1);
    pc::infer_step(&net, &mut state, EnergyMode::F, beta).unwrap();
    assert!((state.phi[0].item() - expect0).abs() < 1e-14);
    assert_eq!(state.phi[2].item(), o);
}

#[test]
fn inference_mostly_descends() {
    let mut r = rng(9);
    let net = Network::new(classifier(Variant::M1, 784, 16, 3, 10), 1).unwrap();
    let x = uniform(&mut r, &[8, 784], 0.0, 1.0);
    let target = one_hot(&[0, 1, 2, 3, 4, 5, 6, 7], 10).unwrap();
    let mut state = pc::forward_init(&net, &Feed::dense(x, None)).unwrap();
    state.clamp_output(&target).unwrap();
    let mut totals = Vec::new();
    for _ in 0..32 {
        totals.push(pc::infer_step(&net, &mut state, EnergyMode::F, 0.05).unwrap().total);
    }
    totals.push(pc::energies(&net, &state, EnergyMode::F).unwrap().total);
    let ok = totals.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(ok as f64 >= 0.95 * (totals.len() - 1) as f64, "{ok} of {}", totals.len() - 1);
}

#[test]
fn linear_layer_weight_gradient_by_hand() {
    let mut r = rng(10);
    let (b, n, k) = (3, 4, 2);
    let phi0 = uniform(&mut r, &[b, n], -1.0, 1.0);
    let phi1 = uniform(&mut r, &[b, k], -1.0, 1.0);
    let w = uniform(&mut r, &[n, k], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.constant(phi0.clone());
    let wv = g.param(w.clone());
    let mu = g.matmul(x, wv).unwrap();
    let p = g.constant(phi1.clone());
    let e = LayerEnergy::Quadratic.build(&mut g, p, mu, None, None).unwrap();
    let grads = g.backward(e).unwrap();
    let muv = naive_matmul(phi0.data(), w.data(), b, n, k);
    let eps: Vec<f64> = phi1.data().iter().zip(&muv).map(|(a, m)| a - m).collect();
    for i in 0..n {
        for j in 0..k {
            let hand: f64 = (0..b).map(|row| -2.0 * eps[row * k + j] * phi0.data()[row * n + i]).sum();
            assert!((grads.get(wv).unwrap().data()[i * k + j] - hand).abs() < 1e-10);
        }
    }
}

#[test]
fn categorical_weight_gradient_softmax_jacobian_form() {
    let mut r = rng(11);
    let net = Network::new(classifier(Variant::M2, 9, 6, 2, 5), 4).unwrap();
    let x = uniform(&mut r, &[4, 9], 0.0, 1.0);
    let target = one_hot(&[0, 2, 4, 1], 5).unwrap();
    let mut state = pc::forward_init(&net, &Feed::dense(x, None)).unwrap();
    state.clamp_output(&target).unwrap();
    for _ in 0..3 {
        pc::infer_step(&net, &mut state, EnergyMode::FKl, 0.05).unwrap();
    }
    state.phi[3] = simplex(&mut r, 4, 5);
    let (grads, _) = pc::theta_gradients(&net, &state, EnergyMode::FKl).unwrap();
    let inp = state.phi[2].data();
    let w = &net.params[3][0];
    let mu = dense(inp, 4, w, &net.params[3][1], gpc::model::Activation::Softmax);
    let (n, k) = (6, 5);
    let mut dw = vec![0.0; n * k];
    for row in 0..4 {
        let phi = &state.phi[3].data()[row * k..(row + 1) * k];
        let m = &mu[row * k..(row + 1) * k];
        // dE/dz_c = sum_j (-phi_j / mu_j) * J_jc, J_jc = mu_j (delta_jc - mu_c).
        let dz: Vec<f64> = (0..k)
            .map(|c| {
                (0..k)
                    .map(|j| {
                        let jac = if j == c { m[j] * (1.0 - m[j]) } else { -m[j] * m[c] };
                        -phi[j] / m[j] * jac
                    })
                    .sum()
            })
            .collect();
        for i in 0..n {
            for c in 0..k {
                dw[i * k + c] += inp[row * n + i] * dz[c] / 4.0;
            }
        }
    }
    for (a, b) in grads[3][0].data().iter().zip(&dw) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn one_step_inference_aligns_with_backprop() {
    let mut r = rng(12);
    for _ in 0..100 {
        let net = Network::new(classifier(Variant::M1, 6, 5, 2, 3), r.gen()).unwrap();
        let x = uniform(&mut r, &[4, 6], -1.0, 1.0);
        let o = uniform(&mut r, &[4, 3], -0.9, 0.9);
        let feed = Feed::dense(x, Some(o.clone()));
        let mut state = pc::forward_init(&net, &feed).unwrap();
        state.clamp_output(&o).unwrap();
        pc::infer_step(&net, &mut state, EnergyMode::F, 0.5).unwrap();
        let (pcg, _) = pc::theta_gradients(&net, &state, EnergyMode::F).unwrap();
        let (_, bpg) = bp::bp_gradients(&net, &feed, Loss::Mse).unwrap();
        let dot: f64 = pcg.iter().flatten().zip(bpg.iter().flatten()).map(|(a, b)| a.dot(b).unwrap()).sum();
        assert!(dot > 0.0);
    }
}

#[test]
fn predict_equals_bp_forward_on_every_architecture() {
    let mut r = rng(13);
    let mut nets = vec![
        (Network::new(classifier(Variant::M2, 10, 6, 3, 4), 2).unwrap(), {
            let x = uniform(&mut r, &[3, 10], 0.0, 1.0);
            Feed::dense(x, None)
        }),
        (Network::new(build_vae(2, 2, 8, 4).unwrap(), 3).unwrap(), {
            let x = uniform(&mut r, &[3, 784], 0.0, 1.0);
            let mut f = Feed::dense(x, None);
            f.noise = Some(uniform(&mut r, &[3, 2], -1.0, 1.0));
            f
        }),
    ];
    let lm = Network::new(build_causal_lm(13, 6, 7).unwrap(), 5).unwrap();
    let batch = data::batch_lm(&[vec![4, 5, 6, 7], vec![8, 9]], 2, 7, 0).unwrap();
    nets.push((lm, batch[0].feed(13).unwrap()));
    for (net, feed) in nets {
        let p = pc::predict(&net, &feed).unwrap();
        let mut g = Graph::new();
        let (vals, _) = bp::build_forward(&net, &mut g, &feed, false).unwrap();
        let out = g.value(*vals.last().unwrap());
        for (a, b) in p.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn bp_mse_gradient_by_chain_rule() {
    let mut r = rng(14);
    let (b, n, h, k) = (3, 4, 3, 2);
    let net = Network::new(classifier(Variant::M1, n, h, 1, k), 6).unwrap();
    let x = uniform(&mut r, &[b, n], -1.0, 1.0);
    let y = uniform(&mut r, &[b, k], -0.5, 0.5);
    let (_, grads) = bp::bp_gradients(&net, &Feed::dense(x.clone(), Some(y.clone())), Loss::Mse).unwrap();
    let (w1, b1, w2, b2) = (&net.params[1][0], &net.params[1][1], &net.params[2][0], &net.params[2][1]);
    let a1 = dense(x.data(), b, w1, b1, gpc::model::Activation::Tanh);
    let a2 = dense(&a1, b, w2, b2, gpc::model::Activation::Tanh);
    let mut gw1 = vec![0.0; n * h];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; h * k];
    let mut gb2 = vec![0.0; k];
    for row in 0..b {
        let d2: Vec<f64> = (0..k)
            .map(|j| {
                let o = a2[row * k + j];
                2.0 * (o - y.data()[row * k + j]) * (1.0 - o * o) / b as f64
            })
            .collect();
        let d1: Vec<f64> = (0..h)
            .map(|i| {
                let a = a1[row * h + i];
                (0..k).map(|j| d2[j] * w2.data()[i * k + j]).sum::<f64>() * (1.0 - a * a)
            })
            .collect();
        for i in 0..h {
            for j in 0..k {
                gw2[i * k + j] += a1[row * h + i] * d2[j];
            }
        }
        for j in 0..k {
            gb2[j] += d2[j];
        }
        for p in 0..n {
            for i in 0..h {
                gw1[p * h + i] += x.data()[row * n + p] * d1[i];
            }
        }
        for i in 0..h {
            gb1[i] += d1[i];
        }
    }
    for (got, want) in [(&grads[1][0], gw1), (&grads[1][1], gb1), (&grads[2][0], gw2), (&grads[2][1], gb2)] {
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn cross_entropy_logit_gradient_is_softmax_minus_one_hot() {
    let mut r = rng(15);
    let net = Network::new(classifier(Variant::M2, 5, 4, 1, 6), 7).unwrap();
    let x = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let labels = [0, 5, 2, 2];
    let o = one_hot(&labels, 6).unwrap();
    let (_, grads) = bp::bp_gradients(&net, &Feed::dense(x.clone(), Some(o.clone())), Loss::CrossEntropy).unwrap();
    let a1 = dense(x.data(), 4, &net.params[1][0], &net.params[1][1], gpc::model::Activation::Tanh);
    let mu = dense(&a1, 4, &net.params[2][0], &net.params[2][1], gpc::model::Activation::Softmax);
    // The bias gradient is the batch mean of the logit gradient.
    for c in 0..6 {
        let want: f64 = (0..4).map(|row| (mu[row * 6 + c] - o.data()[row * 6 + c]) / 4.0).sum();
        assert!((grads[2][1].data()[c] - want).abs() < 1e-10);
    }
}

#[test]
fn vae_prior_kl_matches_quadrature() {
    let mut r = rng(16);
    for _ in 0..10 {
        let u = uniform(&mut r, &[1, 4], -2.0, 2.0);
        let v = uniform(&mut r, &[1, 4], 0.2, 3.0);
        let z = Tensor::zeros(&[1, 3]);
        let loss = bp::vae_elbo_loss(&z, &z, &u, &v).unwrap();
        let q: f64 = u.data().iter().zip(v.data()).map(|(&m, &s)| kl_quadrature(m, s, 0.0, 1.0)).sum();
        assert!((loss - q).abs() < 1e-6);
    }
}

#[test]
fn untrained_classifier_is_at_chance() {
    let test = data::load_mnist_dir(&repo_root().join("data/mnist"), "t10k").unwrap();
    let idx: Vec<usize> = (0..test.len()).collect();
    let batch = test.batch(&idx, 10).unwrap();
    let mut accs = Vec::new();
    for seed in 0..10 {
        let net = Network::new(classifier(Variant::M2, 784, 64, 3, 10), seed).unwrap();
        let p = pc::predict(&net, &batch.feed()).unwrap();
        let hits = p.argmax_rows().iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
        accs.push(hits as f64 / test.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.02, "mean accuracy {mean}, per seed {accs:?}");
}

#[test]
fn gaussian_sample_moments() {
    let params = Tensor::new(vec![100_000, 2], [3.0, 4.0].repeat(100_000)).unwrap();
    let s = dist::sample(&DistributionFamily::FullGaussian, &params, 17).unwrap();
    let n = s.numel() as f64;
    let mean = s.data().iter().sum::<f64>() / n;
    let var = s.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    assert!((mean - 3.0).abs() < 0.05, "mean {mean}");
    assert!((var - 4.0).abs() < 0.15, "variance {var}");
}
