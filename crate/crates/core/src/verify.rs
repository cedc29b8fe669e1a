//! Numerical self-checks: finite-difference gradients, energy identities,
//! closed-form oracles and gradient locality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{self, one_hot};
use crate::distributions::{self as dist, DistributionFamily, LayerEnergy};
use crate::error::{Error, Result};
use crate::model::{build_causal_lm, build_vae, ModelSpec, Network, Variant};
use crate::pc::{self, EnergyMode, Feed, PcState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Equivalence,
    Oracles,
    Locality,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradients, Suite::Equivalence, Suite::Oracles, Suite::Locality];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Equivalence => "equivalence",
            Suite::Oracles => "oracles",
            Suite::Locality => "locality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        Self {
            suite: suite.name(),
            name: name.into(),
            tolerance,
            observed,
            passed: observed <= tolerance,
        }
    }
}

/// Runs one suite; `seed` selects the random instances.
pub fn run(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Gradients => gradients(seed),
        Suite::Equivalence => equivalence(seed),
        Suite::Oracles => oracles(seed),
        Suite::Locality => locality(seed),
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn simplex_rows(rng: &mut impl Rng, rows: usize, w: usize) -> Tensor {
    let mut v = Vec::with_capacity(rows * w);
    for _ in 0..rows {
        let r: Vec<f64> = (0..w).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = r.iter().sum();
        v.extend(r.iter().map(|x| x / s));
    }
    Tensor::new(vec![rows, w], v).expect("shape matches")
}

fn gaussian_halves(rng: &mut impl Rng, rows: usize, h: usize) -> Tensor {
    let mut v = Vec::with_capacity(rows * 2 * h);
    for _ in 0..rows {
        v.extend((0..h).map(|_| rng.sample::<f64, _>(StandardNormal)));
        v.extend((0..h).map(|_| rng.gen_range(0.3..2.0)));
    }
    Tensor::new(vec![rows, 2 * h], v).expect("shape matches")
}

fn energy_value(kind: LayerEnergy, phi: &Tensor, mu: &Tensor, var: Option<&Tensor>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(phi.clone());
    let m = g.constant(mu.clone());
    let v = var.map(|t| g.constant(t.clone()));
    let e = kind.build(&mut g, p, m, v, None)?;
    Ok(g.value(e).item())
}

/// Autodiff gradients of a layer energy with respect to `phi`, `mu` and
/// the variances.
fn energy_grads(kind: LayerEnergy, phi: &Tensor, mu: &Tensor, var: Option<&Tensor>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = g.param(phi.clone());
    let m = g.param(mu.clone());
    let v = var.map(|t| g.param(t.clone()));
    let e = kind.build(&mut g, p, m, v, None)?;
    let grads = g.backward(e)?;
    let mut out = vec![grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(phi.shape()))];
    out.push(grads.get(m).cloned().unwrap_or_else(|| Tensor::zeros(mu.shape())));
    if let (Some(v), Some(t)) = (v, var) {
        out.push(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    Ok(out)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &Tensor, i: usize, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<f64> {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
/// Denominator floor for relative errors, so that gradients near zero are
/// compared on an absolute scale.
const FD_FLOOR: f64 = 1e-3;

fn gradients(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(11));
    let mut checks = Vec::new();
    let kinds = [
        LayerEnergy::Quadratic,
        LayerEnergy::GaussianKl,
        LayerEnergy::TrainableSigma,
        LayerEnergy::Categorical,
        LayerEnergy::FullGaussian,
    ];
    for kind in kinds {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (rows, w) = (rng.gen_range(1..4), 2 * rng.gen_range(1..4));
            let (phi, mu) = match kind {
                LayerEnergy::Categorical => (simplex_rows(&mut rng, rows, w), simplex_rows(&mut rng, rows, w)),
                LayerEnergy::FullGaussian => (gaussian_halves(&mut rng, rows, w / 2), gaussian_halves(&mut rng, rows, w / 2)),
                _ => (normal(&mut rng, &[rows, w], 1.0), normal(&mut rng, &[rows, w], 1.0)),
            };
            let var = (kind == LayerEnergy::TrainableSigma)
                .then(|| Tensor::new(vec![w], (0..w).map(|_| rng.gen_range(0.3..2.0)).collect()).expect("shape"));
            let grads = energy_grads(kind, &phi, &mu, var.as_ref())?;
            for i in 0..phi.numel() {
                let fd = central_diff(&phi, i, FD_STEP, |p| energy_value(kind, p, &mu, var.as_ref()))?;
                worst = worst.max(rel_err(grads[0].data()[i], fd, FD_FLOOR));
                let fd = central_diff(&mu, i, FD_STEP, |m| energy_value(kind, &phi, m, var.as_ref()))?;
                worst = worst.max(rel_err(grads[1].data()[i], fd, FD_FLOOR));
            }
            if let Some(v) = &var {
                for i in 0..v.numel() {
                    let fd = central_diff(v, i, FD_STEP, |v| energy_value(kind, &phi, &mu, Some(v)))?;
                    worst = worst.max(rel_err(grads[2].data()[i], fd, FD_FLOOR));
                }
            }
        }
        checks.push(Check::new(Suite::Gradients, format!("{kind:?} energy vs finite differences"), FD_TOL, worst));
    }
    for (name, net, feed, modes) in small_networks(&mut rng)? {
        for mode in modes {
            let state = settled_state(&net, &feed, mode)?;
            let (phi_err, theta_err) = network_fd(&net, &state, mode, &mut rng)?;
            checks.push(Check::new(Suite::Gradients, format!("{name} {} dF/dphi", mode.name()), FD_TOL, phi_err));
            checks.push(Check::new(Suite::Gradients, format!("{name} {} dF/dtheta", mode.name()), FD_TOL, theta_err));
        }
    }
    Ok(checks)
}

/// Largest relative error between engine gradients and central differences
/// of the total energy, over a random sample of coordinates.
fn network_fd(net: &Network, state: &PcState, mode: EnergyMode, rng: &mut impl Rng) -> Result<(f64, f64)> {
    const SAMPLES: usize = 12;
    let mut st = state.clone();
    let (phi_grads, _) = pc::phi_gradients(net, &mut st, mode)?;
    let (theta_grads, _) = pc::theta_gradients(net, state, mode)?;
    let mut phi_err: f64 = 0.0;
    for (l, g) in phi_grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for _ in 0..SAMPLES {
            let i = rng.gen_range(0..g.numel());
            if state.phi[l].data()[i] == 0.0 && net.layers[l].family == dist::FamilyKind::Categorical {
                continue;
            }
            let fd = central_diff(&state.phi[l], i, FD_STEP, |p| {
                let mut s = state.clone();
                s.phi[l] = p.clone();
                s.invalidate_predictions();
                Ok(pc::energies(net, &s, mode)?.total)
            })?;
            phi_err = phi_err.max(rel_err(g.data()[i], fd, FD_FLOOR));
        }
    }
    let mut theta_err: f64 = 0.0;
    let scale = state.batch as f64;
    for (l, gs) in theta_grads.iter().enumerate() {
        for (k, g) in gs.iter().enumerate() {
            for _ in 0..SAMPLES {
                let i = rng.gen_range(0..g.numel());
                let fd = central_diff(&net.params[l][k], i, FD_STEP, |p| {
                    let mut n = net.clone();
                    n.params[l][k] = p.clone();
                    let mut s = state.clone();
                    s.invalidate_predictions();
                    Ok(pc::energies(&n, &s, mode)?.total)
                })?;
                theta_err = theta_err.max(rel_err(g.data()[i] * scale, fd, FD_FLOOR));
            }
        }
    }
    Ok((phi_err, theta_err))
}

type Case = (String, Network, Feed, Vec<EnergyMode>);

/// Small instances of every architecture with the energy modes each supports.
fn small_networks(rng: &mut impl Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let batch = 3;
    let image = || {
        let v = (0..batch * 784).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        Tensor::new(vec![batch, 784], v).expect("shape")
    };
    for variant in [Variant::M1, Variant::M2, Variant::M3] {
        for sigma in [false, true] {
            let spec = ModelSpec::Classifier {
                variant,
                input: 784,
                width: 6,
                hidden: 3,
                classes: 10,
                trainable_sigma: sigma,
            };
            let net = Network::new(spec, rng.gen())?;
            let target = one_hot(&[1, 4, 7], 10)?;
            let feed = Feed::dense(image(), Some(target));
            let modes = if sigma {
                vec![EnergyMode::FTilde]
            } else {
                vec![EnergyMode::F, EnergyMode::FKl]
            };
            let name = format!("{variant:?}{}", if sigma { "+sigma" } else { "" });
            out.push((name, net, feed, modes));
        }
    }
    let net = Network::new(build_vae(1, 1, 8, 4)?, rng.gen())?;
    let mut feed = Feed::dense(image(), Some(image()));
    feed.noise = Some(normal(rng, &[batch, 2], 1.0));
    out.push(("vae".into(), net, feed, vec![EnergyMode::F, EnergyMode::FKl]));

    let vocab = 11;
    let net = Network::new(build_causal_lm(vocab, 6, 6)?, rng.gen())?;
    let sentences = vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 4, 5]];
    let batches = data::batch_lm(&sentences, 3, 6, 0)?;
    let feed = batches[0].feed(vocab)?;
    out.push(("lm".into(), net, feed, vec![EnergyMode::F, EnergyMode::FKl]));
    Ok(out)
}

/// Output clamped and a few inference steps taken, so every layer carries a
/// non-zero error.
fn settled_state(net: &Network, feed: &Feed, mode: EnergyMode) -> Result<PcState> {
    let mut state = pc::forward_init(net, feed)?;
    if let Some(t) = &feed.target {
        state.clamp_output(t)?;
    }
    for _ in 0..3 {
        pc::infer_step(net, &mut state, mode, 0.05)?;
    }
    Ok(state)
}

fn equivalence(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(12));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (rows, h) = (rng.gen_range(1..5), rng.gen_range(1..9));
        let u = normal(&mut rng, &[rows, h], 2.0);
        let uh = normal(&mut rng, &[rows, h], 2.0);
        let with_unit = |t: &Tensor| {
            let mut v = Vec::with_capacity(rows * 2 * h);
            for r in 0..rows {
                v.extend_from_slice(t.row(r));
                v.extend(std::iter::repeat_n(1.0, h));
            }
            Tensor::new(vec![rows, 2 * h], v).expect("shape")
        };
        let full = dist::energy_full_gaussian(&with_unit(&u), &with_unit(&uh))?;
        let ident = dist::energy_gaussian_identity(&u, &uh)?;
        worst = worst.max((2.0 * full - ident).abs() / ident.max(1.0));
    }
    let mut checks = vec![Check::new(
        Suite::Equivalence,
        "2 KL(unit-variance Gaussians) = squared error, 1000 layers",
        1e-10,
        worst,
    )];

    let spec = ModelSpec::Classifier {
        variant: Variant::M1,
        input: 784,
        width: 8,
        hidden: 3,
        classes: 10,
        trainable_sigma: false,
    };
    let net = Network::new(spec, 5)?;
    let x = normal(&mut rng, &[4, 784], 1.0);
    let feed = Feed::dense(x, Some(one_hot(&[0, 3, 5, 9], 10)?));
    let state = settled_state(&net, &feed, EnergyMode::F)?;
    let (gf, ef) = pc::theta_gradients(&net, &state, EnergyMode::F)?;
    let (gk, ek) = pc::theta_gradients(&net, &state, EnergyMode::FKl)?;
    let mut worst: f64 = 0.0;
    for (a, b) in gf.iter().flatten().zip(gk.iter().flatten()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - 2.0 * y).abs());
        }
    }
    checks.push(Check::new(Suite::Equivalence, "network dF/dtheta = 2 dF_KL/dtheta (entry-wise)", 1e-9, worst));
    checks.push(Check::new(
        Suite::Equivalence,
        "network F = 2 F_KL",
        1e-10,
        (ef.total - 2.0 * ek.total).abs() / ef.total.max(1.0),
    ));
    Ok(checks)
}

fn oracles(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(13));
    let mut checks = Vec::new();

    // Softmax output with categorical energy: dE/dW = x^T (mu - phi).
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (b, n, k) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(2..7));
        let x = normal(&mut rng, &[b, n], 1.0);
        let w = normal(&mut rng, &[n, k], 1.0);
        let bias = normal(&mut rng, &[k], 1.0);
        let phi = simplex_rows(&mut rng, b, k);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(bias.clone());
        let z = g.matmul(xv, wv)?;
        let z = g.add_row(z, bv)?;
        let mu = g.softmax(z, 1)?;
        let p = g.constant(phi.clone());
        let e = LayerEnergy::Categorical.build(&mut g, p, mu, None, None)?;
        let mu_val = g.value(mu).clone();
        let grads = g.backward(e)?;
        let delta = mu_val.sub(&phi)?;
        let gw = x.matmul_t(&delta, true, false)?;
        for (a, c) in grads.get(wv).expect("param").data().iter().zip(gw.data()) {
            worst = worst.max((a - c).abs());
        }
        let gb: Vec<f64> = (0..k).map(|j| (0..b).map(|r| delta.row(r)[j]).sum()).collect();
        for (a, c) in grads.get(bv).expect("param").data().iter().zip(&gb) {
            worst = worst.max((a - c).abs());
        }
    }
    checks.push(Check::new(Suite::Oracles, "categorical theta-gradient = x^T (mu - phi)", 1e-8, worst));

    // Diagonal Gaussian KL: dE/du = (u - uh) / sh, dE/ds = (1/sh - 1/s) / 2,
    // dE/duh = -(u - uh) / sh, dE/dsh = (1/sh - (s + (u - uh)^2) / sh^2) / 2.
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (rows, h) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let phi = gaussian_halves(&mut rng, rows, h);
        let mu = gaussian_halves(&mut rng, rows, h);
        let grads = energy_grads(LayerEnergy::FullGaussian, &phi, &mu, None)?;
        for r in 0..rows {
            let (p, m) = (phi.row(r), mu.row(r));
            for i in 0..h {
                let (u, s, uh, sh) = (p[i], p[h + i], m[i], m[h + i]);
                let d = u - uh;
                let expect = [d / sh, 0.5 * (1.0 / sh - 1.0 / s), -d / sh, 0.5 * (1.0 / sh - (s + d * d) / (sh * sh))];
                let got = [
                    grads[0].row(r)[i],
                    grads[0].row(r)[h + i],
                    grads[1].row(r)[i],
                    grads[1].row(r)[h + i],
                ];
                for (a, c) in got.iter().zip(&expect) {
                    worst = worst.max((a - c).abs());
                }
            }
        }
    }
    checks.push(Check::new(Suite::Oracles, "full-Gaussian (u, var) gradients, closed form", 1e-8, worst));

    // Monte-Carlo cross-entropy minus entropy against the closed-form KL.
    let n = 200_000;
    let phi = simplex_rows(&mut rng, 1, 5);
    let mu = simplex_rows(&mut rng, 1, 5);
    let fam = DistributionFamily::Categorical;
    let mc = dist::mc_cross_entropy(&fam, &phi, &mu, n, 1)? - dist::entropy(&fam, &phi)?;
    let kl = dist::kl_divergence(&fam, &phi, &mu)?;
    checks.push(Check::new(Suite::Oracles, format!("categorical MC KL, N={n}"), 0.02, (mc - kl).abs()));
    let phi = gaussian_halves(&mut rng, 1, 3);
    let mu = gaussian_halves(&mut rng, 1, 3);
    let fam = DistributionFamily::FullGaussian;
    let mc = dist::mc_cross_entropy(&fam, &phi, &mu, n, 2)? - dist::entropy(&fam, &phi)?;
    let kl = dist::kl_divergence(&fam, &phi, &mu)?;
    checks.push(Check::new(Suite::Oracles, format!("Gaussian MC KL, N={n}"), 0.05, (mc - kl).abs()));
    Ok(checks)
}

/// Gradients of a single graph holding the chosen layer energies over every
/// value and weight, with `dtheta` averaged over the batch like the engine.
pub struct GlobalGrads {
    pub energy: f64,
    pub phi: Vec<Option<Tensor>>,
    pub theta: Vec<Vec<Tensor>>,
}

pub fn global_gradients(net: &Network, state: &PcState, mode: EnergyMode, include: &dyn Fn(usize) -> bool) -> Result<GlobalGrads> {
    let mut g = Graph::new();
    let layers = net.layers.len();
    let phi: Vec<Var> = (0..layers)
        .map(|l| {
            let t = state.phi[l].clone();
            if state.is_clamped(l) {
                g.constant(t)
            } else {
                g.param(t)
            }
        })
        .collect();
    let params: Vec<Vec<Var>> = net.params.iter().map(|ps| ps.iter().map(|t| g.param(t.clone())).collect()).collect();
    let mut total: Option<Var> = None;
    for l in 0..layers {
        if (l == 0 && state.input_clamped) || !include(l) {
            continue;
        }
        let mu = if l == 0 {
            g.constant(state.mu[0].clone())
        } else {
            let inputs: Vec<Var> = net.layers[l].parents.iter().map(|&p| phi[p]).collect();
            net.build_mu(&mut g, l, &inputs, &params[l], &state.ctx())?
        };
        let kind = pc::layer_energy(net, mode, l)?;
        let var = net.layers[l].var_param().map(|i| params[l][i]);
        let weights = if l == 0 { None } else { state.row_mask.as_ref() };
        let e = kind.build(&mut g, phi[l], mu, var, weights)?;
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("no energies selected".into()))?;
    let energy = g.value(total).item();
    let grads = g.backward(total)?;
    let phi_grads = (0..layers)
        .map(|l| (!state.is_clamped(l)).then(|| grads.get(phi[l]).cloned().unwrap_or_else(|| Tensor::zeros(state.phi[l].shape()))))
        .collect();
    let scale = 1.0 / state.batch as f64;
    let theta = params
        .iter()
        .zip(&net.params)
        .map(|(vs, ts)| {
            vs.iter()
                .zip(ts)
                .map(|(&v, t)| grads.get(v).map_or_else(|| Tensor::zeros(t.shape()), |x| x.scale(scale)))
                .collect()
        })
        .collect();
    Ok(GlobalGrads {
        energy,
        phi: phi_grads,
        theta,
    })
}

fn max_scaled_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

const LOCALITY_TOL: f64 = 1e-12;

fn locality(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(14));
    let mut checks = Vec::new();
    for (name, net, feed, modes) in small_networks(&mut rng)? {
        for mode in modes {
            let state = settled_state(&net, &feed, mode)?;
            let mut st = state.clone();
            let (phi, _) = pc::phi_gradients(&net, &mut st, mode)?;
            let (theta, _) = pc::theta_gradients(&net, &state, mode)?;
            let full = global_gradients(&net, &state, mode, &|_| true)?;
            let mut vs_global: f64 = 0.0;
            let mut phi_local: f64 = 0.0;
            let mut theta_local: f64 = 0.0;
            for l in 0..net.layers.len() {
                if let (Some(a), Some(b)) = (&phi[l], &full.phi[l]) {
                    vs_global = vs_global.max(max_scaled_diff(a, b));
                    let children: Vec<usize> = (0..net.layers.len()).filter(|&c| net.layers[c].parents.contains(&l)).collect();
                    let only = global_gradients(&net, &state, mode, &|k| k == l || children.contains(&k))?;
                    phi_local = phi_local.max(max_scaled_diff(a, only.phi[l].as_ref().expect("free layer")));
                }
                for (a, b) in theta[l].iter().zip(&full.theta[l]) {
                    vs_global = vs_global.max(max_scaled_diff(a, b));
                }
                if l > 0 {
                    let only = global_gradients(&net, &state, mode, &|k| k == l)?;
                    for (a, b) in theta[l].iter().zip(&only.theta[l]) {
                        theta_local = theta_local.max(max_scaled_diff(a, b));
                    }
                }
            }
            let tag = format!("{name} {}", mode.name());
            checks.push(Check::new(Suite::Locality, format!("{tag}: local gradients = global graph"), LOCALITY_TOL, vs_global));
            checks.push(Check::new(Suite::Locality, format!("{tag}: dF/dphi_l from E_l and its consumers only"), LOCALITY_TOL, phi_local));
            checks.push(Check::new(Suite::Locality, format!("{tag}: dF/dtheta_l from E_l only"), LOCALITY_TOL, theta_local));
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for s in Suite::ALL {
            for c in run(s, 0).unwrap() {
                assert!(c.passed, "{} / {}: {} > {}", c.suite, c.name, c.observed, c.tolerance);
            }
        }
    }
}
