//! Browser bindings for a few small interactive experiments.

use gpc::data::one_hot;
use gpc::distributions::{self as dist, DistributionFamily};
use gpc::model::{build_m2, Network};
use gpc::pc::{self, EnergyMode, Feed};
use gpc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: gpc::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn halves(u: f64, var: f64) -> Result<Tensor, gpc::Error> {
    Tensor::new(vec![1, 2], vec![u, var])
}

/// Energies between two 1-D Gaussians `N(u, var)` and `N(uh, varh)`:
/// `[squared error of the means, KL, Monte-Carlo KL with `samples` draws]`.
#[wasm_bindgen]
pub fn gaussian_energies(u: f64, var: f64, uh: f64, varh: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let phi = halves(u, var).map_err(js_err)?;
    let mu = halves(uh, varh).map_err(js_err)?;
    let fam = DistributionFamily::FullGaussian;
    let kl = dist::energy_full_gaussian(&phi, &mu).map_err(js_err)?;
    let mc = dist::mc_cross_entropy(&fam, &phi, &mu, samples.max(1), seed).map_err(js_err)?
        - dist::entropy(&fam, &phi).map_err(js_err)?;
    Ok(vec![(u - uh) * (u - uh), kl, mc])
}

/// Total energy after each of `steps` value updates on a small random
/// classifier with its output clamped to a one-hot label. Returns the F
/// curve followed by the KL curve, each `steps + 1` long.
#[wasm_bindgen]
pub fn inference_curves(beta_phi: f64, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if !(beta_phi > 0.0 && beta_phi.is_finite()) {
        return Err(JsError::new("step size must be positive"));
    }
    let net = Network::new(build_m2(32, 3), seed).map_err(js_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::new(vec![4, 784], (0..4 * 784).map(|_| rng.gen_range(0.0..1.0)).collect()).map_err(js_err)?;
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..10)).collect();
    let target = one_hot(&labels, 10).map_err(js_err)?;
    let mut out = Vec::with_capacity(2 * (steps + 1));
    for mode in [EnergyMode::F, EnergyMode::FKl] {
        let mut state = pc::forward_init(&net, &Feed::dense(x.clone(), None)).map_err(js_err)?;
        state.clamp_output(&target).map_err(js_err)?;
        for _ in 0..steps {
            match pc::infer_step(&net, &mut state, mode, beta_phi) {
                Ok(rep) => out.push(rep.total),
                Err(_) => out.push(f64::NAN),
            }
        }
        out.push(pc::energies(&net, &state, mode).map_or(f64::NAN, |r| r.total));
    }
    Ok(out)
}

/// Median absolute error of the sampled categorical KL over `seeds` runs,
/// for N = 10, 100, ..., 10^`max_pow`.
#[wasm_bindgen]
pub fn mc_convergence(classes: usize, max_pow: u32, seeds: u64, seed: u64) -> Result<Vec<f64>, JsError> {
    if classes < 2 || max_pow == 0 || max_pow > 6 || seeds == 0 {
        return Err(JsError::new("need classes >= 2, 1 <= max_pow <= 6 and seeds >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut simplex = || {
        let v: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        Tensor::new(vec![1, classes], v.iter().map(|x| x / s).collect())
    };
    let phi = simplex().map_err(js_err)?;
    let mu = simplex().map_err(js_err)?;
    let fam = DistributionFamily::Categorical;
    let kl = dist::kl_divergence(&fam, &phi, &mu).map_err(js_err)?;
    let h = dist::entropy(&fam, &phi).map_err(js_err)?;
    let mut out = Vec::new();
    for p in 1..=max_pow {
        let n = 10usize.pow(p);
        let mut errs = Vec::new();
        for s in 0..seeds {
            let ce = dist::mc_cross_entropy(&fam, &phi, &mu, n, seed.wrapping_add(s)).map_err(js_err)?;
            errs.push((ce - h - kl).abs());
        }
        errs.sort_by(f64::total_cmp);
        let m = errs.len();
        out.push(if m % 2 == 1 { errs[m / 2] } else { 0.5 * (errs[m / 2 - 1] + errs[m / 2]) });
    }
    Ok(out)
}
