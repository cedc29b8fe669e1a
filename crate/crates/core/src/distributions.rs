//! Distribution families attachable to a layer: closed-form layer energies,
//! KL divergences, entropies, sampling, and a Monte-Carlo cross-entropy
//! estimator.
//!
//! Value-level functions operate on plain tensors and sum over every row of
//! the input, so a `[batch, width]` tensor yields the batch total. The graph
//! builders in [`LayerEnergy`] compute the same quantities on an autodiff
//! [`Graph`] for training.
//!
//! A full-Gaussian parameter vector stores the mean in its first half and the
//! diagonal variance in its second half along the last axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor applied to variances.
pub const VAR_FLOOR: f64 = 1e-6;
/// Tolerance on the total mass of a categorical distribution.
pub const SIMPLEX_TOL: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A distribution family together with any parameters that belong to the
/// family rather than to the layer value.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionFamily {
    /// `N(phi, I)` against `N(mu, I)`.
    GaussianIdentity,
    /// `N(phi, I)` against `N(mu, diag(variances))`.
    GaussianTrainableSigma { variances: Tensor },
    /// Probability masses along the last axis.
    Categorical,
    /// Mean and diagonal variance halves along the last axis.
    FullGaussian,
}

/// Family tag without parameters, used in layer descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    GaussianIdentity,
    GaussianTrainableSigma,
    Categorical,
    FullGaussian,
}

/// Per-layer energies and their sum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyReport {
    pub per_layer: Vec<f64>,
    pub total: f64,
}

impl EnergyReport {
    pub fn new(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.iter().any(|e| !e.is_finite()) {
            return Err(Error::Divergence(format!("non-finite layer energy in {per_layer:?}")));
        }
        let total = per_layer.iter().sum();
        Ok(Self { per_layer, total })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn check_positive(what: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(format!("{what} must be strictly positive")));
    }
    Ok(())
}

/// Rejects anything that is not a probability vector along the last axis.
pub fn check_simplex(what: &str, p: &Tensor) -> Result<()> {
    let c = p.last_dim();
    for row in p.data().chunks(c) {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("{what} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// Splits a full-Gaussian parameter tensor into its mean and variance halves.
pub fn split_halves(t: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = t.last_dim();
    if !w.is_multiple_of(2) {
        return Err(Error::Invalid(format!("full-Gaussian width {w} is odd")));
    }
    let h = w / 2;
    let mut u = Vec::with_capacity(t.numel() / 2);
    let mut s = Vec::with_capacity(t.numel() / 2);
    for row in t.data().chunks(w) {
        u.extend_from_slice(&row[..h]);
        s.extend_from_slice(&row[h..]);
    }
    Ok((u, s))
}

/// Sum of squared prediction errors, without a `1/2` factor.
pub fn energy_gaussian_identity(phi: &Tensor, mu: &Tensor) -> Result<f64> {
    same_shape("energy_gaussian_identity", phi, mu)?;
    Ok(phi.data().iter().zip(mu.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `1/2 sum(eps^2 / var + ln var)` with the additive constant dropped. The
/// variance vector applies to every row.
pub fn energy_gaussian_trainable(phi: &Tensor, mu: &Tensor, variances: &Tensor) -> Result<f64> {
    same_shape("energy_gaussian_trainable", phi, mu)?;
    if variances.numel() != phi.last_dim() {
        return shape_err("energy_gaussian_trainable", phi.shape(), variances.shape());
    }
    check_positive("variance", variances)?;
    let v = variances.data();
    let w = v.len();
    let mut e = 0.0;
    for (pr, mr) in phi.data().chunks(w).zip(mu.data().chunks(w)) {
        for i in 0..w {
            let d = pr[i] - mr[i];
            e += d * d / v[i] + v[i].ln();
        }
    }
    Ok(0.5 * e)
}

/// Discrete KL divergence `sum phi ln(phi / mu)` with `0 ln 0 = 0`.
pub fn energy_categorical(phi: &Tensor, mu: &Tensor) -> Result<f64> {
    same_shape("energy_categorical", phi, mu)?;
    check_simplex("phi", phi)?;
    check_simplex("mu", mu)?;
    Ok(phi
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&p, &m)| {
            if p == 0.0 {
                0.0
            } else {
                p * (p.max(PROB_FLOOR).ln() - m.max(PROB_FLOOR).ln())
            }
        })
        .sum())
}

/// KL divergence between diagonal Gaussians `N(u, var)` and
/// `N(u_hat, var_hat)`, each given as concatenated halves.
pub fn energy_full_gaussian(phi: &Tensor, mu: &Tensor) -> Result<f64> {
    same_shape("energy_full_gaussian", phi, mu)?;
    let (u, s) = split_halves(phi)?;
    let (uh, sh) = split_halves(mu)?;
    kl_diag_gaussian(&u, &s, &uh, &sh)
}

/// `KL(N(u, s) || N(uh, sh))` for diagonal covariances.
pub fn kl_diag_gaussian(u: &[f64], s: &[f64], uh: &[f64], sh: &[f64]) -> Result<f64> {
    if u.len() != s.len() || u.len() != uh.len() || u.len() != sh.len() {
        return shape_err("kl_diag_gaussian", &[u.len(), s.len()], &[uh.len(), sh.len()]);
    }
    if s.iter().chain(sh).any(|&v| v <= 0.0) {
        return Err(Error::Domain("variance must be strictly positive".into()));
    }
    let mut e = 0.0;
    for i in 0..u.len() {
        let d = u[i] - uh[i];
        e += (s[i] + d * d) / sh[i] + (sh[i] / s[i]).ln() - 1.0;
    }
    Ok(0.5 * e)
}

/// Closed-form `KL(X(phi) || X_hat(mu))` for the family.
pub fn kl_divergence(family: &DistributionFamily, phi: &Tensor, mu: &Tensor) -> Result<f64> {
    match family {
        DistributionFamily::GaussianIdentity => Ok(0.5 * energy_gaussian_identity(phi, mu)?),
        DistributionFamily::GaussianTrainableSigma { variances } => {
            // The unit variance of X adds 1/var - 1 per coordinate and row.
            let rows = phi.rows() as f64;
            let extra: f64 = variances.data().iter().map(|v| 1.0 / v - 1.0).sum::<f64>();
            Ok(energy_gaussian_trainable(phi, mu, variances)? + 0.5 * rows * extra)
        }
        DistributionFamily::Categorical => energy_categorical(phi, mu),
        DistributionFamily::FullGaussian => energy_full_gaussian(phi, mu),
    }
}

/// Entropy of `X(phi)`, summed over rows.
pub fn entropy(family: &DistributionFamily, phi: &Tensor) -> Result<f64> {
    match family {
        DistributionFamily::GaussianIdentity | DistributionFamily::GaussianTrainableSigma { .. } => {
            Ok(0.5 * phi.numel() as f64 * (1.0 + LN_2PI))
        }
        DistributionFamily::Categorical => {
            check_simplex("phi", phi)?;
            Ok(-phi
                .data()
                .iter()
                .map(|&p| if p == 0.0 { 0.0 } else { p * p.ln() })
                .sum::<f64>())
        }
        DistributionFamily::FullGaussian => {
            let (_, s) = split_halves(phi)?;
            if s.iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain("variance must be strictly positive".into()));
            }
            Ok(s.iter().map(|v| 0.5 * (1.0 + LN_2PI + v.ln())).sum())
        }
    }
}

/// One draw from `X(params)`, independently per row. Categorical draws are
/// returned one-hot.
pub fn sample(family: &DistributionFamily, params: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(family, params, &mut rng)
}

pub fn sample_with(family: &DistributionFamily, params: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    match family {
        DistributionFamily::GaussianIdentity | DistributionFamily::GaussianTrainableSigma { .. } => {
            let data = params.data().iter().map(|&m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(params.shape().to_vec(), data)
        }
        DistributionFamily::Categorical => {
            check_simplex("params", params)?;
            let c = params.last_dim();
            let mut out = vec![0.0; params.numel()];
            for (r, row) in params.data().chunks(c).enumerate() {
                out[r * c + categorical_index(row, rng.gen::<f64>())] = 1.0;
            }
            Tensor::new(params.shape().to_vec(), out)
        }
        DistributionFamily::FullGaussian => {
            let (u, s) = split_halves(params)?;
            if s.iter().any(|&v| v < 0.0) {
                return Err(Error::Domain("variance must be non-negative".into()));
            }
            let data: Vec<f64> = u
                .iter()
                .zip(&s)
                .map(|(&m, &v)| m + v.max(VAR_FLOOR).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut shape = params.shape().to_vec();
            *shape.last_mut().unwrap() /= 2;
            Tensor::new(shape, data)
        }
    }
}

/// Inverse-CDF lookup. Zero-mass categories are never selected.
fn categorical_index(p: &[f64], uniform: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        acc += pi;
        last = i;
        if uniform < acc {
            return i;
        }
    }
    last
}

/// Sample-based estimate of the cross-entropy `H(X(phi), X_hat(mu))`:
/// `-(1/N) sum_i ln p(s_i | mu)` with `s_i ~ X(phi)`, summed over rows.
pub fn mc_cross_entropy(
    family: &DistributionFamily,
    phi: &Tensor,
    mu: &Tensor,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    same_shape("mc_cross_entropy", phi, mu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = phi.last_dim();
    let mut total = 0.0;
    match family {
        DistributionFamily::Categorical => {
            check_simplex("phi", phi)?;
            check_simplex("mu", mu)?;
            for (pr, mr) in phi.data().chunks(c).zip(mu.data().chunks(c)) {
                let logs: Vec<f64> = mr.iter().map(|m| m.max(PROB_FLOOR).ln()).collect();
                let mut s = 0.0;
                for _ in 0..n {
                    s += logs[categorical_index(pr, rng.gen())];
                }
                total -= s / n as f64;
            }
        }
        DistributionFamily::GaussianIdentity => {
            for (pr, mr) in phi.data().chunks(c).zip(mu.data().chunks(c)) {
                for (&p, &m) in pr.iter().zip(mr) {
                    let mut s = 0.0;
                    for _ in 0..n {
                        let x = p + rng.sample::<f64, _>(StandardNormal);
                        s += 0.5 * ((x - m) * (x - m) + LN_2PI);
                    }
                    total += s / n as f64;
                }
            }
        }
        DistributionFamily::GaussianTrainableSigma { variances } => {
            if variances.numel() != c {
                return shape_err("mc_cross_entropy", phi.shape(), variances.shape());
            }
            check_positive("variance", variances)?;
            let v = variances.data();
            for (pr, mr) in phi.data().chunks(c).zip(mu.data().chunks(c)) {
                for i in 0..c {
                    let mut s = 0.0;
                    for _ in 0..n {
                        let x = pr[i] + rng.sample::<f64, _>(StandardNormal);
                        s += 0.5 * ((x - mr[i]) * (x - mr[i]) / v[i] + v[i].ln() + LN_2PI);
                    }
                    total += s / n as f64;
                }
            }
        }
        DistributionFamily::FullGaussian => {
            let (u, s) = split_halves(phi)?;
            let (uh, sh) = split_halves(mu)?;
            if s.iter().chain(&sh).any(|&v| v <= 0.0) {
                return Err(Error::Domain("variance must be strictly positive".into()));
            }
            for i in 0..u.len() {
                let sd = s[i].sqrt();
                let mut acc = 0.0;
                for _ in 0..n {
                    let x = u[i] + sd * rng.sample::<f64, _>(StandardNormal);
                    acc += 0.5 * ((x - uh[i]) * (x - uh[i]) / sh[i] + sh[i].ln() + LN_2PI);
                }
                total += acc / n as f64;
            }
        }
    }
    Ok(total)
}

/// Energy function attached to a layer during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerEnergy {
    /// `sum eps^2`.
    Quadratic,
    /// `KL(N(phi, I) || N(mu, I)) = 1/2 sum eps^2`.
    GaussianKl,
    /// `1/2 sum (eps^2 / var_hat + ln var_hat)` with a trainable `var_hat`.
    TrainableSigma,
    /// `sum phi ln(phi / mu)`.
    Categorical,
    /// KL between diagonal Gaussians stored as mean/variance halves.
    FullGaussian,
}

impl LayerEnergy {
    /// Builds the scalar energy. `weights`, when given, scales each row's
    /// energy and must have as many entries as there are rows.
    pub fn build(
        self,
        g: &mut Graph,
        phi: Var,
        mu: Var,
        var_hat: Option<Var>,
        weights: Option<&Tensor>,
    ) -> Result<Var> {
        if g.shape(phi) != g.shape(mu) {
            return shape_err("layer energy", g.shape(phi), g.shape(mu));
        }
        let per_row = match self {
            LayerEnergy::Quadratic | LayerEnergy::GaussianKl => {
                let d = g.sub(phi, mu)?;
                let sq = g.square(d)?;
                let r = g.sum_last(sq)?;
                if self == LayerEnergy::GaussianKl {
                    g.scale(r, 0.5)?
                } else {
                    r
                }
            }
            LayerEnergy::TrainableSigma => {
                let var_hat = var_hat.ok_or_else(|| Error::Invalid("trainable-sigma energy needs variances".into()))?;
                let d = g.sub(phi, mu)?;
                let sq = g.square(d)?;
                let one = g.constant(Tensor::scalar(1.0));
                let inv = g.div(one, var_hat)?;
                let scaled = g.mul_row(sq, inv)?;
                let r = g.sum_last(scaled)?;
                let lv = g.ln(var_hat)?;
                let lsum = g.sum(lv)?;
                let r = g.add(r, lsum)?;
                g.scale(r, 0.5)?
            }
            LayerEnergy::Categorical => {
                let pf = g.clamp_min(phi, PROB_FLOOR)?;
                let mf = g.clamp_min(mu, PROB_FLOOR)?;
                let lp = g.ln(pf)?;
                let lm = g.ln(mf)?;
                let d = g.sub(lp, lm)?;
                let t = g.mul(phi, d)?;
                g.sum_last(t)?
            }
            LayerEnergy::FullGaussian => {
                let w = g.shape(phi).last().copied().unwrap_or(0);
                if w % 2 != 0 {
                    return Err(Error::Invalid(format!("full-Gaussian width {w} is odd")));
                }
                let h = w / 2;
                let u = g.slice_last(phi, 0, h)?;
                let s = g.slice_last(phi, h, w)?;
                let uh = g.slice_last(mu, 0, h)?;
                let sh = g.slice_last(mu, h, w)?;
                let s = g.clamp_min(s, VAR_FLOOR)?;
                let sh = g.clamp_min(sh, VAR_FLOOR)?;
                let d = g.sub(u, uh)?;
                let d2 = g.square(d)?;
                let num = g.add(s, d2)?;
                let ratio = g.div(num, sh)?;
                let lsh = g.ln(sh)?;
                let ls = g.ln(s)?;
                let lr = g.sub(lsh, ls)?;
                let t = g.add(ratio, lr)?;
                let t = g.add_const(t, -1.0)?;
                let r = g.sum_last(t)?;
                g.scale(r, 0.5)?
            }
        };
        match weights {
            None => g.sum(per_row),
            Some(w) => {
                let shape = g.shape(per_row).to_vec();
                let wt = w.reshape(&shape)?;
                let wv = g.constant(wt);
                let m = g.mul(per_row, wv)?;
                g.sum(m)
            }
        }
    }

    pub fn family(self) -> FamilyKind {
        match self {
            LayerEnergy::Quadratic | LayerEnergy::GaussianKl => FamilyKind::GaussianIdentity,
            LayerEnergy::TrainableSigma => FamilyKind::GaussianTrainableSigma,
            LayerEnergy::Categorical => FamilyKind::Categorical,
            LayerEnergy::FullGaussian => FamilyKind::FullGaussian,
        }
    }
}

/// Projects categorical rows back onto the probability simplex: negative
/// masses are clipped to zero and each row is renormalised. Rows whose mass
/// vanishes entirely become uniform over `support`.
pub fn project_simplex(row: &mut [f64], support: usize) {
    let mut s = 0.0;
    for v in row.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        s += *v;
    }
    if s > 0.0 {
        for v in row.iter_mut() {
            *v /= s;
        }
    } else {
        let p = 1.0 / support as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j < support { p } else { 0.0 };
        }
    }
}
