//! Predictive-coding inference and learning.
//!
//! Every layer `l` holds a value `phi_l` and a prediction `mu_l` computed from
//! the values of its parents. The total energy is the sum of local layer
//! energies `E_l(phi_l, mu_l)`. Training alternates `T` gradient steps on the
//! values (with the weights fixed) and one or more optimizer steps on the
//! weights (with the values fixed).
//!
//! Gradients are computed layer by layer on small local graphs: the value of
//! layer `k` receives `dE_k/dphi_k` plus `dE_l/dphi_k` from each layer `l`
//! that consumes it, and the weights of layer `l` receive `dE_l/dtheta_l`
//! only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::distributions::{check_simplex, project_simplex, EnergyReport, FamilyKind, LayerEnergy, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::model::{LayerCtx, LayerOp, Network};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

/// Which energy the network minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    /// Sum of squared errors on every layer.
    F,
    /// Gaussian energy with a learnable variance per node.
    FTilde,
    /// Sum of KL divergences, with the family chosen per layer.
    FKl,
}

impl EnergyMode {
    pub fn name(self) -> &'static str {
        match self {
            EnergyMode::F => "f",
            EnergyMode::FTilde => "ftilde",
            EnergyMode::FKl => "fkl",
        }
    }
}

/// Energy function used by layer `l` under `mode`.
pub fn layer_energy(net: &Network, mode: EnergyMode, l: usize) -> Result<LayerEnergy> {
    let desc = &net.layers[l];
    Ok(match mode {
        EnergyMode::F => LayerEnergy::Quadratic,
        EnergyMode::FTilde if l == 0 => LayerEnergy::Quadratic,
        EnergyMode::FTilde => {
            if desc.var_param().is_none() {
                return Err(Error::Invalid(format!(
                    "energy ftilde needs a trainable variance on layer {}",
                    desc.name
                )));
            }
            LayerEnergy::TrainableSigma
        }
        EnergyMode::FKl => match desc.family {
            FamilyKind::GaussianIdentity | FamilyKind::GaussianTrainableSigma => LayerEnergy::GaussianKl,
            FamilyKind::Categorical => LayerEnergy::Categorical,
            FamilyKind::FullGaussian => LayerEnergy::FullGaussian,
        },
    })
}

/// Rejects energy modes the network cannot support.
pub fn check_mode(net: &Network, mode: EnergyMode) -> Result<()> {
    if mode == EnergyMode::FTilde && !net.spec.has_trainable_sigma() {
        return Err(Error::Invalid(format!(
            "energy ftilde requires a model with trainable_sigma, got {}",
            net.spec.name()
        )));
    }
    Ok(())
}

/// How categorical values move under the KL energy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoricalStep {
    /// `phi <- phi * exp(-beta * grad)`, renormalised per row.
    #[default]
    Exponentiated,
    /// Centred gradient step, then clamp at 0 and renormalise.
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Value-update steps per iteration.
    pub t_steps: usize,
    pub beta_phi: f64,
    pub beta_theta: f64,
    #[serde(default = "one")]
    pub weight_updates_per_iter: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub categorical_step: CategoricalStep,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::Invalid("train.t_steps must be at least 1".into()));
        }
        if !(self.beta_phi > 0.0 && self.beta_phi.is_finite()) {
            return Err(Error::Invalid("train.beta_phi must be positive".into()));
        }
        if !(self.beta_theta > 0.0 && self.beta_theta.is_finite()) {
            return Err(Error::Invalid("train.beta_theta must be positive".into()));
        }
        if self.weight_updates_per_iter == 0 {
            return Err(Error::Invalid("train.weight_updates_per_iter must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("train.batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("train.epochs must be at least 1".into()));
        }
        if let OptimizerKind::AdamW { decay } = self.optimizer {
            if !(decay >= 0.0 && decay.is_finite()) {
                return Err(Error::Invalid("train.weight_decay must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// One presentation of data to a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Feed {
    /// `[batch, features]`, or token ids `[batch, seq]`.
    pub input: Tensor,
    /// Output-layer target; `None` leaves the output free.
    pub target: Option<Tensor>,
    /// Per-position weights `[batch * seq]` for token models.
    pub row_mask: Option<Tensor>,
    /// Reparameterisation noise `[batch, latent / 2]` for VAEs.
    pub noise: Option<Tensor>,
    pub batch: usize,
    pub seq: usize,
}

impl Feed {
    pub fn dense(input: Tensor, target: Option<Tensor>) -> Self {
        let batch = input.shape().first().copied().unwrap_or(0);
        Self {
            input,
            target,
            row_mask: None,
            noise: None,
            batch,
            seq: 1,
        }
    }

    pub fn ctx(&self) -> LayerCtx<'_> {
        LayerCtx {
            batch: self.batch,
            seq: self.seq,
            noise: self.noise.as_ref(),
        }
    }
}

/// Values and predictions of every layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PcState {
    pub phi: Vec<Tensor>,
    pub mu: Vec<Tensor>,
    pub input_clamped: bool,
    pub output_clamped: bool,
    pub noise: Option<Tensor>,
    pub row_mask: Option<Tensor>,
    pub batch: usize,
    pub seq: usize,
}

impl PcState {
    pub fn ctx(&self) -> LayerCtx<'_> {
        LayerCtx {
            batch: self.batch,
            seq: self.seq,
            noise: self.noise.as_ref(),
        }
    }

    /// Fixes the output layer to `target`.
    pub fn clamp_output(&mut self, target: &Tensor) -> Result<()> {
        let out = self.phi.len() - 1;
        if target.shape() != self.phi[out].shape() {
            return Err(Error::ShapeMismatch {
                op: "clamp_output",
                lhs: target.shape().to_vec(),
                rhs: self.phi[out].shape().to_vec(),
            });
        }
        self.phi[out] = target.clone();
        self.output_clamped = true;
        Ok(())
    }

    /// Frees the input layer. Its value then carries the prior energy
    /// `E_0(phi_0, d)`.
    pub fn release_input(&mut self) {
        self.input_clamped = false;
    }

    /// Drops cached predictions so the next energy evaluation rebuilds them.
    /// Needed when weights change while a state is reused.
    pub fn invalidate_predictions(&mut self) {
        for m in self.mu.iter_mut().skip(1) {
            *m = Tensor::zeros(&[0]);
        }
    }

    pub fn is_clamped(&self, l: usize) -> bool {
        (l == 0 && self.input_clamped) || (l == self.phi.len() - 1 && self.output_clamped)
    }
}

/// Forward pass that initialises every value to its prediction. The input
/// layer is clamped to the data and the output is left free.
pub fn forward_init(net: &Network, feed: &Feed) -> Result<PcState> {
    let values = net.forward(&feed.input, &feed.ctx())?;
    Ok(PcState {
        phi: values.clone(),
        mu: values,
        input_clamped: true,
        output_clamped: false,
        noise: feed.noise.clone(),
        row_mask: feed.row_mask.clone(),
        batch: feed.batch,
        seq: feed.seq,
    })
}

/// Unclamped forward pass returning the output prediction.
pub fn predict(net: &Network, feed: &Feed) -> Result<Tensor> {
    let mut values = net.forward(&feed.input, &feed.ctx())?;
    Ok(values.pop().expect("network has an output layer"))
}

struct Local {
    energy: f64,
    mu: Tensor,
    phi_grads: Vec<(usize, Tensor)>,
    theta_grads: Vec<Tensor>,
}

/// Builds `E_l` on a fresh graph and differentiates it with respect to the
/// requested leaves.
fn local(net: &Network, state: &PcState, mode: EnergyMode, l: usize, want_phi: bool, want_theta: bool) -> Result<Local> {
    let mut g = Graph::new();
    let desc = &net.layers[l];
    let kind = layer_energy(net, mode, l)?;
    let leaf = |g: &mut Graph, t: &Tensor, free: bool| if free { g.param(t.clone()) } else { g.constant(t.clone()) };

    let (mu, params, parents): (Var, Vec<Var>, Vec<Var>) = if l == 0 {
        if state.seq > 1 || net.is_token_model() {
            return Err(Error::Invalid("token inputs cannot be released".into()));
        }
        (g.constant(state.mu[0].clone()), vec![], vec![])
    } else {
        let parents: Vec<Var> = desc
            .parents
            .iter()
            .map(|&p| leaf(&mut g, &state.phi[p], want_phi && !state.is_clamped(p)))
            .collect();
        let params: Vec<Var> = net.params[l].iter().map(|t| leaf(&mut g, t, want_theta)).collect();
        // With every parent clamped and the weights fixed, the prediction
        // cannot change during inference.
        let fixed = !want_theta && desc.parents.iter().all(|&p| state.is_clamped(p)) && desc.var_param().is_none();
        let mu = if fixed && state.mu[l].numel() > 0 {
            g.constant(state.mu[l].clone())
        } else {
            net.build_mu(&mut g, l, &parents, &params, &state.ctx())?
        };
        (mu, params, parents)
    };
    let phi = leaf(&mut g, &state.phi[l], want_phi && !state.is_clamped(l));
    let var = desc.var_param().map(|i| params[i]);
    let weights = if l == 0 { None } else { state.row_mask.as_ref() };
    let e = kind.build(&mut g, phi, mu, var, weights)?;
    let energy = g.value(e).item();
    if !energy.is_finite() {
        return Err(Error::Divergence(format!("energy of layer {} is not finite", desc.name)));
    }
    let mu_value = g.value(mu).clone();
    let mut grads = g.backward(e)?;
    let mut phi_grads = Vec::new();
    if want_phi {
        if let Some(t) = grads.take(phi) {
            phi_grads.push((l, t));
        }
        for (&p, &v) in desc.parents.iter().zip(&parents) {
            if let Some(t) = grads.take(v) {
                phi_grads.push((p, t));
            }
        }
    }
    let theta_grads = if want_theta {
        params
            .iter()
            .zip(&net.params[l])
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Local {
        energy,
        mu: mu_value,
        phi_grads,
        theta_grads,
    })
}

fn first_layer(state: &PcState) -> usize {
    usize::from(state.input_clamped)
}

fn report(state: &PcState, energies: Vec<(usize, f64)>) -> Result<EnergyReport> {
    let mut per_layer = vec![0.0; state.phi.len()];
    for (l, e) in energies {
        per_layer[l] = e;
    }
    EnergyReport::new(per_layer)
}

/// Per-layer energies of the current state. Entry 0 is the input prior,
/// zero while the input is clamped.
pub fn energies(net: &Network, state: &PcState, mode: EnergyMode) -> Result<EnergyReport> {
    let mut es = Vec::new();
    for l in first_layer(state)..net.layers.len() {
        es.push((l, local(net, state, mode, l, false, false)?.energy));
    }
    report(state, es)
}

/// `dF/dphi_k` for every layer; `None` for clamped layers. Also refreshes
/// the stored predictions.
pub fn phi_gradients(net: &Network, state: &mut PcState, mode: EnergyMode) -> Result<(Vec<Option<Tensor>>, EnergyReport)> {
    let mut grads: Vec<Option<Tensor>> = vec![None; state.phi.len()];
    let mut es = Vec::new();
    for l in first_layer(state)..net.layers.len() {
        let loc = local(net, state, mode, l, true, false)?;
        es.push((l, loc.energy));
        state.mu[l] = loc.mu;
        for (k, gk) in loc.phi_grads {
            match &mut grads[k] {
                Some(acc) => acc.axpy(1.0, &gk)?,
                slot => *slot = Some(gk),
            }
        }
    }
    Ok((grads, report(state, es)?))
}

/// `dE_l/dtheta_l` for every layer, averaged over the batch.
pub fn theta_gradients(net: &Network, state: &PcState, mode: EnergyMode) -> Result<(Vec<Vec<Tensor>>, EnergyReport)> {
    let scale = 1.0 / state.batch as f64;
    let mut grads = vec![Vec::new(); net.layers.len()];
    let mut es = Vec::new();
    if !state.input_clamped {
        es.push((0, local(net, state, mode, 0, false, false)?.energy));
    }
    for (l, slot) in grads.iter_mut().enumerate().skip(1) {
        let loc = local(net, state, mode, l, false, true)?;
        es.push((l, loc.energy));
        *slot = loc.theta_grads.into_iter().map(|t| t.scale(scale)).collect();
    }
    Ok((grads, report(state, es)?))
}

/// One gradient step on every free value. Returns the energies of the state
/// the gradient was taken at.
pub fn infer_step(net: &Network, state: &mut PcState, mode: EnergyMode, beta_phi: f64) -> Result<EnergyReport> {
    infer_step_with(net, state, mode, beta_phi, CategoricalStep::default())
}

/// [`infer_step`] with an explicit update rule for categorical values.
pub fn infer_step_with(
    net: &Network,
    state: &mut PcState,
    mode: EnergyMode,
    beta_phi: f64,
    step: CategoricalStep,
) -> Result<EnergyReport> {
    let (grads, rep) = phi_gradients(net, state, mode)?;
    for (l, g) in grads.into_iter().enumerate() {
        if let Some(mut g) = g {
            if !state.is_clamped(l) {
                if mode == EnergyMode::FKl && net.layers[l].family == FamilyKind::Categorical {
                    match step {
                        CategoricalStep::Exponentiated => {
                            exp_step(&mut state.phi[l], &g, beta_phi, net.layers[l].op, state.seq);
                            continue;
                        }
                        CategoricalStep::Projected => center_rows(&mut g, net.layers[l].op, state.seq),
                    }
                }
                state.phi[l].axpy(-beta_phi, &g)?;
            }
        }
    }
    project(net, state, mode);
    if state.phi.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence("layer value left the finite range".into()));
    }
    Ok(rep)
}

/// Removes the component of a categorical gradient that would leave the
/// simplex, by subtracting each row's mean over its support.
fn center_rows(g: &mut Tensor, op: LayerOp, seq: usize) {
    let w = g.last_dim();
    for (r, row) in g.data_mut().chunks_mut(w).enumerate() {
        let support = if op == LayerOp::AttnProbs { r % seq + 1 } else { w };
        let mean = row[..support].iter().sum::<f64>() / support as f64;
        row[..support].iter_mut().for_each(|v| *v -= mean);
    }
}

/// Multiplicative update on each row's support. Rows are shifted by their
/// largest exponent before `exp`; `project` renormalises afterwards.
fn exp_step(phi: &mut Tensor, g: &Tensor, beta: f64, op: LayerOp, seq: usize) {
    let w = g.last_dim();
    for (r, (row, gr)) in phi.data_mut().chunks_mut(w).zip(g.data().chunks(w)).enumerate() {
        let support = if op == LayerOp::AttnProbs { r % seq + 1 } else { w };
        let top = gr[..support].iter().map(|v| -beta * v).fold(f64::NEG_INFINITY, f64::max);
        for (p, gv) in row[..support].iter_mut().zip(gr) {
            *p *= (-beta * gv - top).exp();
        }
    }
}

/// Restores the constraints of each layer after a value update: attention
/// never looks ahead, categorical values stay on the simplex under the KL
/// energy, and variance halves stay above the floor.
pub fn project(net: &Network, state: &mut PcState, mode: EnergyMode) {
    for l in 1..net.layers.len() {
        if state.is_clamped(l) {
            continue;
        }
        let desc = &net.layers[l];
        let categorical = mode == EnergyMode::FKl && desc.family == FamilyKind::Categorical;
        let phi = state.phi[l].data_mut();
        match desc.op {
            LayerOp::AttnProbs => {
                let s = state.seq;
                for (r, row) in phi.chunks_mut(s).enumerate() {
                    let i = r % s;
                    row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
                    if categorical {
                        project_simplex(&mut row[..=i], i + 1);
                    }
                }
            }
            LayerOp::GaussianHead => {
                let w = desc.width;
                for row in phi.chunks_mut(w) {
                    row[w / 2..].iter_mut().for_each(|v| *v = v.max(VAR_FLOOR));
                }
            }
            _ if categorical => {
                let w = desc.width;
                for row in phi.chunks_mut(w) {
                    project_simplex(row, w);
                }
            }
            _ => {}
        }
    }
}

/// One optimizer step on the weights with the values held fixed. Returns the
/// energies before the update.
pub fn weight_step(net: &mut Network, state: &PcState, mode: EnergyMode, opt: &mut Optimizer) -> Result<EnergyReport> {
    let (grads, rep) = theta_gradients(net, state, mode)?;
    apply_gradients(net, &grads, opt)?;
    Ok(rep)
}

/// Applies per-layer gradients and keeps learnable variances above the floor.
pub fn apply_gradients(net: &mut Network, grads: &[Vec<Tensor>], opt: &mut Optimizer) -> Result<()> {
    let flat: Vec<&Tensor> = grads.iter().flatten().collect();
    let mut params: Vec<&mut Tensor> = net.params.iter_mut().flatten().collect();
    opt.update(&mut params, &flat)?;
    for (desc, ps) in net.layers.iter().zip(net.params.iter_mut()) {
        if let Some(i) = desc.var_param() {
            ps[i].data_mut().iter_mut().for_each(|v| *v = v.max(VAR_FLOOR));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// Total energy right after clamping the output.
    pub initial: EnergyReport,
    /// Energies at the end of inference, before the weight update.
    pub settled: EnergyReport,
    /// Output-layer energy at initialisation divided by the batch size, or by
    /// the number of scored positions when the feed carries a row mask.
    pub loss: f64,
}

/// Owns the weight optimizer and runs full training iterations.
#[derive(Debug, Clone)]
pub struct PcTrainer {
    pub config: TrainConfig,
    pub mode: EnergyMode,
    opt: Optimizer,
}

impl PcTrainer {
    pub fn new(net: &Network, config: TrainConfig, mode: EnergyMode) -> Result<Self> {
        config.validate()?;
        check_mode(net, mode)?;
        let opt = Optimizer::new(config.optimizer, config.beta_theta)?;
        Ok(Self { config, mode, opt })
    }

    /// Forward initialisation, output clamp, `T` inference steps, then the
    /// configured number of weight steps.
    pub fn train_step(&mut self, net: &mut Network, feed: &Feed) -> Result<StepMetrics> {
        let target = feed
            .target
            .as_ref()
            .ok_or_else(|| Error::Invalid("training needs a target".into()))?;
        if self.mode == EnergyMode::FKl && net.layers[net.output()].family == FamilyKind::Categorical {
            check_simplex("target", target)?;
        }
        let mut state = forward_init(net, feed)?;
        state.clamp_output(target)?;
        let mut initial = None;
        for _ in 0..self.config.t_steps {
            let r = infer_step_with(net, &mut state, self.mode, self.config.beta_phi, self.config.categorical_step)?;
            initial.get_or_insert(r);
        }
        let initial = initial.expect("t_steps >= 1");
        let mut settled = None;
        for _ in 0..self.config.weight_updates_per_iter {
            let r = weight_step(net, &state, self.mode, &mut self.opt)?;
            settled.get_or_insert(r);
        }
        let scored = feed.row_mask.as_ref().map_or(feed.batch as f64, |m| m.sum().max(1.0));
        let loss = initial.per_layer[net.output()] / scored;
        Ok(StepMetrics {
            initial,
            settled: settled.expect("weight_updates_per_iter >= 1"),
            loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_m1, build_m2, ModelSpec, Variant};

    fn small(spec: ModelSpec) -> Network {
        Network::new(spec, 11).unwrap()
    }

    fn tiny_classifier(variant: Variant) -> ModelSpec {
        ModelSpec::Classifier {
            variant,
            input: 5,
            width: 4,
            hidden: 3,
            classes: 3,
            trainable_sigma: false,
        }
    }

    fn feed(n: usize, width: usize, seed: u64) -> Feed {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * width).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut y = vec![0.0; n * 3];
        for i in 0..n {
            y[i * 3 + i % 3] = 1.0;
        }
        Feed::dense(
            Tensor::new(vec![n, width], x).unwrap(),
            Some(Tensor::new(vec![n, 3], y).unwrap()),
        )
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            t_steps: 8,
            beta_phi: 0.05,
            beta_theta: 1e-3,
            weight_updates_per_iter: 1,
            optimizer: OptimizerKind::Adam,
            batch_size: 4,
            epochs: 1,
            seed: 0,
            categorical_step: CategoricalStep::default(),
        }
    }

    #[test]
    fn stationary_state_is_unchanged() {
        let net = small(tiny_classifier(Variant::M2));
        let f = feed(4, 5, 1);
        let mut s = forward_init(&net, &f).unwrap();
        let before = s.clone();
        for mode in [EnergyMode::F, EnergyMode::FKl] {
            let r = infer_step(&net, &mut s, mode, 0.1).unwrap();
            assert!(r.total.abs() < 1e-12);
            for (a, b) in s.phi.iter().zip(&before.phi) {
                assert!(a.sub(b).unwrap().max_abs() < 1e-15);
            }
        }
    }

    #[test]
    fn output_stays_clamped() {
        let net = small(tiny_classifier(Variant::M3));
        let f = feed(4, 5, 2);
        let mut s = forward_init(&net, &f).unwrap();
        let y = f.target.clone().unwrap();
        s.clamp_output(&y).unwrap();
        for _ in 0..10 {
            infer_step(&net, &mut s, EnergyMode::FKl, 0.1).unwrap();
            assert_eq!(s.phi[net.output()], y);
            assert_eq!(s.phi[0], f.input);
        }
    }

    #[test]
    fn categorical_values_stay_on_simplex() {
        let net = small(tiny_classifier(Variant::M3));
        let f = feed(4, 5, 3);
        for step in [CategoricalStep::Exponentiated, CategoricalStep::Projected] {
            let mut s = forward_init(&net, &f).unwrap();
            s.clamp_output(f.target.as_ref().unwrap()).unwrap();
            for _ in 0..20 {
                infer_step_with(&net, &mut s, EnergyMode::FKl, 0.5, step).unwrap();
            }
            check_simplex("phi_2", &s.phi[2]).unwrap();
        }
    }

    #[test]
    fn small_exponentiated_step_is_natural_gradient() {
        let net = small(tiny_classifier(Variant::M3));
        let f = feed(4, 5, 4);
        let mut s = forward_init(&net, &f).unwrap();
        s.clamp_output(f.target.as_ref().unwrap()).unwrap();
        infer_step(&net, &mut s, EnergyMode::FKl, 0.3).unwrap();
        let (grads, _) = phi_gradients(&net, &mut s, EnergyMode::FKl).unwrap();
        let g = grads[2].clone().unwrap();
        let beta = 1e-6;
        let before = s.phi[2].clone();
        infer_step(&net, &mut s, EnergyMode::FKl, beta).unwrap();
        let w = g.last_dim();
        for ((p, q), gr) in before.data().chunks(w).zip(s.phi[2].data().chunks(w)).zip(g.data().chunks(w)) {
            let mean: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..w {
                let expect = -beta * p[j] * (gr[j] - mean);
                assert!((q[j] - p[j] - expect).abs() <= 1e-6 * expect.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn wide_categorical_layer_settles() {
        let spec = ModelSpec::Classifier {
            variant: Variant::M3,
            input: 5,
            width: 256,
            hidden: 3,
            classes: 3,
            trainable_sigma: false,
        };
        let net = small(spec);
        let f = feed(8, 5, 5);
        let mut s = forward_init(&net, &f).unwrap();
        s.clamp_output(f.target.as_ref().unwrap()).unwrap();
        let mut totals = Vec::new();
        for _ in 0..32 {
            totals.push(infer_step(&net, &mut s, EnergyMode::FKl, 0.05).unwrap().total);
        }
        assert!(totals.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{totals:?}");
    }

    #[test]
    fn inference_reduces_energy() {
        let net = small(tiny_classifier(Variant::M1));
        let f = feed(4, 5, 4);
        let mut s = forward_init(&net, &f).unwrap();
        s.clamp_output(f.target.as_ref().unwrap()).unwrap();
        let first = infer_step(&net, &mut s, EnergyMode::F, 0.05).unwrap().total;
        for _ in 0..30 {
            infer_step(&net, &mut s, EnergyMode::F, 0.05).unwrap();
        }
        assert!(energies(&net, &s, EnergyMode::F).unwrap().total < first);
    }

    #[test]
    fn zero_error_gives_zero_weight_gradient() {
        let mut net = small(tiny_classifier(Variant::M1));
        let f = feed(3, 5, 5);
        let s = forward_init(&net, &f).unwrap();
        let before = net.params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        weight_step(&mut net, &s, EnergyMode::F, &mut opt).unwrap();
        assert_eq!(net.params, before);
    }

    #[test]
    fn ftilde_needs_trainable_sigma() {
        let net = small(build_m2(4, 2));
        assert!(PcTrainer::new(&net, cfg(), EnergyMode::FTilde).is_err());
        let spec = ModelSpec::Classifier {
            variant: Variant::M1,
            input: 784,
            width: 4,
            hidden: 2,
            classes: 10,
            trainable_sigma: true,
        };
        let net = small(spec);
        assert!(PcTrainer::new(&net, cfg(), EnergyMode::FTilde).is_ok());
    }

    #[test]
    fn zero_steps_rejected() {
        let net = small(build_m1(4, 2));
        let mut c = cfg();
        c.t_steps = 0;
        assert!(PcTrainer::new(&net, c, EnergyMode::F).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let mut net = small(tiny_classifier(Variant::M2));
        let f = feed(6, 5, 6);
        let mut c = cfg();
        c.beta_theta = 0.01;
        let mut tr = PcTrainer::new(&net, c, EnergyMode::FKl).unwrap();
        let first = tr.train_step(&mut net, &f).unwrap().loss;
        let mut last = first;
        for _ in 0..100 {
            last = tr.train_step(&mut net, &f).unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn predict_is_pure() {
        let net = small(tiny_classifier(Variant::M2));
        let f = feed(4, 5, 7);
        let a = predict(&net, &f).unwrap();
        assert_eq!(a, predict(&net, &f).unwrap());
        check_simplex("prediction", &a).unwrap();
    }
}
