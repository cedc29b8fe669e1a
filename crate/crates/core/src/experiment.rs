//! Run configuration and the classification, VAE and language-model
//! experiment loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bp::{bp_loss, BpTrainer, Loss};
use crate::checkpoint;
use crate::data::{self, Dataset, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::model::{ModelSpec, Network, Variant};
use crate::optim::OptimizerKind;
use crate::pc::{CategoricalStep, EnergyMode, Feed, PcTrainer, TrainConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ClassifyM1,
    ClassifyM2,
    ClassifyM3,
    Vae,
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    Bp,
    PcF,
    PcFtilde,
    PcFkl,
}

impl TrainerKind {
    pub fn mode(self) -> Option<EnergyMode> {
        match self {
            TrainerKind::Bp => None,
            TrainerKind::PcF => Some(EnergyMode::F),
            TrainerKind::PcFtilde => Some(EnergyMode::FTilde),
            TrainerKind::PcFkl => Some(EnergyMode::FKl),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::Bp => "bp",
            TrainerKind::PcF => "pc-f",
            TrainerKind::PcFtilde => "pc-ftilde",
            TrainerKind::PcFkl => "pc-fkl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: ExperimentKind,
    pub trainer: TrainerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub hidden: usize,
    pub trainable_sigma: bool,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub latent: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 512,
            hidden: 3,
            trainable_sigma: false,
            enc_layers: 2,
            dec_layers: 2,
            latent: 32,
            d_model: 128,
            ffn_hidden: 256,
            max_len: 34,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub t_steps: usize,
    pub beta_phi: f64,
    pub beta_theta: f64,
    pub weight_updates_per_iter: usize,
    pub optimizer: OptimizerName,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Language-model evaluation cadence in training steps.
    pub eval_every: usize,
    pub categorical_step: CategoricalStep,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            t_steps: 32,
            beta_phi: 0.05,
            beta_theta: 1e-4,
            weight_updates_per_iter: 1,
            optimizer: OptimizerName::Adam,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            eval_every: 200,
            categorical_step: CategoricalStep::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: DatasetName,
    pub mnist: PathBuf,
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    pub train_items: Option<usize>,
    pub test_items: Option<usize>,
    pub corpus_train: PathBuf,
    pub corpus_test: PathBuf,
    pub vocab: usize,
    pub train_sentences: Option<usize>,
    pub test_sentences: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Mnist,
            mnist: "data/mnist".into(),
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            train_items: None,
            test_items: None,
            corpus_train: "data/text/train.txt".into(),
            corpus_test: "data/text/test.txt".into(),
            vocab: 2000,
            train_sentences: None,
            test_sentences: None,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            t_steps: t.t_steps,
            beta_phi: t.beta_phi,
            beta_theta: t.beta_theta,
            weight_updates_per_iter: t.weight_updates_per_iter,
            optimizer: match t.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam,
                OptimizerName::Adamw => OptimizerKind::AdamW { decay: t.weight_decay },
            },
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.experiment.seed,
            categorical_step: t.categorical_step,
        }
    }

    /// Model spec for the experiment; `input` is the feature count of the
    /// image dataset and `vocab` the tokenizer size.
    pub fn model_spec(&self, input: usize, vocab: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let variant = match self.experiment.name {
            ExperimentKind::ClassifyM1 => Some(Variant::M1),
            ExperimentKind::ClassifyM2 => Some(Variant::M2),
            ExperimentKind::ClassifyM3 => Some(Variant::M3),
            _ => None,
        };
        let spec = match (variant, self.experiment.name) {
            (Some(variant), _) => ModelSpec::Classifier {
                variant,
                input,
                width: m.width,
                hidden: m.hidden,
                classes: 10,
                trainable_sigma: m.trainable_sigma,
            },
            (None, ExperimentKind::Vae) => ModelSpec::Vae {
                input,
                enc_layers: m.enc_layers,
                dec_layers: m.dec_layers,
                width: m.width,
                latent: m.latent,
            },
            _ => ModelSpec::CausalLm {
                vocab,
                d_model: m.d_model,
                ffn_hidden: m.ffn_hidden,
                max_len: m.max_len,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every value that does not depend on the data files.
    pub fn validate(&self) -> Result<()> {
        let train = self.train_config();
        if self.experiment.trainer == TrainerKind::Bp {
            if !(train.beta_theta > 0.0 && train.beta_theta.is_finite()) {
                return Err(Error::Invalid("train.beta_theta must be positive".into()));
            }
            if train.batch_size == 0 || train.epochs == 0 {
                return Err(Error::Invalid("train.batch_size and train.epochs must be at least 1".into()));
            }
        } else {
            train.validate()?;
        }
        if self.experiment.trainer == TrainerKind::PcFtilde && !self.model.trainable_sigma {
            return Err(Error::Invalid(
                "experiment.trainer = pc-ftilde needs model.trainable_sigma = true".into(),
            ));
        }
        if self.model.trainable_sigma && !self.is_classifier() {
            return Err(Error::Invalid(
                "model.trainable_sigma is only supported for classify experiments".into(),
            ));
        }
        if self.experiment.name == ExperimentKind::Lm {
            if self.data.vocab < 4 {
                return Err(Error::Invalid("data.vocab must be at least 4".into()));
            }
            if self.train.eval_every == 0 {
                return Err(Error::Invalid("train.eval_every must be at least 1".into()));
            }
        }
        self.model_spec(784, self.data.vocab.max(4)).map(|_| ())
    }

    fn is_classifier(&self) -> bool {
        matches!(
            self.experiment.name,
            ExperimentKind::ClassifyM1 | ExperimentKind::ClassifyM2 | ExperimentKind::ClassifyM3
        )
    }

    fn loss(&self) -> Loss {
        match self.experiment.name {
            ExperimentKind::ClassifyM1 => Loss::Mse,
            ExperimentKind::ClassifyM2 | ExperimentKind::ClassifyM3 | ExperimentKind::Lm => Loss::CrossEntropy,
            ExperimentKind::Vae => Loss::VaeElbo,
        }
    }
}

/// Loaded datasets for one experiment.
pub enum Data {
    Images { train: Dataset, test: Dataset },
    Text {
        tokenizer: Tokenizer,
        train: Vec<Vec<usize>>,
        test: Vec<Vec<usize>>,
    },
}

/// Loads the data an experiment needs. Token models reuse `tokenizer` when
/// given, otherwise build one from the training corpus.
pub fn load_data(cfg: &RunConfig, tokenizer: Option<Tokenizer>) -> Result<Data> {
    let d = &cfg.data;
    if cfg.experiment.name == ExperimentKind::Lm {
        let mut train = data::load_corpus(&d.corpus_train)?;
        let mut test = data::load_corpus(&d.corpus_test)?;
        if let Some(n) = d.train_sentences {
            train.truncate(n);
        }
        if let Some(n) = d.test_sentences {
            test.truncate(n);
        }
        let tokenizer = match tokenizer {
            Some(t) => t,
            None => data::build_vocab(&train.join("\n"), d.vocab)?,
        };
        let enc = |v: &[String]| v.iter().map(|s| tokenizer.encode(s)).collect::<Vec<_>>();
        let (train, test) = (enc(&train), enc(&test));
        return Ok(Data::Text { tokenizer, train, test });
    }
    let (train, test) = match d.dataset {
        DatasetName::Mnist => (
            data::load_mnist_dir(&d.mnist, "train")?,
            data::load_mnist_dir(&d.mnist, "t10k")?,
        ),
        DatasetName::Cifar10 => {
            let train: Vec<&Path> = d.cifar_train.iter().map(PathBuf::as_path).collect();
            let test: Vec<&Path> = d.cifar_test.iter().map(PathBuf::as_path).collect();
            (data::load_cifar10(&train)?, data::load_cifar10(&test)?)
        }
    };
    let train = d.train_items.map_or(train.clone(), |n| train.take(n));
    let test = d.test_items.map_or(test.clone(), |n| test.take(n));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("data: empty train or test split".into()));
    }
    Ok(Data::Images { train, test })
}

/// Derives an independent seed for a named purpose.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
}

enum Learner {
    Bp(BpTrainer),
    Pc(PcTrainer),
}

#[derive(Default)]
struct Accum {
    loss: f64,
    energy: f64,
    layers: Vec<f64>,
    n: usize,
}

impl Accum {
    fn add(&mut self, loss: f64, energy: Option<&crate::distributions::EnergyReport>) {
        self.loss += loss;
        if let Some(e) = energy {
            self.energy += e.total;
            if self.layers.len() != e.per_layer.len() {
                self.layers = vec![0.0; e.per_layer.len()];
            }
            for (a, b) in self.layers.iter_mut().zip(&e.per_layer) {
                *a += b;
            }
        }
        self.n += 1;
    }

    fn take(&mut self, pc: bool) -> (f64, Option<f64>, Vec<f64>) {
        let n = self.n.max(1) as f64;
        let out = (
            self.loss / n,
            pc.then_some(self.energy / n),
            self.layers.iter().map(|v| v / n).collect(),
        );
        *self = Accum::default();
        out
    }
}

impl Learner {
    fn new(cfg: &RunConfig, net: &Network) -> Result<Self> {
        let tc = cfg.train_config();
        Ok(match cfg.experiment.trainer.mode() {
            None => Learner::Bp(BpTrainer::new(cfg.loss(), tc.optimizer, tc.beta_theta)?),
            Some(mode) => Learner::Pc(PcTrainer::new(net, tc, mode)?),
        })
    }

    fn step(&mut self, net: &mut Network, feed: &Feed, acc: &mut Accum) -> Result<()> {
        match self {
            Learner::Bp(t) => acc.add(t.train_step(net, feed)?, None),
            Learner::Pc(t) => {
                let m = t.train_step(net, feed)?;
                acc.add(m.loss, Some(&m.settled));
            }
        }
        Ok(())
    }
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence(format!("non-finite value in {op}")),
        Error::Domain(msg) => Error::Divergence(msg),
        other => other,
    }
}

/// Test-set metrics for an unclamped forward pass: `(test_loss, accuracy,
/// perplexity)`.
pub fn evaluate(net: &Network, cfg: &RunConfig, data: &Data) -> Result<(f64, Option<f64>, Option<f64>)> {
    const CHUNK: usize = 500;
    match data {
        Data::Images { test, .. } => {
            let idx: Vec<usize> = (0..test.len()).collect();
            if cfg.experiment.name == ExperimentKind::Vae {
                let mut sse = 0.0;
                for c in idx.chunks(CHUNK) {
                    let b = test.batch(c, 10)?;
                    let r = crate::latent::reconstruct(net, &b.inputs)?;
                    sse += r.sub(&b.inputs)?.data().iter().map(|v| v * v).sum::<f64>();
                }
                return Ok((sse / test.len() as f64, None, None));
            }
            let (mut loss, mut correct) = (0.0, 0usize);
            for c in idx.chunks(CHUNK) {
                let b = test.batch(c, 10)?;
                let feed = b.feed();
                loss += bp_loss(net, &feed, cfg.loss())? * c.len() as f64;
                let out = crate::pc::predict(net, &feed)?;
                correct += out.argmax_rows().iter().zip(&b.labels).filter(|(p, l)| p == l).count();
            }
            let n = test.len() as f64;
            Ok((loss / n, Some(correct as f64 / n), None))
        }
        Data::Text { tokenizer, test, .. } => {
            let batches = data::batch_lm(test, 32, cfg.model.max_len, 0)?;
            let (mut nll, mut tokens) = (0.0, 0.0);
            for b in &batches {
                let feed = b.feed(tokenizer.len())?;
                let out = crate::pc::predict(net, &feed)?;
                let (n, t) = masked_nll(&out, &feed)?;
                nll += n;
                tokens += t;
            }
            let mean = nll / tokens.max(1.0);
            Ok((mean, None, Some(mean.exp())))
        }
    }
}

/// Summed negative log-likelihood of the targets and the number of scored
/// positions.
pub fn masked_nll(probs: &Tensor, feed: &Feed) -> Result<(f64, f64)> {
    let target = feed.target.as_ref().ok_or_else(|| Error::Invalid("feed has no target".into()))?;
    let v = probs.last_dim();
    let mut nll = 0.0;
    let mut count = 0.0;
    for r in 0..probs.rows() {
        let w = feed.row_mask.as_ref().map_or(1.0, |m| m.data()[r]);
        if w == 0.0 {
            continue;
        }
        let t = target.row(r);
        let p = probs.row(r);
        let ce: f64 = (0..v).filter(|&j| t[j] > 0.0).map(|j| -t[j] * p[j].max(crate::distributions::PROB_FLOOR).ln()).sum();
        nll += w * ce;
        count += w;
    }
    Ok((nll, count))
}

pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub net: Network,
    pub meta: serde_json::Value,
    pub summary: serde_json::Value,
}

/// Trains per `cfg`, evaluating every epoch (every `eval_every` steps and at
/// epoch ends for language models). With `out` set, writes `metrics.csv`,
/// `summary.json` and `model.gpck` there. `progress` sees each record.
pub fn run(cfg: &RunConfig, out: Option<&Path>, progress: &mut dyn FnMut(&MetricsRecord)) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_data(cfg, None)?;
    let (input, vocab) = match &data {
        Data::Images { train, .. } => (train.features, 4),
        Data::Text { tokenizer, .. } => (784, tokenizer.len()),
    };
    let spec = cfg.model_spec(input, vocab)?;
    let seed = cfg.experiment.seed;
    let mut net = Network::new(spec, seed)?;
    let mut learner = Learner::new(cfg, &net)?;
    let pc = cfg.experiment.trainer.mode().is_some();
    let started = Instant::now();
    let mut records = Vec::new();
    let mut acc = Accum::default();
    let mut step = 0usize;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2, 0));
    let half_latent = net.bottleneck().map(|b| net.layers[b].width / 2);

    let mut record = |net: &Network, epoch: usize, step: usize, acc: &mut Accum, records: &mut Vec<MetricsRecord>| -> Result<()> {
        let (train_loss, energy, layer_energies) = acc.take(pc);
        let (test_loss, accuracy, perplexity) = evaluate(net, cfg, &data)?;
        let r = MetricsRecord {
            epoch,
            step,
            energy,
            layer_energies,
            train_loss,
            test_loss,
            accuracy,
            perplexity,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        progress(&r);
        records.push(r);
        Ok(())
    };

    for epoch in 1..=cfg.train.epochs {
        let order_seed = sub_seed(seed, 1, epoch as u64);
        match &data {
            Data::Images { train, .. } => {
                for idx in data::batch_indices(train.len(), cfg.train.batch_size, order_seed) {
                    let b = train.batch(&idx, 10)?;
                    let mut feed = b.feed();
                    if let Some(h) = half_latent {
                        let z: Vec<f64> = (0..idx.len() * h).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
                        feed.noise = Some(Tensor::new(vec![idx.len(), h], z)?);
                        feed.target = Some(b.inputs.clone());
                    }
                    learner.step(&mut net, &feed, &mut acc).map_err(divergence)?;
                    step += 1;
                }
                record(&net, epoch, step, &mut acc, &mut records)?;
            }
            Data::Text { tokenizer, train, .. } => {
                let batches = data::batch_lm(train, cfg.train.batch_size, cfg.model.max_len, order_seed)?;
                let last = batches.len();
                for (i, b) in batches.iter().enumerate() {
                    let feed = b.feed(tokenizer.len())?;
                    learner.step(&mut net, &feed, &mut acc).map_err(divergence)?;
                    step += 1;
                    if step.is_multiple_of(cfg.train.eval_every) || i + 1 == last {
                        record(&net, epoch, step, &mut acc, &mut records)?;
                    }
                }
            }
        }
    }

    let mut meta = serde_json::json!({ "config": cfg });
    if let Data::Text { tokenizer, .. } = &data {
        meta["vocab"] = serde_json::json!(tokenizer.words());
    }
    let summary = serde_json::json!({
        "experiment": cfg.experiment.name,
        "trainer": cfg.experiment.trainer,
        "seed": seed,
        "param_count": net.param_count(),
        "config": cfg,
        "final": records.last(),
        "wall_clock_s": started.elapsed().as_secs_f64(),
        "eval_wall_clock_s": records.iter().map(|r| r.wall_clock_s).collect::<Vec<_>>(),
    });
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("metrics.csv"), metrics::to_csv(&records)?)?;
        let s = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), s + "\n")?;
        checkpoint::save(&dir.join("model.gpck"), &net, &meta)?;
    }
    Ok(RunOutcome {
        records,
        net,
        meta,
        summary,
    })
}

/// Rebuilds the run config and tokenizer stored in checkpoint metadata.
pub fn config_from_meta(meta: &serde_json::Value) -> Result<(RunConfig, Option<Tokenizer>)> {
    let cfg: RunConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata has no usable run config: {e}")))?;
    let tok = match meta.get("vocab") {
        Some(v) => {
            let words: Vec<String> =
                serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint vocabulary: {e}")))?;
            Some(Tokenizer::from_words(words))
        }
        None => None,
    };
    Ok((cfg, tok))
}

/// Evaluates a stored network on the test split named by `cfg`.
pub fn evaluate_checkpoint(net: &Network, cfg: &RunConfig, tokenizer: Option<Tokenizer>) -> Result<MetricsRecord> {
    let data = load_data(cfg, tokenizer)?;
    let expected = match &data {
        Data::Images { train, .. } => cfg.model_spec(train.features, 4)?,
        Data::Text { tokenizer, .. } => cfg.model_spec(784, tokenizer.len())?,
    };
    if expected != net.spec {
        return Err(Error::Invalid(format!(
            "checkpoint model {:?} does not match the dataset/config ({:?})",
            net.spec, expected
        )));
    }
    let (test_loss, accuracy, perplexity) = evaluate(net, cfg, &data)?;
    Ok(MetricsRecord {
        epoch: 0,
        step: 0,
        energy: None,
        layer_energies: Vec::new(),
        train_loss: f64::NAN,
        test_loss,
        accuracy,
        perplexity,
        wall_clock_s: 0.0,
    })
}
