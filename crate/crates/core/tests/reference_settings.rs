//! Architectures, protocols and hyperparameters taken as fixed reference
//! settings.

mod common;

use common::*;
use gpc::data::{self, one_hot};
use gpc::distributions::{FamilyKind, LayerEnergy};
use gpc::experiment::{RunConfig, TrainerKind};
use gpc::model::{build_m1, build_m2, build_vae, Network};
use gpc::pc::{self, EnergyMode, Feed};

fn read_config(name: &str) -> RunConfig {
    let text = std::fs::read_to_string(repo_root().join("configs").join(name)).unwrap();
    let cfg: RunConfig = toml::from_str(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn m2_layer_families() {
    let net = Network::new(build_m2(512, 3), 0).unwrap();
    let fams: Vec<FamilyKind> = net.layers[1..].iter().map(|l| l.family).collect();
    assert_eq!(
        fams,
        [
            FamilyKind::GaussianIdentity,
            FamilyKind::GaussianIdentity,
            FamilyKind::GaussianIdentity,
            FamilyKind::Categorical
        ]
    );
    let energies: Vec<LayerEnergy> = (1..net.layers.len())
        .map(|l| pc::layer_energy(&net, EnergyMode::FKl, l).unwrap())
        .collect();
    assert_eq!(energies[3], LayerEnergy::Categorical);
    assert!(energies[..3].iter().all(|e| *e == LayerEnergy::GaussianKl));
}

// With squared errors summed without a one-half, every layer energy under F
// is exactly twice its KL counterpart, so the two modes share minimisers and
// produce identical value trajectories when the F step size is halved.
#[test]
fn m1_energies_agree_between_modes() {
    let mut r = rng(20);
    let net = Network::new(build_m1(16, 3), 1).unwrap();
    for _ in 0..10 {
        let x = uniform(&mut r, &[4, 784], 0.0, 1.0);
        let mut state = pc::forward_init(&net, &Feed::dense(x, None)).unwrap();
        state.clamp_output(&uniform(&mut r, &[4, 10], -1.0, 1.0)).unwrap();
        for l in 1..4 {
            let shape = state.phi[l].shape().to_vec();
            state.phi[l] = uniform(&mut r, &shape, -1.0, 1.0);
        }
        let f = pc::energies(&net, &state, EnergyMode::F).unwrap();
        let kl = pc::energies(&net, &state, EnergyMode::FKl).unwrap();
        for (a, b) in f.per_layer.iter().zip(&kl.per_layer) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let mut sf = state.clone();
        let mut skl = state.clone();
        for _ in 0..8 {
            pc::infer_step(&net, &mut sf, EnergyMode::F, 0.025).unwrap();
            pc::infer_step(&net, &mut skl, EnergyMode::FKl, 0.05).unwrap();
        }
        for (a, b) in sf.phi.iter().zip(&skl.phi) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn vae_noise_is_drawn_once_per_iteration() {
    let mut r = rng(21);
    let net = Network::new(build_vae(2, 2, 32, 8).unwrap(), 2).unwrap();
    let x = uniform(&mut r, &[4, 784], 0.0, 1.0);
    let mut feed = Feed::dense(x.clone(), Some(x.clone()));
    feed.noise = Some(uniform(&mut r, &[4, 4], -2.0, 2.0));
    let mut state = pc::forward_init(&net, &feed).unwrap();
    state.clamp_output(&x).unwrap();
    let drawn = state.noise.clone();
    for _ in 0..32 {
        pc::infer_step(&net, &mut state, EnergyMode::FKl, 0.05).unwrap();
        assert_eq!(state.noise, drawn);
    }
    // The value updates themselves carry no hidden randomness.
    let mut again = pc::forward_init(&net, &feed).unwrap();
    again.clamp_output(&x).unwrap();
    for _ in 0..32 {
        pc::infer_step(&net, &mut again, EnergyMode::FKl, 0.05).unwrap();
    }
    assert_eq!(again.phi, state.phi);
}

#[test]
fn full_mnist_training_split() {
    let Ok(dir) = std::env::var("GPC_MNIST_FULL") else {
        println!("skipped: set GPC_MNIST_FULL to a directory holding the official MNIST files");
        return;
    };
    let train = data::load_mnist_dir(std::path::Path::new(&dir), "train").unwrap();
    assert_eq!(train.len(), 60000);
    assert_eq!(train.features, 784);
}

#[test]
fn bundled_mnist_subsets() {
    let root = repo_root().join("data/mnist");
    let train = data::load_mnist_dir(&root, "train").unwrap();
    let test = data::load_mnist_dir(&root, "t10k").unwrap();
    assert_eq!((train.len(), train.features), (10000, 784));
    assert_eq!((test.len(), test.features), (2000, 784));
}

#[test]
fn batch_of_eight_pads_to_longest_row() {
    let sentences: Vec<Vec<usize>> = (0..8).map(|i| (0..(i * 3 + 1)).map(|j| 4 + j % 5).collect()).collect();
    let batches = data::batch_lm(&sentences, 8, 64, 3).unwrap();
    assert_eq!(batches.len(), 1);
    let b = &batches[0];
    assert_eq!(b.ids.len(), 8);
    // Longest sentence has 22 words plus two markers.
    assert_eq!(b.width(), 24);
    assert!(b.ids.iter().all(|row| row.len() == 24));
    let feed = b.feed(16).unwrap();
    assert_eq!(feed.input.shape(), &[8, 23]);
    assert_eq!(feed.target.unwrap().shape(), &[8 * 23, 16]);
}

#[test]
fn classification_defaults_accepted() {
    let cfg = read_config("classify-m2-pc-fkl.toml");
    assert_eq!(cfg.experiment.trainer, TrainerKind::PcFkl);
    let t = cfg.train_config();
    assert_eq!(t.t_steps, 32);
    assert_eq!(t.beta_theta, 1e-4);
    assert_eq!(t.beta_phi, 0.05);
    t.validate().unwrap();
}

#[test]
fn transformer_best_values_accepted() {
    let cfg = read_config("lm-pc-fkl.toml");
    let t = cfg.train_config();
    assert_eq!((t.t_steps, t.beta_phi, t.beta_theta, t.batch_size), (5, 0.5, 0.0008, 8));
    let f = read_config("lm-pc-f.toml").train_config();
    assert_eq!((f.t_steps, f.beta_phi, f.beta_theta), (4, 0.015625, 0.0064));
    assert_eq!(read_config("lm-bp.toml").train_config().beta_theta, 0.0016);
}

#[test]
fn categorical_targets_are_one_hot() {
    let t = one_hot(&[3, 0], 4).unwrap();
    assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn m3_has_two_categorical_layers() {
    let net = Network::new(gpc::model::build_m3(16, 3), 0).unwrap();
    let n = net.layers.iter().filter(|l| l.family == FamilyKind::Categorical).count();
    assert_eq!(n, 2);
}
