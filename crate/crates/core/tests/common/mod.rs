#![allow(dead_code)]

use advcorr_core::attacks::{generate_adv_dataset, AdversarialExample, AttackConfig, AttackKind};
use advcorr_core::cuts::{CutMeta, SparseVector};
use advcorr_core::data::{make_synthetic, SyntheticConfig, SyntheticKind};
use advcorr_core::trainer::{pretrain, TrainConfig};
use advcorr_core::{Architecture, Cut, CutKind, DenseLayer, LabeledDataset, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Network with uniform random weights and biases.
pub fn random_network(dims: &[usize], rng: &mut impl Rng) -> Network {
    let layers = dims
        .windows(2)
        .map(|p| {
            let scale = 1.5 / (p[0] as f64).sqrt();
            let w = (0..p[0] * p[1])
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            let b = (0..p[1]).map(|_| rng.random_range(-0.3..0.3)).collect();
            DenseLayer::new(p[0], p[1], w, b).unwrap()
        })
        .collect();
    Network::new(layers).unwrap()
}

pub fn random_point(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()
}

pub fn cut(g: &[f64], rhs: f64) -> Cut {
    Cut {
        normal: SparseVector::from_dense(g),
        rhs,
        kind: CutKind::Loss,
        meta: CutMeta {
            iterate: 0,
            adv_index: None,
            competing_label: None,
        },
    }
}

pub struct QpCase {
    pub anchor: Vec<f64>,
    pub cuts: Vec<Cut>,
    /// A point satisfying every cut.
    pub inside: Vec<f64>,
}

/// Anchor plus cuts that all hold at a hidden point, so the polyhedron is
/// nonempty. Some cuts pass exactly through the hidden point.
pub fn random_feasible_qp(dim: usize, num_cuts: usize, rng: &mut impl Rng) -> QpCase {
    let anchor: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inside: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cuts = (0..num_cuts)
        .map(|_| {
            let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let slack = if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.0..0.5)
            };
            let r = g.iter().zip(&inside).map(|(a, b)| a * b).sum::<f64>() + slack;
            cut(&g, r)
        })
        .collect();
    QpCase {
        anchor,
        cuts,
        inside,
    }
}

pub fn max_residual(cuts: &[Cut], w: &[f64]) -> f64 {
    cuts.iter()
        .map(|c| c.residual(w))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// A small trained classifier with a PGD adversarial set.
pub struct SmallProblem {
    pub net: Network,
    pub train: LabeledDataset,
    pub adv: Vec<AdversarialExample>,
}

pub fn small_problem(
    seed: u64,
    input_dim: usize,
    hidden: usize,
    classes: usize,
    per_label: usize,
) -> SmallProblem {
    let train = make_synthetic(&SyntheticConfig {
        kind: SyntheticKind::GaussianBlobs {
            num_classes: classes,
        },
        n_per_class: 60,
        noise_std: 0.5,
        seed,
        input_dim,
    })
    .unwrap();
    let arch = Architecture::new(vec![input_dim, hidden, classes]).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    };
    let net = pretrain(&arch, &train, &cfg).unwrap();
    let attack = AttackConfig {
        kind: AttackKind::Pgd,
        epsilon: 0.15,
        step_size: 0.02,
        iterations: 20,
        seed,
    };
    let adv = generate_adv_dataset(&net, &train, per_label * classes, &attack).unwrap();
    SmallProblem { net, train, adv }
}
