//! Fixtures shared by the benchmarks: MNIST-shaped networks and data
//! without needing the MNIST files.

use advcorr_core::attacks::AdversarialExample;
use advcorr_core::data::make_synthetic;
use advcorr_core::trainer::initialize;
use advcorr_core::{Architecture, LabeledDataset, Network, SyntheticConfig, SyntheticKind};

/// A freshly initialized network with the given layer sizes.
pub fn network(dims: &[usize], seed: u64) -> Network {
    initialize(&Architecture::new(dims.to_vec()).expect("valid dims"), seed)
}

/// Gaussian blobs in `[0, 1]^input_dim`, `n_per_class` points per class.
pub fn blobs(
    input_dim: usize,
    num_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> LabeledDataset {
    make_synthetic(&SyntheticConfig {
        kind: SyntheticKind::GaussianBlobs { num_classes },
        n_per_class,
        noise_std: 0.3,
        seed,
        input_dim,
    })
    .expect("valid synthetic config")
}

/// The first `n` points of `data`, used unperturbed as adversarial examples.
pub fn pseudo_adversarial(data: &LabeledDataset, n: usize) -> Vec<AdversarialExample> {
    data.iter()
        .take(n)
        .enumerate()
        .map(|(i, (x, y))| AdversarialExample {
            x_tilde: x.to_vec(),
            y,
            source_index: i,
            violation_at_gen: 0.0,
        })
        .collect()
}
