//! Mini-batch training of baseline networks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AdversarialExample;
use crate::error::{Error, Result};
use crate::nn::{Architecture, DenseLayer, LabeledDataset, Network};

/// RNG stream for parameter initialization.
const INIT_STREAM: u64 = 0;
/// RNG stream for mini-batch shuffling.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// He-style uniform initialization: weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn initialize(arch: &Architecture, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let layers = arch
        .dims()
        .windows(2)
        .map(|p| {
            let (fan_in, fan_out) = (p[0], p[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            DenseLayer::new(fan_in, fan_out, weights, vec![0.0; fan_out])
                .expect("dimensions come from a validated architecture")
        })
        .collect();
    Network::new(layers).expect("architecture chains by construction")
}

/// Trains a freshly initialized network of shape `arch` on `data`.
pub fn pretrain(arch: &Architecture, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if data.input_dim() != arch.input_dim() {
        return Err(Error::shape(arch.input_dim(), data.input_dim()));
    }
    if data.num_classes() != arch.num_classes() {
        return Err(Error::Config(format!(
            "architecture has {} outputs but the dataset has {} classes",
            arch.num_classes(),
            data.num_classes()
        )));
    }

    let mut net = initialize(arch, cfg.seed);
    let mut params = net.to_params().into_values();
    let mut optimizer = Optimizer::new(cfg, params.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = net.loss_and_grad_indices(data, batch);
            optimizer.step(&mut params, &grad);
            net.set_param_values(&params)?;
        }
    }
    Ok(net)
}

/// Same as [`pretrain`], on `train` with the adversarial inputs appended
/// under their true labels.
pub fn retrain_with_adversarial(
    arch: &Architecture,
    train: &LabeledDataset,
    adv: &[AdversarialExample],
    cfg: &TrainConfig,
) -> Result<Network> {
    pretrain(arch, &append_adversarial(train, adv)?, cfg)
}

/// `train` followed by every adversarial example.
pub fn append_adversarial(
    train: &LabeledDataset,
    adv: &[AdversarialExample],
) -> Result<LabeledDataset> {
    let mut combined = train.clone();
    for ex in adv {
        combined.push(&ex.x_tilde, ex.y)?;
    }
    Ok(combined)
}

/// Fraction of points whose prediction matches the label.
pub fn evaluate_accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for (x, y) in data.iter() {
        if net.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, dim: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: cfg.learning_rate,
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.learning_rate,
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - Self::BETA1.powi(*t);
                let bc2 = 1.0 - Self::BETA2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
    }
}
