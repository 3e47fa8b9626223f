//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use advcorr_core::attacks::{AttackConfig, AttackKind};
use advcorr_core::data::{load_idx, make_synthetic};
use advcorr_core::finetune::FinetuneConfig;
use advcorr_core::{Error, FloatEncoding, LabeledDataset, Result, SyntheticConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Uncompressed IDX files under `dir` with the standard MNIST names.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        train: SyntheticConfig,
        test: SyntheticConfig,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mnist {
            dir: PathBuf::from("data/mnist"),
            train_limit: Some(10_000),
            test_limit: None,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Mnist {
                train_limit,
                test_limit,
                ..
            } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(Error::Config("dataset limits must be at least 1".into()));
                }
                Ok(())
            }
            DatasetConfig::Synthetic { train, test } => {
                train.validate()?;
                test.validate()?;
                if train.input_dim != test.input_dim || train.num_classes() != test.num_classes() {
                    return Err(Error::Config(
                        "synthetic train and test sets must share input_dim and class count".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetConfig::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let read =
                    |images: &str, labels: &str, limit: &Option<usize>| -> Result<LabeledDataset> {
                        let data = load_idx(&dir.join(images), &dir.join(labels))?;
                        Ok(match limit {
                            Some(n) => data.truncated(*n),
                            None => data,
                        })
                    };
                Ok((
                    read(
                        "train-images-idx3-ubyte",
                        "train-labels-idx1-ubyte",
                        train_limit,
                    )?,
                    read(
                        "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte",
                        test_limit,
                    )?,
                ))
            }
            DatasetConfig::Synthetic { train, test } => {
                Ok((make_synthetic(train)?, make_synthetic(test)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPreset {
    MnistPgd,
    CifarPgd,
    Fgsm,
}

/// An attack preset with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub preset: AttackPreset,
    pub epsilon: Option<f64>,
    pub step_size: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            preset: AttackPreset::MnistPgd,
            epsilon: None,
            step_size: None,
            iterations: None,
            seed: 0,
        }
    }
}

impl AttackSection {
    pub fn resolve(&self) -> Result<AttackConfig> {
        let mut cfg = match self.preset {
            AttackPreset::MnistPgd => AttackConfig::mnist_pgd(),
            AttackPreset::CifarPgd => AttackConfig::cifar_pgd(),
            AttackPreset::Fgsm => AttackConfig::fgsm(self.epsilon.unwrap_or(0.1)),
        };
        if let Some(eps) = self.epsilon {
            cfg.epsilon = eps;
            if cfg.kind == AttackKind::Fgsm && self.step_size.is_none() {
                cfg.step_size = eps.max(f64::MIN_POSITIVE);
            }
        }
        if let Some(step) = self.step_size {
            cfg.step_size = step;
        }
        if let Some(iters) = self.iterations {
            cfg.iterations = iters;
        }
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attacks used to score a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pgd: AttackSection,
    /// Without an explicit epsilon, FGSM uses the PGD radius.
    pub fgsm: AttackSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pgd: AttackSection::default(),
            fgsm: AttackSection {
                preset: AttackPreset::Fgsm,
                ..AttackSection::default()
            },
        }
    }
}

impl EvalSection {
    /// `(pgd, fgsm)`.
    pub fn resolve(&self) -> Result<(AttackConfig, AttackConfig)> {
        let pgd = resolve_kind(&self.pgd, AttackKind::Pgd, "eval.pgd")?;
        let mut fgsm = self.fgsm.clone();
        fgsm.epsilon = fgsm.epsilon.or(Some(pgd.epsilon));
        let fgsm = resolve_kind(&fgsm, AttackKind::Fgsm, "eval.fgsm")?;
        Ok((pgd, fgsm))
    }
}

fn resolve_kind(section: &AttackSection, kind: AttackKind, field: &str) -> Result<AttackConfig> {
    let cfg = section.resolve()?;
    if cfg.kind != kind {
        return Err(Error::Config(format!("{field} must use a {kind:?} preset")));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden_layers: Vec<usize>,
    pub train: TrainConfig,
    /// Attack used to build the adversarial set.
    pub attack: AttackSection,
    pub adv_size: usize,
    pub eval: EvalSection,
    pub finetune: FinetuneConfig,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub checkpoint_encoding: FloatEncoding,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            hidden_layers: vec![32],
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            adv_size: 50,
            eval: EvalSection::default(),
            finetune: FinetuneConfig::default(),
            out: PathBuf::from("runs"),
            threads: None,
            checkpoint_encoding: FloatEncoding::Decimal,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.attack.seed = seed;
        self.eval.pgd.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        self.train.validate()?;
        self.adversarial_attack()?;
        self.eval.resolve()?;
        if self.adv_size == 0 {
            return Err(Error::Config("adv_size must be at least 1".into()));
        }
        self.finetune.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// The attack that builds the adversarial set; always PGD.
    pub fn adversarial_attack(&self) -> Result<AttackConfig> {
        resolve_kind(&self.attack, AttackKind::Pgd, "attack")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
