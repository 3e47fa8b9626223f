//! Adversarial data generation and robustness measurement.
//!
//! FGSM and PGD operate on the ℓ∞ ball of radius `epsilon` around a clean
//! input, intersected with the pixel box `[0, 1]^m`. PGD starts from the
//! clean point (no random start) and clips after every step.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cuts::margin_violation;
use crate::error::{Error, LabelShortfall, Result};
use crate::nn::{LabeledDataset, Network};

/// A misclassified perturbation of a correctly classified training point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    #[serde(rename = "x")]
    pub x_tilde: Vec<f64>,
    pub y: usize,
    pub source_index: usize,
    #[serde(rename = "violation")]
    pub violation_at_gen: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// 50 PGD steps of 0.01 inside an ℓ∞ ball of radius 0.1.
    pub fn mnist_pgd() -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon: 0.1,
            step_size: 0.01,
            iterations: 50,
            seed: 0,
        }
    }

    /// 3 PGD steps of 3/255 inside an ℓ∞ ball of radius 8/255.
    pub fn cifar_pgd() -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon: 8.0 / 255.0,
            step_size: 3.0 / 255.0,
            iterations: 3,
            seed: 0,
        }
    }

    /// Single-step FGSM with the given radius.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: epsilon.max(f64::MIN_POSITIVE),
            iterations: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "attack radius must be a nonnegative number, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("attack step_size must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack iterations must be at least 1".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_unit_box(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("attack input must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `clip(x + epsilon * sign(∇_x loss), 0, 1)`.
pub fn fgsm(net: &Network, x: &[f64], y: usize, epsilon: f64) -> Result<Vec<f64>> {
    check_unit_box(x)?;
    let grad = net.grad_loss_input(x, y)?;
    Ok(x.iter()
        .zip(&grad)
        .map(|(&xi, &g)| (xi + epsilon * sign(g)).clamp(0.0, 1.0))
        .collect())
}

/// Projected signed-gradient ascent on the loss, started at `x`.
pub fn pgd(net: &Network, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::Config("pgd called with a non-PGD config".into()));
    }
    check_unit_box(x)?;
    let lower: Vec<f64> = x.iter().map(|&v| (v - cfg.epsilon).max(0.0)).collect();
    let upper: Vec<f64> = x.iter().map(|&v| (v + cfg.epsilon).min(1.0)).collect();
    let mut cur = x.to_vec();
    for _ in 0..cfg.iterations {
        let grad = net.grad_loss_input(&cur, y)?;
        for (j, c) in cur.iter_mut().enumerate() {
            *c = (*c + cfg.step_size * sign(grad[j])).clamp(lower[j], upper[j]);
        }
    }
    Ok(cur)
}

/// Runs the attack described by `cfg`.
pub fn attack(net: &Network, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(net, x, y, cfg.epsilon),
        AttackKind::Pgd => pgd(net, x, y, cfg),
    }
}

/// Accuracy of `net` on the attacked version of every point in `data`.
pub fn attack_accuracy(net: &Network, data: &LabeledDataset, cfg: &AttackConfig) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let hits: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|n| {
            let (x, y) = (data.input(n), data.label(n));
            let adv = attack(net, x, y, cfg)?;
            Ok(net.predict(&adv)? == y)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Builds an adversarial set of `size` examples with `size / C` per label.
///
/// Every correctly classified training point is attacked with PGD; attacked
/// points that end up misclassified are ranked per label by their margin
/// violation, largest first.
pub fn generate_adv_dataset(
    net: &Network,
    train: &LabeledDataset,
    size: usize,
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample>> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::Config(
            "adversarial sets are generated with a PGD config".into(),
        ));
    }
    let classes = net.num_classes();
    if size == 0 || size % classes != 0 {
        return Err(Error::Config(format!(
            "adversarial set size {size} must be a positive multiple of {classes} classes"
        )));
    }
    if train.input_dim() != net.input_dim() {
        return Err(Error::shape(net.input_dim(), train.input_dim()));
    }
    let per_label = size / classes;

    let scored: Vec<Option<(usize, f64)>> = (0..train.len())
        .into_par_iter()
        .map(|n| {
            let (x, y) = (train.input(n), train.label(n));
            if net.predict(x)? != y {
                return Ok(None);
            }
            let adv = pgd(net, x, y, cfg)?;
            let violation = margin_violation(&net.forward(&adv)?, y)?;
            Ok((violation > 0.0).then_some((n, violation)))
        })
        .collect::<Result<_>>()?;

    let mut by_label: Vec<Vec<(usize, f64)>> = vec![Vec::new(); classes];
    for (n, v) in scored.into_iter().flatten() {
        by_label[train.label(n)].push((n, v));
    }
    let shortfall: Vec<LabelShortfall> = by_label
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() < per_label)
        .map(|(label, c)| LabelShortfall {
            label,
            required: per_label,
            available: c.len(),
        })
        .collect();
    if !shortfall.is_empty() {
        return Err(Error::Shortfall(shortfall));
    }

    let mut out = Vec::with_capacity(size);
    for candidates in &mut by_label {
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        for &(n, violation) in &candidates[..per_label] {
            let (x, y) = (train.input(n), train.label(n));
            out.push(AdversarialExample {
                x_tilde: pgd(net, x, y, cfg)?,
                y,
                source_index: n,
                violation_at_gen: violation,
            });
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of the fraction of `B_ε(x) ∩ [0, 1]^m` classified
/// like `x`.
pub fn estimate_resilience(
    net: &Network,
    x: &[f64],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Config("epsilon must be nonnegative".into()));
    }
    let reference = net.predict(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds: Vec<(f64, f64)> = x
        .iter()
        .map(|&v| ((v - epsilon).max(0.0), (v + epsilon).min(1.0)))
        .collect();
    let mut sample = vec![0.0; x.len()];
    let mut same = 0usize;
    for _ in 0..n_samples {
        for (s, &(lo, hi)) in sample.iter_mut().zip(&bounds) {
            *s = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
        }
        if net.predict(&sample)? == reference {
            same += 1;
        }
    }
    Ok(same as f64 / n_samples as f64)
}

/// Generation metadata stored next to an adversarial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialSetHeader {
    pub epsilon: f64,
    pub attack: AttackConfig,
    pub model_checksum: String,
    pub num_classes: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// On-disk adversarial set: a header plus the examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialSet {
    pub header: AdversarialSetHeader,
    pub examples: Vec<AdversarialExample>,
}

impl AdversarialSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::testing::{random_input, random_network};
    use crate::nn::DenseLayer;

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Two classes: logit 0 = x0 - x1, logit 1 = x1 - x0 + 0.1.
    fn affine_pair() -> Network {
        Network::new(vec![DenseLayer::new(
            2,
            2,
            vec![1.0, -1.0, -1.0, 1.0],
            vec![0.0, 0.1],
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn fgsm_with_zero_gradient_returns_input() {
        let net = Network::new(vec![DenseLayer::zeros(3, 2)]).unwrap();
        let x = [0.2, 0.5, 0.9];
        assert_eq!(fgsm(&net, &x, 0, 0.1).unwrap(), x.to_vec());
    }

    #[test]
    fn fgsm_matches_hand_gradient() {
        // d loss / d logits = softmax - e_0 = (p0 - 1, p1) with p1 > 0, so
        // d loss / dx = (p0 - 1) (1, -1) + p1 (-1, 1) = -(2 p1) (1, -1)
        // -> sign = (-1, +1).
        let out = fgsm(&affine_pair(), &[0.5, 0.5], 0, 0.1).unwrap();
        assert_eq!(out, vec![0.4, 0.6]);
        let clipped = fgsm(&affine_pair(), &[0.05, 0.97], 0, 0.1).unwrap();
        assert_eq!(clipped, vec![0.0, 1.0]);
    }

    #[test]
    fn attacks_stay_in_the_ball_and_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..20 {
            let net = random_network(&[5, 8, 3], seed);
            let x = random_input(5, &mut rng);
            let cfg = AttackConfig {
                iterations: 7,
                step_size: 0.03,
                ..AttackConfig::mnist_pgd()
            };
            for out in [
                fgsm(&net, &x, 1, 0.1).unwrap(),
                pgd(&net, &x, 1, &cfg).unwrap(),
            ] {
                assert!(linf(&out, &x) <= 0.1 + 1e-15);
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn single_large_pgd_step_equals_fgsm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let net = random_network(&[4, 6, 3], seed);
            let x = random_input(4, &mut rng);
            let cfg = AttackConfig {
                kind: AttackKind::Pgd,
                epsilon: 0.1,
                step_size: 0.25,
                iterations: 1,
                seed: 0,
            };
            assert_eq!(
                pgd(&net, &x, 2, &cfg).unwrap(),
                fgsm(&net, &x, 2, 0.1).unwrap()
            );
        }
    }

    #[test]
    fn presets_carry_published_settings() {
        let m = AttackConfig::mnist_pgd();
        assert_eq!((m.iterations, m.step_size, m.epsilon), (50, 0.01, 0.1));
        let c = AttackConfig::cifar_pgd();
        assert_eq!(
            (c.iterations, c.step_size, c.epsilon),
            (3, 3.0 / 255.0, 8.0 / 255.0)
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = AttackConfig::mnist_pgd();
        cfg.step_size = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = AttackConfig::mnist_pgd();
        cfg.epsilon = -0.1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let net = affine_pair();
        assert!(pgd(&net, &[0.5, 0.5], 0, &AttackConfig::fgsm(0.1)).is_err());
        assert!(fgsm(&net, &[0.5, 0.5], 7, 0.1).is_err());
    }

    #[test]
    fn zero_radius_attack_accuracy_equals_clean_accuracy() {
        let net = random_network(&[3, 5, 3], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<_> = (0..40)
            .map(|i| (random_input(3, &mut rng), i % 3))
            .collect();
        let data = LabeledDataset::from_rows(3, 3, rows).unwrap();
        let clean = crate::trainer::evaluate_accuracy(&net, &data).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::mnist_pgd()
        };
        assert_eq!(attack_accuracy(&net, &data, &cfg).unwrap(), clean);
        assert_eq!(
            attack_accuracy(&net, &data, &AttackConfig::fgsm(0.0)).unwrap(),
            clean
        );
    }

    #[test]
    fn attacked_accuracy_never_exceeds_clean_when_flips_are_found() {
        let net = affine_pair();
        // Points near the boundary flip under a 0.2 attack.
        let rows = vec![
            (vec![0.55, 0.45], 0),
            (vec![0.9, 0.1], 0),
            (vec![0.45, 0.5], 1),
            (vec![0.1, 0.9], 1),
        ];
        let data = LabeledDataset::from_rows(2, 2, rows).unwrap();
        let clean = crate::trainer::evaluate_accuracy(&net, &data).unwrap();
        let attacked = attack_accuracy(&net, &data, &AttackConfig::fgsm(0.2)).unwrap();
        assert!(attacked < clean);
        let again = attack_accuracy(&net, &data, &AttackConfig::fgsm(0.2)).unwrap();
        assert_eq!(attacked, again);
    }

    fn strip_dataset(n: usize) -> LabeledDataset {
        // Class 0 on x0 > x1 + 0.1, class 1 otherwise, for the affine pair.
        let rows = (0..n).map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let label = usize::from(t < 0.5);
            (vec![t, 1.0 - t], label)
        });
        LabeledDataset::from_rows(2, 2, rows).unwrap()
    }

    #[test]
    fn adversarial_set_has_quota_per_label_sorted_by_violation() {
        let net = affine_pair();
        let data = strip_dataset(200);
        let cfg = AttackConfig {
            epsilon: 0.15,
            step_size: 0.05,
            iterations: 5,
            ..AttackConfig::mnist_pgd()
        };
        let adv = generate_adv_dataset(&net, &data, 6, &cfg).unwrap();
        assert_eq!(adv.len(), 6);
        for label in 0..2 {
            let group: Vec<_> = adv.iter().filter(|a| a.y == label).collect();
            assert_eq!(group.len(), 3);
            let mut resorted = group.clone();
            resorted.sort_by(|a, b| b.violation_at_gen.partial_cmp(&a.violation_at_gen).unwrap());
            assert_eq!(group, resorted);
        }
        for a in &adv {
            let src = data.input(a.source_index);
            assert_eq!(net.predict(src).unwrap(), a.y);
            assert_ne!(net.predict(&a.x_tilde).unwrap(), a.y);
            assert!(a.violation_at_gen > 0.0);
            assert!(linf(&a.x_tilde, src) <= cfg.epsilon + 1e-15);
        }
    }

    #[test]
    fn adversarial_size_must_divide_by_class_count() {
        let err = generate_adv_dataset(
            &affine_pair(),
            &strip_dataset(10),
            3,
            &AttackConfig::mnist_pgd(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn robust_network_reports_shortfall_for_every_label() {
        // Constant classifier: nothing ever flips.
        let net = Network::new(vec![
            DenseLayer::new(2, 2, vec![0.0; 4], vec![1.0, 0.0]).unwrap()
        ])
        .unwrap();
        let rows = (0..10).map(|i| (vec![0.1 * i as f64, 0.5], 0));
        let data = LabeledDataset::from_rows(2, 2, rows).unwrap();
        match generate_adv_dataset(&net, &data, 2, &AttackConfig::mnist_pgd()) {
            Err(Error::Shortfall(items)) => {
                let labels: Vec<_> = items.iter().map(|s| s.label).collect();
                assert_eq!(labels, vec![0, 1]);
            }
            other => panic!("expected shortfall, got {other:?}"),
        }
    }

    #[test]
    fn constant_classifier_is_fully_resilient() {
        let net = Network::new(vec![
            DenseLayer::new(3, 2, vec![0.0; 6], vec![0.0, 1.0]).unwrap()
        ])
        .unwrap();
        assert_eq!(
            estimate_resilience(&net, &[0.5; 3], 0.3, 200, 1).unwrap(),
            1.0
        );
    }

    #[test]
    fn zero_radius_is_fully_resilient() {
        let net = random_network(&[3, 4, 3], 6);
        assert_eq!(
            estimate_resilience(&net, &[0.3, 0.4, 0.5], 0.0, 50, 2).unwrap(),
            1.0
        );
    }

    #[test]
    fn one_dimensional_threshold_matches_analytic_fraction() {
        // Logits (x, 0.6): class 1 below 0.6, class 0 above.
        let net = Network::new(vec![
            DenseLayer::new(1, 2, vec![1.0, 0.0], vec![0.0, 0.6]).unwrap()
        ])
        .unwrap();
        let (x, eps, n) = (0.55, 0.1, 20_000);
        // Ball [0.45, 0.65]; same class as x on [0.45, 0.6].
        let p = (0.6 - 0.45) / 0.2;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let est = estimate_resilience(&net, &[x], eps, n, 9).unwrap();
        assert!(
            (est - p).abs() <= 3.0 * sigma,
            "estimate {est}, analytic {p}"
        );
    }

    #[test]
    fn adversarial_set_json_uses_wire_names() {
        let set = AdversarialSet {
            header: AdversarialSetHeader {
                epsilon: 0.1,
                attack: AttackConfig::mnist_pgd(),
                model_checksum: "abc".into(),
                num_classes: 2,
                config: serde_json::Value::Null,
            },
            examples: vec![AdversarialExample {
                x_tilde: vec![0.25, 1.0],
                y: 1,
                source_index: 4,
                violation_at_gen: 0.5,
            }],
        };
        let text = set.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let ex = &value["examples"][0];
        assert_eq!(ex["x"], serde_json::json!([0.25, 1.0]));
        assert_eq!(ex["violation"], serde_json::json!(0.5));
        assert_eq!(ex["source_index"], serde_json::json!(4));
        assert_eq!(AdversarialSet::from_json(&text).unwrap(), set);
    }
}
