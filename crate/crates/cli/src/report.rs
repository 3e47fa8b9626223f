//! The evaluation battery and its human-readable tables.

use advcorr_core::attacks::{attack_accuracy, AdversarialExample, AttackConfig};
use advcorr_core::cuts::total_violation;
use advcorr_core::trainer::evaluate_accuracy;
use advcorr_core::{LabeledDataset, Network, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Training loss.
    pub loss: f64,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    /// Violation on the adversarial set, when one is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<f64>,
}

pub struct Battery<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub pgd: &'a AttackConfig,
    pub fgsm: &'a AttackConfig,
    pub adv: Option<&'a [AdversarialExample]>,
}

impl Battery<'_> {
    pub fn run(&self, net: &Network) -> Result<Metrics> {
        Ok(Metrics {
            loss: net.loss(self.train)?,
            clean_acc: evaluate_accuracy(net, self.test)?,
            fgsm_acc: attack_accuracy(net, self.test, self.fgsm)?,
            pgd_acc: attack_accuracy(net, self.test, self.pgd)?,
            violation: self.adv.map(|adv| total_violation(net, adv)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Delta {
    pub loss: f64,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<f64>,
}

pub fn delta(before: &Metrics, after: &Metrics) -> Delta {
    Delta {
        loss: after.loss - before.loss,
        clean_acc: after.clean_acc - before.clean_acc,
        fgsm_acc: after.fgsm_acc - before.fgsm_acc,
        pgd_acc: after.pgd_acc - before.pgd_acc,
        violation: before.violation.zip(after.violation).map(|(b, a)| a - b),
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// One row per model, accuracies in percent.
pub fn metrics_table(rows: &[(&str, &Metrics)]) -> String {
    let mut out = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>12}\n",
        "model", "loss", "acc(%)", "FGSM(%)", "PGD(%)", "V"
    );
    for (name, m) in rows {
        out += &format!(
            "{:<12} {:>9.4} {:>9} {:>9} {:>9} {:>12}\n",
            name,
            m.loss,
            pct(m.clean_acc),
            pct(m.fgsm_acc),
            pct(m.pgd_acc),
            m.violation.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    out
}

/// A row for `after` with its change against `before` in parentheses.
pub fn delta_row(name: &str, before: &Metrics, after: &Metrics) -> String {
    let d = delta(before, after);
    let acc = |a: f64, da: f64| format!("{} ({:+.2})", pct(a), 100.0 * da);
    format!(
        "{:<12} {:>18} {:>18} {:>18} {:>18}\n",
        name,
        format!("{:.4} ({:+.4})", after.loss, d.loss),
        acc(after.clean_acc, d.clean_acc),
        acc(after.fgsm_acc, d.fgsm_acc),
        acc(after.pgd_acc, d.pgd_acc)
    )
}

pub fn delta_header() -> String {
    format!(
        "{:<12} {:>18} {:>18} {:>18} {:>18}\n",
        "model", "loss", "acc(%)", "FGSM(%)", "PGD(%)"
    )
}
