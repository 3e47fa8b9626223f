//! The cutting-plane fine-tuning loop and final model selection.
//!
//! Each iteration projects the pre-trained parameters `w⁰` onto the
//! polyhedron cut out by every linearization gathered so far, linearizes the
//! constraints again at the new iterate `w^k`, and adds the blends
//! `(1 - α) w⁰ + α w^k` for every `α` in the grid to the candidate pool. The
//! returned model minimizes `ω ℓ̃ + (1 - ω) Ṽ` over the pool, where `ℓ̃` and
//! `Ṽ` are the training loss and the adversarial violation min-max scaled to
//! [0, 1].

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AdversarialExample;
use crate::cuts::{
    make_adversary_cuts, make_loss_cut, relax_loss_reference, total_violation, CutPool,
    DEFAULT_DELTA,
};
use crate::error::{Error, Result};
use crate::nn::{blend, LabeledDataset, Network, ParamVector};
use crate::qp::{
    project, run_block_coordinate, BlockConfig, QpInstance, QpSettings, QpStatus, VariableSelection,
};

/// Block-coordinate settings inside a fine-tuning run. Biases are always
/// free and weights are sampled per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSettings {
    pub fix_ratio: f64,
    pub sweeps: usize,
}

impl Default for BlockSettings {
    fn default() -> Self {
        let d = BlockConfig::default();
        Self {
            fix_ratio: d.fix_ratio,
            sweeps: d.sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub max_iterations: usize,
    pub omega: f64,
    pub delta: f64,
    pub epsilon_bar: f64,
    pub xi: f64,
    pub alpha_grid: Vec<f64>,
    pub block: Option<BlockSettings>,
    pub seed: u64,
    pub qp: QpSettings,
    pub max_cuts: Option<usize>,
    pub target_violation: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            omega: 0.2,
            delta: DEFAULT_DELTA,
            epsilon_bar: 0.0,
            xi: 0.0,
            alpha_grid: default_alpha_grid(),
            block: None,
            seed: 0,
            qp: QpSettings::default(),
            max_cuts: None,
            target_violation: None,
        }
    }
}

/// `0.1, 0.2, ..., 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::Config(format!(
                "omega must lie in [0, 1), got {}",
                self.omega
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !(self.epsilon_bar >= 0.0 && self.epsilon_bar.is_finite()) {
            return Err(Error::Config("epsilon_bar must be nonnegative".into()));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Config("xi must be nonnegative".into()));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha_grid must not be empty".into()));
        }
        if self.alpha_grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha_grid values must lie in (0, 1]".into()));
        }
        if !self.alpha_grid.contains(&1.0) {
            return Err(Error::Config("alpha_grid must contain 1.0".into()));
        }
        if let Some(b) = &self.block {
            BlockConfig {
                fix_ratio: b.fix_ratio,
                sweeps: b.sweeps,
                seed: 0,
            }
            .validate()?;
        }
        if let Some(t) = self.target_violation {
            if !(t >= 0.0) {
                return Err(Error::Config("target_violation must be nonnegative".into()));
            }
        }
        self.qp.validate()
    }
}

/// Where a candidate came from: iterate 0 is the pre-trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub iterate: usize,
    pub alpha: Option<f64>,
}

/// A parameter vector with its exact training loss and violation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub w: ParamVector,
    pub loss: f64,
    pub violation: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub k: usize,
    pub qp_status: QpStatus,
    pub loss_iterate: f64,
    pub violation_iterate: f64,
    pub best_violation: f64,
    pub pool_size: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    TargetReached,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub network: Network,
    /// Index of the selected candidate in `pool`.
    pub selected: usize,
    pub pool: Vec<Candidate>,
    /// Indices of the Pareto-optimal candidates.
    pub front: Vec<usize>,
    pub history: Vec<HistoryRecord>,
    pub stop: StopReason,
    pub cuts: CutPool,
}

impl FinetuneOutcome {
    pub fn selected_candidate(&self) -> &Candidate {
        &self.pool[self.selected]
    }
}

fn param_hash(w: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in w {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Loss and violation per parameter vector, computed once.
struct MetricCache<'a> {
    arch_net: Network,
    train: &'a LabeledDataset,
    adv: &'a [AdversarialExample],
    known: HashMap<[u8; 32], (f64, f64)>,
}

impl<'a> MetricCache<'a> {
    fn evaluate(&self, w: &ParamVector) -> Result<(f64, f64)> {
        let mut net = self.arch_net.clone();
        net.set_params(w)?;
        let loss = net.loss(self.train)?;
        let violation = total_violation(&net, self.adv)?;
        if !loss.is_finite() || !violation.is_finite() {
            return Err(Error::Numerical("candidate metrics are not finite".into()));
        }
        Ok((loss, violation))
    }

    /// Metrics for several vectors, evaluated concurrently and returned in order.
    fn metrics(&mut self, ws: &[ParamVector]) -> Result<Vec<(f64, f64)>> {
        let keys: Vec<[u8; 32]> = ws.iter().map(|w| param_hash(w.values())).collect();
        let fresh: Vec<Option<(f64, f64)>> = ws
            .par_iter()
            .zip(&keys)
            .map(|(w, key)| match self.known.get(key) {
                Some(_) => Ok(None),
                None => self.evaluate(w).map(Some),
            })
            .collect::<Result<_>>()?;
        for (key, m) in keys.iter().zip(&fresh) {
            if let Some(m) = m {
                self.known.insert(*key, *m);
            }
        }
        Ok(keys.iter().map(|k| self.known[k]).collect())
    }
}

/// Per-iteration report passed to the observer of [`run_finetune_observed`].
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub record: &'a HistoryRecord,
    pub qp_sweeps: usize,
    pub qp_max_violation: f64,
    pub num_cuts: usize,
}

/// Runs the cutting-plane loop from `net0` and selects the final model.
pub fn run_finetune(
    net0: &Network,
    adv: &[AdversarialExample],
    train: &LabeledDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    run_finetune_observed(net0, adv, train, cfg, &mut |_| {})
}

/// [`run_finetune`], calling `observer` after every iteration.
pub fn run_finetune_observed(
    net0: &Network,
    adv: &[AdversarialExample],
    train: &LabeledDataset,
    cfg: &FinetuneConfig,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if adv.is_empty() {
        return Err(Error::Domain("adversarial set is empty".into()));
    }
    let w0 = net0.to_params();
    let mut cache = MetricCache {
        arch_net: net0.clone(),
        train,
        adv,
        known: HashMap::new(),
    };
    let (loss0, violation0) = cache.metrics(std::slice::from_ref(&w0))?[0];
    let loss_ref = relax_loss_reference(loss0, cfg.xi)?;

    let mut cuts = CutPool::new(w0.len(), cfg.delta, cfg.epsilon_bar)?.with_max_cuts(cfg.max_cuts);
    cuts.extend(make_adversary_cuts(
        net0,
        adv,
        cfg.delta,
        cfg.epsilon_bar,
        0,
    )?)?;
    cuts.extend(vec![make_loss_cut(net0, loss_ref, train, 0)?])?;

    let mut pool = vec![Candidate {
        w: w0.clone(),
        loss: loss0,
        violation: violation0,
        origin: Origin {
            iterate: 0,
            alpha: None,
        },
    }];
    let selection = VariableSelection::per_layer(w0.layout());
    let mut duals: Vec<f64> = Vec::new();
    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut best_violation = violation0;
    let mut stop = StopReason::Completed;
    let mut net_k = net0.clone();

    for k in 1..=cfg.max_iterations {
        let started = Instant::now();
        let sol = match &cfg.block {
            None => project(
                &QpInstance::new(w0.values(), cuts.cuts()).with_warm_start(&duals),
                &cfg.qp,
            )?,
            Some(b) => {
                let block = BlockConfig {
                    fix_ratio: b.fix_ratio,
                    sweeps: b.sweeps,
                    seed: cfg.seed.wrapping_add(k as u64),
                };
                match run_block_coordinate(
                    w0.values(),
                    cuts.cuts(),
                    &block,
                    &selection,
                    &cfg.qp,
                    Some(&duals),
                ) {
                    Err(Error::Infeasible(_)) => infeasible_solution(cuts.len()),
                    other => other?,
                }
            }
        };

        let (qp_sweeps, qp_max_violation) = (sol.iterations_used, sol.max_violation);
        if sol.status == QpStatus::InfeasibleDetected {
            history.push(HistoryRecord {
                k,
                qp_status: sol.status,
                loss_iterate: f64::NAN,
                violation_iterate: f64::NAN,
                best_violation,
                pool_size: pool.len(),
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            observer(Progress {
                record: history.last().expect("just pushed"),
                qp_sweeps,
                qp_max_violation,
                num_cuts: cuts.len(),
            });
            stop = StopReason::Infeasible;
            break;
        }
        duals = sol.duals;
        let num_cuts = cuts.len();

        let wk = ParamVector::new(sol.w, w0.layout().clone())?;
        net_k.set_params(&wk)?;
        cuts.extend(make_adversary_cuts(
            &net_k,
            adv,
            cfg.delta,
            cfg.epsilon_bar,
            k,
        )?)?;
        cuts.extend(vec![make_loss_cut(&net_k, loss_ref, train, k)?])?;

        let blends: Vec<ParamVector> = cfg
            .alpha_grid
            .iter()
            .map(|&a| blend(&w0, &wk, a))
            .collect::<Result<_>>()?;
        let metrics = cache.metrics(&blends)?;
        let (loss_k, violation_k) = cache.metrics(std::slice::from_ref(&wk))?[0];
        for ((w, (loss, violation)), &alpha) in blends.into_iter().zip(metrics).zip(&cfg.alpha_grid)
        {
            best_violation = best_violation.min(violation);
            pool.push(Candidate {
                w,
                loss,
                violation,
                origin: Origin {
                    iterate: k,
                    alpha: Some(alpha),
                },
            });
        }
        history.push(HistoryRecord {
            k,
            qp_status: sol.status,
            loss_iterate: loss_k,
            violation_iterate: violation_k,
            best_violation,
            pool_size: pool.len(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        observer(Progress {
            record: history.last().expect("just pushed"),
            qp_sweeps,
            qp_max_violation,
            num_cuts,
        });
        if cfg.target_violation.is_some_and(|t| violation_k <= t) {
            stop = StopReason::TargetReached;
            break;
        }
    }

    let selected = select_weighted(&pool, cfg.omega)?;
    let front = pareto_front(&pool)?;
    let mut network = net0.clone();
    network.set_params(&pool[selected].w)?;
    Ok(FinetuneOutcome {
        network,
        selected,
        pool,
        front,
        history,
        stop,
        cuts,
    })
}

fn infeasible_solution(num_cuts: usize) -> crate::qp::QpSolution {
    crate::qp::QpSolution {
        w: Vec::new(),
        duals: vec![0.0; num_cuts],
        max_violation: f64::INFINITY,
        iterations_used: 0,
        status: QpStatus::InfeasibleDetected,
    }
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Loss and violation of every candidate, min-max scaled over the pool. A
/// metric that is constant over the pool scales to 0.
pub fn scale_metrics(pool: &[Candidate]) -> Result<Vec<(f64, f64)>> {
    if pool.is_empty() {
        return Err(Error::Domain("candidate pool is empty".into()));
    }
    let (l_lo, l_hi) = min_max(pool.iter().map(|c| c.loss));
    let (v_lo, v_hi) = min_max(pool.iter().map(|c| c.violation));
    Ok(pool
        .iter()
        .map(|c| (scale(c.loss, l_lo, l_hi), scale(c.violation, v_lo, v_hi)))
        .collect())
}

/// Indices of candidates no other candidate dominates in (loss, violation),
/// in ascending index order. Identical candidates do not dominate each other.
pub fn pareto_front(pool: &[Candidate]) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Domain("candidate pool is empty".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        pool[a]
            .loss
            .total_cmp(&pool[b].loss)
            .then(pool[a].violation.total_cmp(&pool[b].violation))
    });
    let mut front = Vec::new();
    // Smallest violation among candidates with strictly smaller loss.
    let mut best_before = f64::INFINITY;
    let mut start = 0;
    while start < order.len() {
        let loss = pool[order[start]].loss;
        let end = start
            + order[start..]
                .iter()
                .take_while(|&&i| pool[i].loss == loss)
                .count();
        let group_min = pool[order[start]].violation;
        if group_min < best_before {
            front.extend(
                order[start..end]
                    .iter()
                    .copied()
                    .take_while(|&i| pool[i].violation == group_min),
            );
        }
        best_before = best_before.min(group_min);
        start = end;
    }
    front.sort_unstable();
    Ok(front)
}

/// Index of the candidate minimizing `ω ℓ̃ + (1 - ω) Ṽ`. Ties go to the lower
/// loss, then the lower violation, then the earlier iterate.
pub fn select_weighted(pool: &[Candidate], omega: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&omega) {
        return Err(Error::Config(format!(
            "omega must lie in [0, 1), got {omega}"
        )));
    }
    let scaled = scale_metrics(pool)?;
    let score = |i: usize| omega * scaled[i].0 + (1.0 - omega) * scaled[i].1;
    let best = (0..pool.len())
        .min_by(|&a, &b| {
            score(a)
                .total_cmp(&score(b))
                .then(pool[a].loss.total_cmp(&pool[b].loss))
                .then(pool[a].violation.total_cmp(&pool[b].violation))
                .then(pool[a].origin.iterate.cmp(&pool[b].origin.iterate))
        })
        .expect("pool is non-empty");
    Ok(best)
}

pub fn write_history_csv(history: &[HistoryRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io("history", e))?;
    Ok(())
}

#[derive(Serialize)]
struct PoolEntry<'a> {
    iterate: usize,
    alpha: Option<f64>,
    loss: f64,
    violation: f64,
    pareto: bool,
    selected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<&'a [f64]>,
}

/// The pool as JSON; parameters are included only when asked for.
pub fn pool_to_json(outcome: &FinetuneOutcome, include_params: bool) -> serde_json::Value {
    let entries: Vec<PoolEntry<'_>> = outcome
        .pool
        .iter()
        .enumerate()
        .map(|(i, c)| PoolEntry {
            iterate: c.origin.iterate,
            alpha: c.origin.alpha,
            loss: c.loss,
            violation: c.violation,
            pareto: outcome.front.binary_search(&i).is_ok(),
            selected: i == outcome.selected,
            params: include_params.then(|| c.w.values()),
        })
        .collect();
    serde_json::json!({
        "selected": outcome.selected,
        "stop": outcome.stop,
        "candidates": entries,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::Architecture;

    fn pool_of(points: &[(f64, f64)]) -> Vec<Candidate> {
        let layout = Arc::new(Architecture::new(vec![1, 1]).unwrap().layout());
        points
            .iter()
            .enumerate()
            .map(|(i, &(loss, violation))| Candidate {
                w: ParamVector::zeros(layout.clone()),
                loss,
                violation,
                origin: Origin {
                    iterate: i,
                    alpha: None,
                },
            })
            .collect()
    }

    #[test]
    fn front_of_four_point_pool() {
        let pool = pool_of(&[(1.0, 5.0), (2.0, 2.0), (3.0, 1.0), (2.5, 2.5)]);
        assert_eq!(pareto_front(&pool).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn duplicates_stay_on_front() {
        let pool = pool_of(&[(1.0, 1.0), (1.0, 1.0), (1.0, 2.0)]);
        assert_eq!(pareto_front(&pool).unwrap(), vec![0, 1]);
        assert_eq!(pareto_front(&pool_of(&[(4.0, 4.0)])).unwrap(), vec![0]);
    }

    #[test]
    fn scaling_endpoints_and_degenerate_span() {
        let pool = pool_of(&[(1.0, 7.0), (3.0, 7.0), (2.0, 7.0)]);
        let s = scale_metrics(&pool).unwrap();
        assert_eq!(s, vec![(0.0, 0.0), (1.0, 0.0), (0.5, 0.0)]);
        assert!(scale_metrics(&[]).is_err());
    }

    #[test]
    fn omega_zero_picks_minimal_violation() {
        let pool = pool_of(&[(1.0, 5.0), (3.0, 1.0), (2.0, 1.0)]);
        assert_eq!(select_weighted(&pool, 0.0).unwrap(), 2);
    }

    #[test]
    fn selection_moves_with_omega() {
        // Already scaled: A (0, 1), B (0.1, 0.2), C (1, 0).
        let pool = pool_of(&[(0.0, 1.0), (0.1, 0.2), (1.0, 0.0)]);
        let picks: Vec<usize> = [0.0, 0.2, 0.4]
            .iter()
            .map(|&w| select_weighted(&pool, w).unwrap())
            .collect();
        assert_eq!(picks, vec![2, 1, 1]);
        assert_eq!(select_weighted(&pool, 0.9).unwrap(), 0);
    }

    #[test]
    fn tie_breaks_by_loss_then_iterate() {
        let pool = pool_of(&[(1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(select_weighted(&pool, 0.5).unwrap(), 0);
    }

    #[test]
    fn omega_one_is_rejected() {
        assert!(matches!(
            select_weighted(&pool_of(&[(1.0, 1.0)]), 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        let no_one = FinetuneConfig {
            alpha_grid: vec![0.5],
            ..FinetuneConfig::default()
        };
        assert!(no_one.validate().is_err());
        let bad_omega = FinetuneConfig {
            omega: 1.0,
            ..FinetuneConfig::default()
        };
        assert!(bad_omega.validate().is_err());
        assert_eq!(default_alpha_grid().len(), 10);
    }

    #[test]
    fn history_csv_header() {
        let rec = HistoryRecord {
            k: 1,
            qp_status: QpStatus::Optimal,
            loss_iterate: 0.5,
            violation_iterate: 0.25,
            best_violation: 0.25,
            pool_size: 11,
            wall_time_s: 0.1,
        };
        let mut buf = Vec::new();
        write_history_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,qp_status,loss_iterate,violation_iterate,best_violation,pool_size,wall_time_s"
        );
        assert_eq!(lines.next().unwrap(), "1,optimal,0.5,0.25,0.25,11,0.1");
    }
}
