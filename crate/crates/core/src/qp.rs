//! Projection onto an intersection of halfspaces.
//!
//! [`project`] solves
//!
//! ```text
//! min ½‖w - ŵ‖²  s.t.  g_iᵀw ≤ r_i  for every cut i
//! ```
//!
//! by Hildreth's method: cyclic coordinate ascent on the dual, one
//! multiplier per cut, with the primal iterate `w = ŵ - Σ λ_i g_i` kept up to
//! date. The dual has one coordinate per cut, far fewer than the number of
//! network parameters, and multipliers from a previous solve make a valid
//! warm start.
//!
//! A subset of coordinates can be frozen at given values; the frozen part of
//! each cut is moved into its right-hand side. [`run_block_coordinate`] uses
//! this to alternate between random free subsets, and [`brute_force_project`]
//! is an exhaustive active-set solver used as a reference on tiny instances.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cuts::{Cut, SparseVector};
use crate::error::{Error, Result};
use crate::nn::ParamLayout;

/// Largest cut count [`brute_force_project`] accepts.
pub const BRUTE_FORCE_MAX_CUTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    InfeasibleDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    /// Feasibility and complementary-slackness tolerance.
    pub tol: f64,
    /// Full passes over the cuts before giving up.
    pub max_sweeps: usize,
    /// A multiplier above this is taken as evidence of infeasibility.
    pub dual_bound: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 20_000,
            dual_bound: 1e10,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config("QP tolerance must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("QP max_sweeps must be at least 1".into()));
        }
        if !(self.dual_bound > 0.0) {
            return Err(Error::Config("QP dual_bound must be positive".into()));
        }
        Ok(())
    }
}

/// One projection problem.
#[derive(Debug, Clone, Copy)]
pub struct QpInstance<'a> {
    /// The point being projected (ŵ).
    pub anchor: &'a [f64],
    pub cuts: &'a [Cut],
    /// `true` marks a free coordinate; `None` frees everything.
    pub free_mask: Option<&'a [bool]>,
    /// Values of the frozen coordinates; defaults to the anchor.
    pub fixed_values: Option<&'a [f64]>,
    /// Initial multipliers. Cuts beyond its length start at zero.
    pub warm_start_duals: Option<&'a [f64]>,
}

impl<'a> QpInstance<'a> {
    pub fn new(anchor: &'a [f64], cuts: &'a [Cut]) -> Self {
        Self {
            anchor,
            cuts,
            free_mask: None,
            fixed_values: None,
            warm_start_duals: None,
        }
    }

    pub fn with_warm_start(mut self, duals: &'a [f64]) -> Self {
        self.warm_start_duals = Some(duals);
        self
    }

    pub fn restricted(mut self, free_mask: &'a [bool], fixed_values: &'a [f64]) -> Self {
        self.free_mask = Some(free_mask);
        self.fixed_values = Some(fixed_values);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: Vec<f64>,
    /// One nonnegative multiplier per cut.
    pub duals: Vec<f64>,
    /// Largest `g_iᵀw - r_i` over the cuts, floored at zero.
    pub max_violation: f64,
    pub iterations_used: usize,
    pub status: QpStatus,
}

impl QpSolution {
    /// `½‖w - anchor‖²`.
    pub fn objective(&self, anchor: &[f64]) -> f64 {
        half_sq_dist(&self.w, anchor)
    }
}

pub fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// A cut as seen by the solver: restricted to the free coordinates.
struct Row<'a> {
    normal: Cow<'a, SparseVector>,
    rhs: f64,
    norm_sq: f64,
}

impl Row<'_> {
    fn residual(&self, w: &[f64]) -> f64 {
        self.normal.dot(w) - self.rhs
    }
}

fn restrict<'a>(cut: &'a Cut, free: Option<&[bool]>, fixed: &[f64]) -> Row<'a> {
    match free {
        None => Row {
            norm_sq: cut.normal.norm_sq(),
            normal: Cow::Borrowed(&cut.normal),
            rhs: cut.rhs,
        },
        Some(mask) => {
            let mut dense = vec![0.0; cut.normal.dim()];
            let mut rhs = cut.rhs;
            for (j, v) in cut.normal.iter() {
                if mask[j] {
                    dense[j] = v;
                } else {
                    rhs -= v * fixed[j];
                }
            }
            let normal = SparseVector::from_dense(&dense);
            Row {
                norm_sq: normal.norm_sq(),
                normal: Cow::Owned(normal),
                rhs,
            }
        }
    }
}

fn validate_instance(inst: &QpInstance<'_>) -> Result<()> {
    let dim = inst.anchor.len();
    for cut in inst.cuts {
        if cut.normal.dim() != dim {
            return Err(Error::shape(dim, cut.normal.dim()));
        }
    }
    if let Some(mask) = inst.free_mask {
        if mask.len() != dim {
            return Err(Error::shape(dim, mask.len()));
        }
        if !mask.iter().any(|&f| f) {
            return Err(Error::Domain("free mask leaves no free coordinate".into()));
        }
    }
    if let Some(fixed) = inst.fixed_values {
        if fixed.len() != dim {
            return Err(Error::shape(dim, fixed.len()));
        }
    }
    if let Some(duals) = inst.warm_start_duals {
        if duals.len() > inst.cuts.len() {
            return Err(Error::shape(inst.cuts.len(), duals.len()));
        }
        if duals.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Domain("warm-start duals must be nonnegative".into()));
        }
    }
    Ok(())
}

/// Projects the anchor onto the cuts with Hildreth's dual coordinate ascent.
///
/// Stops with [`QpStatus::Optimal`] once every cut holds within `tol` and
/// every `|λ_i (g_iᵀw - r_i)| ≤ tol (1 + |r_i|)`. After `max_sweeps` passes
/// the iterate with the smallest violation is returned with
/// [`QpStatus::MaxIter`].
///
/// Passes skip cuts whose multiplier is zero and whose residual was more
/// negative than the largest KKT error of the previous pass. Once a pass
/// looks converged, every cut is checked and the skipped ones rejoin.
pub fn project(inst: &QpInstance<'_>, settings: &QpSettings) -> Result<QpSolution> {
    settings.validate()?;
    validate_instance(inst)?;
    let dim = inst.anchor.len();
    let fixed = inst.fixed_values.unwrap_or(inst.anchor);

    let mut w: Vec<f64> = match inst.free_mask {
        None => inst.anchor.to_vec(),
        Some(mask) => (0..dim)
            .map(|j| if mask[j] { inst.anchor[j] } else { fixed[j] })
            .collect(),
    };
    if inst.cuts.is_empty() {
        return Ok(QpSolution {
            w,
            duals: Vec::new(),
            max_violation: 0.0,
            iterations_used: 0,
            status: QpStatus::Optimal,
        });
    }

    let rows: Vec<Row<'_>> = inst
        .cuts
        .iter()
        .map(|c| restrict(c, inst.free_mask, fixed))
        .collect();

    // A cut with nothing left to move is either satisfied or hopeless.
    if rows
        .iter()
        .any(|r| r.norm_sq == 0.0 && -r.rhs > settings.tol)
    {
        return Ok(QpSolution {
            max_violation: max_violation(&rows, &w),
            duals: vec![0.0; rows.len()],
            w,
            iterations_used: 0,
            status: QpStatus::InfeasibleDetected,
        });
    }

    let mut duals = vec![0.0; rows.len()];
    if let Some(warm) = inst.warm_start_duals {
        duals[..warm.len()].copy_from_slice(warm);
        for (row, &l) in rows.iter().zip(&duals) {
            if l != 0.0 {
                row.normal.axpy(-l, &mut w);
            }
        }
    }

    let all: Vec<usize> = (0..rows.len()).collect();
    let mut working = all.clone();
    // Largest KKT error seen in the previous pass; cuts that are inactive by
    // more than this are dropped from the working set.
    let mut shrink_below = f64::INFINITY;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut last_res = vec![0.0; rows.len()];
    let mut sweeps = 0;
    let mut passes_since_reset = 0;
    while sweeps < settings.max_sweeps {
        sweeps += 1;
        passes_since_reset += 1;
        let mut pass_error = 0.0_f64;
        for &i in &working {
            let row = &rows[i];
            if row.norm_sq == 0.0 {
                continue;
            }
            let res = row.residual(&w);
            last_res[i] = res;
            let lambda = duals[i];
            pass_error = pass_error.max(res);
            if lambda > 0.0 {
                pass_error = pass_error.max((lambda * res).abs() / (1.0 + row.rhs.abs()));
            }
            let updated = (lambda + res / row.norm_sq).max(0.0);
            let change = updated - lambda;
            if change != 0.0 {
                row.normal.axpy(-change, &mut w);
                duals[i] = updated;
            }
        }

        if duals.iter().any(|&l| l > settings.dual_bound) || w.iter().any(|v| !v.is_finite()) {
            return Ok(QpSolution {
                max_violation: max_violation(&rows, &w),
                w,
                duals,
                iterations_used: sweeps,
                status: QpStatus::InfeasibleDetected,
            });
        }

        if pass_error <= settings.tol {
            let (violation, slack_ok) = kkt_check(&rows, &duals, &w, settings.tol);
            if violation <= settings.tol && slack_ok {
                return Ok(QpSolution {
                    w,
                    duals,
                    max_violation: violation,
                    iterations_used: sweeps,
                    status: QpStatus::Optimal,
                });
            }
            if best.as_ref().map_or(true, |(v, _, _)| violation < *v) {
                best = Some((violation, w.clone(), duals.clone()));
            }
            working.clone_from(&all);
            shrink_below = f64::INFINITY;
            passes_since_reset = 0;
        } else {
            working.retain(|&i| duals[i] > 0.0 || last_res[i] >= -shrink_below);
            shrink_below = pass_error;
            // Building the Gram matrix costs about |W|/2 passes; do it once
            // that much has already been spent on sparse passes.
            let m = working.len();
            if m <= GRAM_MAX_CUTS && 2 * passes_since_reset >= m && sweeps < settings.max_sweeps {
                let budget = settings.max_sweeps - sweeps;
                sweeps += gram_phase(&rows, &working, &mut duals, &mut w, settings, budget);
                passes_since_reset = 0;
            }
        }
    }

    let violation = max_violation(&rows, &w);
    let (max_violation, w, duals) = match best {
        Some(b) if b.0 < violation => b,
        _ => (violation, w, duals),
    };
    Ok(QpSolution {
        w,
        duals,
        max_violation,
        iterations_used: sweeps,
        status: QpStatus::MaxIter,
    })
}

/// Working sets at most this large may be solved through their Gram matrix.
const GRAM_MAX_CUTS: usize = 3000;

/// Runs Hildreth passes over `working` using its Gram matrix, so each update
/// costs `O(|W|)` instead of a sparse dot product and axpy in parameter
/// space. `w` is brought up to date at the end. Returns the passes used.
fn gram_phase(
    rows: &[Row<'_>],
    working: &[usize],
    duals: &mut [f64],
    w: &mut [f64],
    settings: &QpSettings,
    budget: usize,
) -> usize {
    let m = working.len();
    let mut gram = vec![0.0; m * m];
    let mut scratch = vec![0.0; w.len()];
    for a in 0..m {
        let ra = &rows[working[a]].normal;
        for (j, v) in ra.iter() {
            scratch[j] = v;
        }
        for b in 0..=a {
            let g = rows[working[b]].normal.dot(&scratch);
            gram[a * m + b] = g;
            gram[b * m + a] = g;
        }
        for (j, _) in ra.iter() {
            scratch[j] = 0.0;
        }
    }

    let start: Vec<f64> = working.iter().map(|&i| duals[i]).collect();
    let mut res: Vec<f64> = working.iter().map(|&i| rows[i].residual(w)).collect();
    let mut used = 0;
    let mut polish_every = 10;
    let mut next_polish = polish_every;
    while used < budget {
        used += 1;
        let mut pass_error = 0.0_f64;
        for a in 0..m {
            let i = working[a];
            let norm_sq = gram[a * m + a];
            if norm_sq == 0.0 {
                continue;
            }
            let lambda = duals[i];
            let r = res[a];
            pass_error = pass_error.max(r);
            if lambda > 0.0 {
                pass_error = pass_error.max((lambda * r).abs() / (1.0 + rows[i].rhs.abs()));
            }
            let updated = (lambda + r / norm_sq).max(0.0);
            let change = updated - lambda;
            if change != 0.0 {
                duals[i] = updated;
                let col = &gram[a * m..(a + 1) * m];
                for (rb, &g) in res.iter_mut().zip(col) {
                    *rb -= change * g;
                }
            }
        }
        // Residuals are tracked incrementally; aim a little below tol so the
        // exact check that follows still passes.
        if pass_error <= 0.5 * settings.tol
            || !pass_error.is_finite()
            || working.iter().any(|&i| duals[i] > settings.dual_bound)
        {
            break;
        }
        if used >= next_polish {
            if polish(&gram, m, working, duals, &mut res, settings.tol) {
                break;
            }
            polish_every = (2 * polish_every).min(640);
            next_polish = used + polish_every;
        }
    }

    for (a, &i) in working.iter().enumerate() {
        let change = duals[i] - start[a];
        if change != 0.0 {
            rows[i].normal.axpy(-change, w);
        }
    }
    used
}

/// Takes the cuts with positive multipliers as the active set and solves for
/// the multipliers that make all of them tight. The step is kept only if the
/// result is a KKT point of the working set: multipliers nonnegative and no
/// other cut violated.
fn polish(
    gram: &[f64],
    m: usize,
    working: &[usize],
    duals: &mut [f64],
    res: &mut [f64],
    tol: f64,
) -> bool {
    let active: Vec<usize> = (0..m).filter(|&a| duals[working[a]] > 0.0).collect();
    if active.is_empty() {
        return false;
    }
    let k = active.len();
    let g_aa = DMatrix::from_fn(k, k, |a, c| gram[active[a] * m + active[c]]);
    let r_a = DVector::from_fn(k, |a, _| res[active[a]]);
    let Some(step) = solve_gram(g_aa, r_a) else {
        return false;
    };
    if active
        .iter()
        .zip(step.iter())
        .any(|(&a, &d)| duals[working[a]] + d < 0.0)
    {
        return false;
    }
    let mut moved = res.to_vec();
    for (&a, &d) in active.iter().zip(step.iter()) {
        let col = &gram[a * m..(a + 1) * m];
        for (rb, &g) in moved.iter_mut().zip(col) {
            *rb -= d * g;
        }
    }
    if moved.iter().any(|&r| r > 0.5 * tol) {
        return false;
    }
    for (&a, &d) in active.iter().zip(step.iter()) {
        duals[working[a]] += d;
    }
    res.copy_from_slice(&moved);
    true
}

fn max_violation(rows: &[Row<'_>], w: &[f64]) -> f64 {
    rows.iter().map(|r| r.residual(w)).fold(0.0, f64::max)
}

/// Largest violation, and whether complementary slackness holds.
fn kkt_check(rows: &[Row<'_>], duals: &[f64], w: &[f64], tol: f64) -> (f64, bool) {
    let mut violation = 0.0_f64;
    let mut slack_ok = true;
    for (row, &l) in rows.iter().zip(duals) {
        let res = row.residual(w);
        violation = violation.max(res);
        if (l * res).abs() > tol * (1.0 + row.rhs.abs()) {
            slack_ok = false;
        }
    }
    (violation, slack_ok)
}

/// Exact projection by enumerating active sets. Only for up to
/// [`BRUTE_FORCE_MAX_CUTS`] cuts.
///
/// Every subset of cuts is treated as active, the equality-constrained
/// projection solved in closed form, and the candidate kept when its
/// multipliers are nonnegative and it satisfies every cut. Returns
/// [`Error::Infeasible`] when no subset qualifies.
pub fn brute_force_project(anchor: &[f64], cuts: &[Cut]) -> Result<Vec<f64>> {
    if cuts.len() > BRUTE_FORCE_MAX_CUTS {
        return Err(Error::Config(format!(
            "brute-force projection handles at most {BRUTE_FORCE_MAX_CUTS} cuts, got {}",
            cuts.len()
        )));
    }
    let dense: Vec<Vec<f64>> = cuts.iter().map(|c| c.normal.to_dense()).collect();
    for g in &dense {
        if g.len() != anchor.len() {
            return Err(Error::shape(anchor.len(), g.len()));
        }
    }
    let feasible = |w: &[f64]| {
        cuts.iter()
            .zip(&dense)
            .all(|(c, g)| dot(g, w) - c.rhs <= 1e-9 * (1.0 + c.rhs.abs()))
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << cuts.len()) {
        let active: Vec<usize> = (0..cuts.len()).filter(|&i| mask & (1 << i) != 0).collect();
        let k = active.len();
        let gram = DMatrix::from_fn(k, k, |a, c| dot(&dense[active[a]], &dense[active[c]]));
        let b = DVector::from_fn(k, |a, _| {
            dot(&dense[active[a]], anchor) - cuts[active[a]].rhs
        });
        let mu = if k == 0 {
            DVector::zeros(0)
        } else {
            match solve_gram(gram, b) {
                Some(mu) => mu,
                None => continue,
            }
        };
        if mu.iter().any(|&m| m < -1e-12) {
            continue;
        }
        let mut w = anchor.to_vec();
        for (&m, &i) in mu.iter().zip(&active) {
            for (wj, gj) in w.iter_mut().zip(&dense[i]) {
                *wj -= m * gj;
            }
        }
        if !feasible(&w) {
            continue;
        }
        let obj = half_sq_dist(&w, anchor);
        if best.as_ref().map_or(true, |(o, _)| obj < *o) {
            best = Some((obj, w));
        }
    }
    best.map(|(_, w)| w)
        .ok_or_else(|| Error::Infeasible("no active set yields a feasible KKT point".into()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `G x = b` for a Gram matrix `G`; `None` when `G` is numerically
/// singular.
fn solve_gram(gram: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = gram.cholesky()?;
    if chol
        .l_dirty()
        .diagonal()
        .iter()
        .any(|&d| d * d <= 1e-12 * scale)
    {
        return None;
    }
    Some(chol.solve(&b))
}

/// Settings for the alternating block-coordinate solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Fraction of sampled coordinates held fixed in each solve, in (0, 1).
    pub fix_ratio: f64,
    /// Number of restricted solves.
    pub sweeps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            fix_ratio: 0.8,
            sweeps: 1,
            seed: 0,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fix_ratio > 0.0 && self.fix_ratio < 1.0) {
            return Err(Error::Config(format!(
                "fix ratio must lie in (0, 1), got {}",
                self.fix_ratio
            )));
        }
        if self.sweeps == 0 {
            return Err(Error::Config("block sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which coordinates the block solver may fix.
///
/// Indices in `always_free` are never fixed. Each group is sampled
/// separately, so the same fraction is freed in every group.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSelection {
    pub always_free: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl VariableSelection {
    /// One group holding every index outside `always_free`.
    pub fn uniform(dim: usize, always_free: Vec<usize>) -> Self {
        let mut is_free = vec![false; dim];
        for &j in &always_free {
            if j < dim {
                is_free[j] = true;
            }
        }
        let group = (0..dim).filter(|&j| !is_free[j]).collect();
        Self {
            always_free,
            groups: vec![group],
        }
    }

    /// Biases always free; weights sampled layer by layer.
    pub fn per_layer(layout: &ParamLayout) -> Self {
        Self {
            always_free: layout.bias_indices(),
            groups: layout.weight_groups(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let mut seen = vec![false; dim];
        for &j in self.always_free.iter().chain(self.groups.iter().flatten()) {
            if j >= dim {
                return Err(Error::Domain(format!("index {j} outside 0..{dim}")));
            }
            if seen[j] {
                return Err(Error::Domain(format!("index {j} listed twice")));
            }
            seen[j] = true;
        }
        Ok(())
    }
}

/// Per-group index sets for one round of the alternating scheme.
struct GroupState {
    selected: Vec<usize>,
    kept: Vec<usize>,
}

fn sample_from(rng: &mut ChaCha8Rng, pool: &[usize], count: usize) -> Vec<usize> {
    let count = count.min(pool.len());
    sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Approximate projection by alternating restricted solves.
///
/// Starts from the anchor and samples `(1 - p)·|group|` coordinates per
/// group to optimize over (plus the always-free ones), with every other
/// coordinate fixed at the previous iterate. Between solves half of the
/// coordinates just optimized are kept and the other half are drawn afresh
/// from the ones that were fixed, so consecutive free sets overlap. A
/// restricted problem that turns out infeasible is retried once with the
/// free set doubled.
pub fn run_block_coordinate(
    anchor: &[f64],
    cuts: &[Cut],
    cfg: &BlockConfig,
    selection: &VariableSelection,
    settings: &QpSettings,
    warm_start_duals: Option<&[f64]>,
) -> Result<QpSolution> {
    cfg.validate()?;
    settings.validate()?;
    let dim = anchor.len();
    selection.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let free_count = |n: usize| (((1.0 - cfg.fix_ratio) * n as f64).floor() as usize).max(1);
    let mut states: Vec<GroupState> = selection
        .groups
        .iter()
        .map(|g| GroupState {
            selected: sample_from(&mut rng, g, free_count(g.len())),
            kept: Vec::new(),
        })
        .collect();

    let mut current = anchor.to_vec();
    let mut duals: Vec<f64> = warm_start_duals.map(<[f64]>::to_vec).unwrap_or_default();
    let mut last: Option<QpSolution> = None;

    for _ in 0..cfg.sweeps {
        let mut mask = vec![false; dim];
        for &j in &selection.always_free {
            mask[j] = true;
        }
        for st in &states {
            for &j in st.selected.iter().chain(&st.kept) {
                mask[j] = true;
            }
        }

        let solve = |mask: &[bool], duals: &[f64]| {
            let inst = QpInstance {
                anchor,
                cuts,
                free_mask: Some(mask),
                fixed_values: Some(&current),
                warm_start_duals: (!duals.is_empty()).then_some(duals),
            };
            project(&inst, settings)
        };
        let mut sol = solve(&mask, &duals)?;
        if sol.status == QpStatus::InfeasibleDetected {
            // Double the free set once: draw as many extra indices as are
            // already free in each group.
            for (st, group) in states.iter_mut().zip(&selection.groups) {
                let extra_pool: Vec<usize> = group.iter().copied().filter(|&j| !mask[j]).collect();
                let extra = sample_from(&mut rng, &extra_pool, st.selected.len() + st.kept.len());
                for &j in &extra {
                    mask[j] = true;
                }
                st.selected.extend(extra);
            }
            sol = solve(&mask, &[])?;
            if sol.status == QpStatus::InfeasibleDetected {
                return Err(Error::Infeasible(
                    "restricted projection infeasible even after doubling the free set".into(),
                ));
            }
        }
        current.clone_from(&sol.w);
        duals.clone_from(&sol.duals);
        last = Some(sol);

        for (st, group) in states.iter_mut().zip(&selection.groups) {
            let optimized: Vec<usize> = st.selected.iter().chain(&st.kept).copied().collect();
            let fixed: Vec<usize> = group.iter().copied().filter(|&j| !mask[j]).collect();
            let half = (free_count(group.len()) / 2).max(1);
            st.kept = sample_from(&mut rng, &optimized, half);
            st.selected = sample_from(&mut rng, &fixed, half);
        }
    }
    Ok(last.expect("sweeps ≥ 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cuts::{CutKind, CutMeta};

    pub(crate) fn cut(g: &[f64], rhs: f64) -> Cut {
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

    #[test]
    fn no_cuts_returns_anchor() {
        let anchor = [0.3, -0.2];
        let sol = project(&QpInstance::new(&anchor, &[]), &QpSettings::default()).unwrap();
        assert_eq!(sol.w, anchor.to_vec());
        assert_eq!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn halfspace_projection_matches_closed_form() {
        let anchor = [1.0, 1.0];
        let cuts = [cut(&[1.0, 1.0], 0.0)];
        let sol = project(&QpInstance::new(&anchor, &cuts), &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.w.iter().all(|v| v.abs() <= 1e-12));
        assert!((sol.duals[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn inactive_cut_leaves_anchor_alone() {
        let anchor = [0.5, 0.5];
        let cuts = [cut(&[1.0, 0.0], 2.0)];
        assert_eq!(
            brute_force_project(&anchor, &cuts).unwrap(),
            anchor.to_vec()
        );
        let sol = project(&QpInstance::new(&anchor, &cuts), &QpSettings::default()).unwrap();
        assert_eq!(sol.w, anchor.to_vec());
        assert_eq!(sol.duals, vec![0.0]);
    }

    #[test]
    fn conflicting_parallel_cuts_are_infeasible() {
        let anchor = [0.0, 0.0];
        let cuts = [cut(&[1.0, 0.0], -1.0), cut(&[-1.0, 0.0], -1.0)];
        assert!(matches!(
            brute_force_project(&anchor, &cuts),
            Err(Error::Infeasible(_))
        ));
        let settings = QpSettings {
            dual_bound: 1e3,
            ..QpSettings::default()
        };
        let sol = project(&QpInstance::new(&anchor, &cuts), &settings).unwrap();
        assert_eq!(sol.status, QpStatus::InfeasibleDetected);
    }

    #[test]
    fn zero_normal_with_negative_rhs_is_infeasible() {
        let anchor = [1.0];
        let cuts = [cut(&[0.0], -1.0)];
        let sol = project(&QpInstance::new(&anchor, &cuts), &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::InfeasibleDetected);
    }

    #[test]
    fn warm_start_reaches_the_same_point() {
        let anchor = [1.0, 2.0, -1.0];
        let cuts = [cut(&[1.0, 1.0, 0.0], 1.0), cut(&[0.0, 1.0, -1.0], 0.5)];
        let cold = project(&QpInstance::new(&anchor, &cuts), &QpSettings::default()).unwrap();
        let warm = project(
            &QpInstance::new(&anchor, &cuts).with_warm_start(&cold.duals),
            &QpSettings::default(),
        )
        .unwrap();
        assert!(warm.iterations_used <= 1);
        for (a, b) in cold.w.iter().zip(&warm.w) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn restricted_solve_only_moves_free_coordinates() {
        let anchor = [1.0, 1.0, 1.0];
        let fixed = [1.0, 1.0, 0.25];
        let cuts = [cut(&[1.0, 1.0, 1.0], 0.0)];
        let mask = [true, false, false];
        let inst = QpInstance::new(&anchor, &cuts).restricted(&mask, &fixed);
        let sol = project(&inst, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(&sol.w[1..], &[1.0, 0.25]);
        assert!((sol.w[0] + 1.25).abs() <= 1e-12);
    }

    #[test]
    fn restricted_solve_detects_blocked_cut() {
        let anchor = [1.0, 1.0];
        let cuts = [cut(&[0.0, 1.0], 0.0)];
        let mask = [true, false];
        let inst = QpInstance::new(&anchor, &cuts).restricted(&mask, &anchor);
        let sol = project(&inst, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::InfeasibleDetected);
    }

    #[test]
    fn empty_free_mask_is_rejected() {
        let anchor = [1.0];
        let mask = [false];
        let inst = QpInstance::new(&anchor, &[]).restricted(&mask, &anchor);
        assert!(matches!(
            project(&inst, &QpSettings::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let cuts: Vec<_> = (0..13).map(|_| cut(&[1.0], 1.0)).collect();
        assert!(matches!(
            brute_force_project(&[0.0], &cuts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_solver_doubles_free_set_when_blocked() {
        // Only coordinate 3 can satisfy the cut; with fix ratio 0.75 a single
        // coordinate of four is free at first.
        let anchor = [0.0; 4];
        let cuts = [cut(&[0.0, 0.0, 0.0, 1.0], -1.0)];
        let selection = VariableSelection::uniform(4, vec![]);
        let mut recovered = 0;
        for seed in 0..20 {
            let cfg = BlockConfig {
                fix_ratio: 0.75,
                sweeps: 1,
                seed,
            };
            match run_block_coordinate(
                &anchor,
                &cuts,
                &cfg,
                &selection,
                &QpSettings::default(),
                None,
            ) {
                Ok(sol) => {
                    assert!((sol.w[3] + 1.0).abs() <= 1e-12);
                    recovered += 1;
                }
                Err(Error::Infeasible(_)) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        // Some seeds pick coordinate 3 directly or on the retry, some do not.
        assert!(recovered > 0 && recovered < 20);
    }

    #[test]
    fn block_config_validation() {
        let bad = BlockConfig {
            fix_ratio: 1.0,
            ..BlockConfig::default()
        };
        assert!(bad.validate().is_err());
        let defaults = BlockConfig::default();
        assert_eq!((defaults.fix_ratio, defaults.sweeps), (0.8, 1));
    }

    #[test]
    fn per_layer_selection_keeps_biases_free() {
        let layout = crate::nn::Architecture::new(vec![3, 2, 2])
            .unwrap()
            .layout();
        let sel = VariableSelection::per_layer(&layout);
        assert_eq!(sel.always_free, vec![6, 7, 12, 13]);
        assert_eq!(
            sel.groups,
            vec![(0..6).collect::<Vec<_>>(), (8..12).collect()]
        );
    }
}
