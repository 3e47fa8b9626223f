//! Linear cuts in parameter space.
//!
//! Every cut is a halfspace `gᵀw ≤ r`. Adversary cuts linearize the margin
//! constraint `f_i(x̃; w) - f_y(x̃; w) + δ ≤ 0` for one adversarial point and
//! one competing label `i`; loss cuts linearize `ℓ(w) ≤ ℓ_ref`. Both are
//! first-order expansions at a linearization point `w^k`:
//!
//! ```text
//! adversary: g = ∇_w f_i - ∇_w f_y,  r = gᵀw^k - (f_i - f_y) - δ - ε̄ · max_m |∇_x f_i^m - ∇_x f_y^m|
//! loss:      g = ∇_w ℓ(w^k),         r = gᵀw^k - (ℓ(w^k) - ℓ_ref)
//! ```
//!
//! The `ε̄` term makes the adversary cut hold for every input in the ℓ1 ball
//! of radius `ε̄` around `x̃` under the same linearization.
//!
//! Normals are stored sparsely: gradient entries that are exactly zero (zero
//! inputs, inactive ReLUs) are dropped, which is lossless.
//!
//! # Dump format
//!
//! [`write_cut_dump`] writes little-endian `f64` values:
//! `count, J`, then per cut `g[0..J], r, kind, adv_index, competing_label,
//! iterate`, where `kind` is 0 for adversary and 1 for loss cuts and absent
//! metadata is written as -1.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::attacks::AdversarialExample;
use crate::error::{Error, Result};
use crate::nn::{LabeledDataset, Network};

/// Default margin threshold δ.
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Sparse coefficient vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn from_dense(dense: &[f64]) -> Self {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                indices.push(i as u32);
                values.push(v);
            }
        }
        Self {
            dim: dense.len(),
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .map(|&i| i as usize)
            .zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    /// `dense += alpha * self`.
    pub fn axpy(&self, alpha: f64, dense: &mut [f64]) {
        for (i, v) in self.iter() {
            dense[i] += alpha * v;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CutKind {
    Adversary,
    Loss,
}

/// Where a cut came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMeta {
    /// Index of the linearization point (0 for the pre-trained parameters).
    pub iterate: usize,
    /// Position of the adversarial example in the adversarial set.
    pub adv_index: Option<usize>,
    /// The label competing with the true label.
    pub competing_label: Option<usize>,
}

/// The halfspace `normalᵀ w ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cut {
    pub normal: SparseVector,
    pub rhs: f64,
    pub kind: CutKind,
    pub meta: CutMeta,
}

impl Cut {
    /// `gᵀw - r`; positive when `w` violates the cut.
    pub fn residual(&self, w: &[f64]) -> f64 {
        self.normal.dot(w) - self.rhs
    }
}

/// Append-only collection of cuts sharing δ and ε̄.
#[derive(Debug, Clone)]
pub struct CutPool {
    dim: usize,
    delta: f64,
    epsilon_bar: f64,
    max_cuts: Option<usize>,
    cuts: Vec<Cut>,
}

impl CutPool {
    pub fn new(dim: usize, delta: f64, epsilon_bar: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if !(epsilon_bar >= 0.0 && epsilon_bar.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon_bar must be nonnegative, got {epsilon_bar}"
            )));
        }
        Ok(Self {
            dim,
            delta,
            epsilon_bar,
            max_cuts: None,
            cuts: Vec::new(),
        })
    }

    /// Refuses to grow past `max_cuts` entries.
    pub fn with_max_cuts(mut self, max_cuts: Option<usize>) -> Self {
        self.max_cuts = max_cuts;
        self
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon_bar(&self) -> f64 {
        self.epsilon_bar
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.cuts
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub fn count(&self, kind: CutKind) -> usize {
        self.cuts.iter().filter(|c| c.kind == kind).count()
    }

    pub fn extend(&mut self, cuts: Vec<Cut>) -> Result<()> {
        if let Some(max) = self.max_cuts {
            if self.cuts.len() + cuts.len() > max {
                return Err(Error::Config(format!(
                    "cut pool would grow to {} cuts, above max_cuts = {max}",
                    self.cuts.len() + cuts.len()
                )));
            }
        }
        for cut in &cuts {
            if cut.normal.dim() != self.dim {
                return Err(Error::shape(self.dim, cut.normal.dim()));
            }
            if !cut.normal.is_finite() || !cut.rhs.is_finite() {
                return Err(Error::Numerical("cut with non-finite coefficients".into()));
            }
        }
        self.cuts.extend(cuts);
        Ok(())
    }
}

/// `max(0, max_{i≠y} f_i - f_y)`: how far label `y` is from winning.
pub fn margin_violation(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Domain(
            "margin violation needs at least two classes".into(),
        ));
    }
    if y >= logits.len() {
        return Err(Error::Domain(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((best_other - logits[y]).max(0.0))
}

/// Sum of margin violations over the adversarial set.
pub fn total_violation(net: &Network, adv: &[AdversarialExample]) -> Result<f64> {
    if adv.is_empty() {
        return Err(Error::Domain("adversarial set is empty".into()));
    }
    adv.iter()
        .map(|ex| margin_violation(&net.forward(&ex.x_tilde)?, ex.y))
        .sum()
}

/// `ε̄ · ‖d‖_∞`, the maximum of `dᵀ(x - x̃)` over the ℓ1 ball of radius `ε̄`.
pub fn l1_ball_max(direction: &[f64], epsilon_bar: f64) -> f64 {
    if epsilon_bar == 0.0 {
        return 0.0;
    }
    epsilon_bar * direction.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// One cut per adversarial point and competing label, linearized at the
/// parameters of `net_at_wk`.
pub fn make_adversary_cuts(
    net_at_wk: &Network,
    adv: &[AdversarialExample],
    delta: f64,
    epsilon_bar: f64,
    iterate: usize,
) -> Result<Vec<Cut>> {
    if !(delta > 0.0) {
        return Err(Error::Config("delta must be positive".into()));
    }
    if !(epsilon_bar >= 0.0) {
        return Err(Error::Config("epsilon_bar must be nonnegative".into()));
    }
    let wk = net_at_wk.to_params();
    let classes = net_at_wk.num_classes();
    let per_point: Vec<Vec<Cut>> = adv
        .par_iter()
        .enumerate()
        .map(|(a, ex)| {
            if ex.y >= classes {
                return Err(Error::Domain(format!(
                    "adversarial label {} out of range",
                    ex.y
                )));
            }
            let mut cuts = Vec::with_capacity(classes - 1);
            for i in (0..classes).filter(|&i| i != ex.y) {
                let mut seed = vec![0.0; classes];
                seed[i] = 1.0;
                seed[ex.y] = -1.0;
                let (g, gx, logits) = net_at_wk.directional_gradients(&ex.x_tilde, &seed)?;
                let margin = logits[i] - logits[ex.y];
                let rhs = g.dot(wk.values()) - margin - delta - l1_ball_max(&gx, epsilon_bar);
                cuts.push(Cut {
                    normal: SparseVector::from_dense(g.values()),
                    rhs,
                    kind: CutKind::Adversary,
                    meta: CutMeta {
                        iterate,
                        adv_index: Some(a),
                        competing_label: Some(i),
                    },
                });
            }
            Ok(cuts)
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

/// The loss cut at the parameters of `net_at_wk` against `loss_ref`.
pub fn make_loss_cut(
    net_at_wk: &Network,
    loss_ref: f64,
    train: &LabeledDataset,
    iterate: usize,
) -> Result<Cut> {
    let (loss, grad) = net_at_wk.loss_and_grad(train)?;
    let wk = net_at_wk.to_params();
    let rhs = grad.dot(wk.values()) - (loss - loss_ref);
    Ok(Cut {
        normal: SparseVector::from_dense(grad.values()),
        rhs,
        kind: CutKind::Loss,
        meta: CutMeta {
            iterate,
            adv_index: None,
            competing_label: None,
        },
    })
}

/// Loss reference relaxed by `xi ≥ 0`.
pub fn relax_loss_reference(loss_ref: f64, xi: f64) -> Result<f64> {
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(Error::Config(format!("xi must be nonnegative, got {xi}")));
    }
    Ok(loss_ref + xi)
}

fn meta_value(v: Option<usize>) -> f64 {
    v.map_or(-1.0, |x| x as f64)
}

/// Writes `cuts` in the dense little-endian diagnostic layout.
pub fn write_cut_dump(cuts: &[Cut], dim: usize, mut out: impl Write) -> std::io::Result<()> {
    let mut put = |v: f64| out.write_all(&v.to_le_bytes());
    put(cuts.len() as f64)?;
    put(dim as f64)?;
    for cut in cuts {
        for v in cut.normal.to_dense() {
            put(v)?;
        }
        put(cut.rhs)?;
        put(match cut.kind {
            CutKind::Adversary => 0.0,
            CutKind::Loss => 1.0,
        })?;
        put(meta_value(cut.meta.adv_index))?;
        put(meta_value(cut.meta.competing_label))?;
        put(cut.meta.iterate as f64)?;
    }
    Ok(())
}

/// Reads a dump produced by [`write_cut_dump`]; returns `(J, cuts)`.
pub fn read_cut_dump(mut input: impl Read) -> Result<(usize, Vec<Cut>)> {
    let mut offset = 0u64;
    let mut next = |input: &mut dyn Read| -> Result<f64> {
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf).map_err(|_| Error::Parse {
            path: "<cut dump>".into(),
            offset,
            message: "unexpected end of cut dump".into(),
        })?;
        offset += 8;
        Ok(f64::from_le_bytes(buf))
    };
    let as_index = |v: f64| -> Option<usize> { (v >= 0.0).then_some(v as usize) };
    let count = next(&mut input)? as usize;
    let dim = next(&mut input)? as usize;
    let mut cuts = Vec::with_capacity(count);
    let mut dense = vec![0.0; dim];
    for _ in 0..count {
        for d in dense.iter_mut() {
            *d = next(&mut input)?;
        }
        let rhs = next(&mut input)?;
        let kind = if next(&mut input)? == 0.0 {
            CutKind::Adversary
        } else {
            CutKind::Loss
        };
        let adv_index = as_index(next(&mut input)?);
        let competing_label = as_index(next(&mut input)?);
        let iterate = next(&mut input)? as usize;
        cuts.push(Cut {
            normal: SparseVector::from_dense(&dense),
            rhs,
            kind,
            meta: CutMeta {
                iterate,
                adv_index,
                competing_label,
            },
        });
    }
    Ok((dim, cuts))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::testing::{random_input, random_network};
    use crate::nn::DenseLayer;

    fn adv_point(x: Vec<f64>, y: usize) -> AdversarialExample {
        AdversarialExample {
            x_tilde: x,
            y,
            source_index: 0,
            violation_at_gen: 0.0,
        }
    }

    #[test]
    fn margin_violation_examples() {
        assert_eq!(margin_violation(&[5.0, 2.0, 1.0], 0).unwrap(), 0.0);
        assert_eq!(margin_violation(&[2.0, 5.0, 1.0], 0).unwrap(), 3.0);
        assert_eq!(margin_violation(&[3.0, 3.0], 0).unwrap(), 0.0);
        assert!(matches!(margin_violation(&[1.0], 0), Err(Error::Domain(_))));
        assert!(matches!(
            margin_violation(&[1.0, 2.0], 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn total_violation_sums_points() {
        // Logits equal the input.
        let net = Network::new(vec![DenseLayer::new(
            3,
            3,
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
            vec![0.; 3],
        )
        .unwrap()])
        .unwrap();
        let adv = vec![
            adv_point(vec![2.0, 5.0, 1.0], 0),
            adv_point(vec![5.0, 2.0, 1.0], 0),
        ];
        assert_eq!(total_violation(&net, &adv).unwrap(), 3.0);
        let fixed = vec![adv_point(vec![5.0, 2.0, 1.0], 0)];
        assert_eq!(total_violation(&net, &fixed).unwrap(), 0.0);
        assert!(total_violation(&net, &[]).is_err());
    }

    #[test]
    fn one_point_three_classes_gives_two_cuts() {
        let net = random_network(&[2, 4, 3], 1);
        let cuts =
            make_adversary_cuts(&net, &[adv_point(vec![0.3, 0.6], 1)], 1e-5, 0.0, 0).unwrap();
        assert_eq!(cuts.len(), 2);
        let labels: Vec<_> = cuts
            .iter()
            .map(|c| c.meta.competing_label.unwrap())
            .collect();
        assert_eq!(labels, vec![0, 2]);
    }

    #[test]
    fn adversary_cut_is_tight_at_its_linearization_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let net = random_network(&[4, 6, 3], seed);
            let adv: Vec<_> = (0..3)
                .map(|i| adv_point(random_input(4, &mut rng), i % 3))
                .collect();
            let (delta, eps_bar) = (1e-5, 0.05);
            let wk = net.to_params();
            for cut in make_adversary_cuts(&net, &adv, delta, eps_bar, 0).unwrap() {
                let ex = &adv[cut.meta.adv_index.unwrap()];
                let i = cut.meta.competing_label.unwrap();
                let z = net.forward(&ex.x_tilde).unwrap();
                let gxi = net.grad_output_input(&ex.x_tilde, i).unwrap();
                let gxy = net.grad_output_input(&ex.x_tilde, ex.y).unwrap();
                let max_term = gxi
                    .iter()
                    .zip(&gxy)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let expected = z[i] - z[ex.y] + delta + eps_bar * max_term;
                assert!((cut.residual(wk.values()) - expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn robust_cuts_differ_only_in_rhs() {
        let net = random_network(&[3, 5, 3], 4);
        let adv = vec![adv_point(vec![0.2, 0.7, 0.4], 2)];
        let plain = make_adversary_cuts(&net, &adv, 1e-5, 0.0, 0).unwrap();
        let robust = make_adversary_cuts(&net, &adv, 1e-5, 0.05, 0).unwrap();
        for (p, r) in plain.iter().zip(&robust) {
            assert_eq!(p.normal, r.normal);
            assert!(r.rhs <= p.rhs);
        }
    }

    #[test]
    fn l1_ball_max_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(1..8);
            let d: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let eps = rng.random_range(0.0..0.5);
            let brute = (0..m)
                .flat_map(|k| [eps * d[k], -eps * d[k]])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((l1_ball_max(&d, eps) - brute).abs() <= 1e-15);
        }
    }

    fn small_train(rng: &mut ChaCha8Rng) -> LabeledDataset {
        let rows: Vec<_> = (0..12).map(|i| (random_input(3, rng), i % 3)).collect();
        LabeledDataset::from_rows(3, 3, rows).unwrap()
    }

    #[test]
    fn loss_cut_at_reference_has_zero_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = small_train(&mut rng);
        let net = random_network(&[3, 4, 3], 2);
        let loss_ref = net.loss(&train).unwrap();
        let cut = make_loss_cut(&net, loss_ref, &train, 0).unwrap();
        let g = net.grad_loss_params(&train).unwrap();
        assert!((cut.rhs - g.dot(net.to_params().values())).abs() <= 1e-12);
    }

    #[test]
    fn loss_cut_excludes_iterate_with_higher_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = small_train(&mut rng);
        let net = random_network(&[3, 4, 3], 5);
        let loss_ref = net.loss(&train).unwrap() - 0.1;
        let cut = make_loss_cut(&net, loss_ref, &train, 1).unwrap();
        assert!(cut.residual(net.to_params().values()) > 0.0);
        assert_eq!(cut.kind, CutKind::Loss);
    }

    #[test]
    fn relaxation_shifts_loss_cut_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let train = small_train(&mut rng);
        let net = random_network(&[3, 4, 3], 6);
        let base = net.loss(&train).unwrap();
        assert_eq!(relax_loss_reference(base, 0.0).unwrap(), base);
        let plain = make_loss_cut(&net, base, &train, 0).unwrap();
        let relaxed =
            make_loss_cut(&net, relax_loss_reference(base, 0.01).unwrap(), &train, 0).unwrap();
        assert_eq!(plain.normal, relaxed.normal);
        assert!((relaxed.rhs - plain.rhs - 0.01).abs() <= 1e-12);
        assert!(matches!(
            relax_loss_reference(base, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pool_enforces_cap_and_counts_kinds() {
        let net = random_network(&[2, 3, 3], 3);
        let adv = vec![adv_point(vec![0.1, 0.9], 0)];
        let cuts = make_adversary_cuts(&net, &adv, 1e-5, 0.0, 0).unwrap();
        let mut pool = CutPool::new(net.num_params(), 1e-5, 0.0)
            .unwrap()
            .with_max_cuts(Some(3));
        pool.extend(cuts.clone()).unwrap();
        assert_eq!(pool.count(CutKind::Adversary), 2);
        assert!(matches!(pool.extend(cuts), Err(Error::Config(_))));
        assert!(CutPool::new(3, 0.0, 0.0).is_err());
        assert!(CutPool::new(3, 1e-5, -0.1).is_err());
    }

    #[test]
    fn sparse_vector_operations() {
        let v = SparseVector::from_dense(&[0.0, 2.0, 0.0, -1.0]);
        assert_eq!(v.nnz(), 2);
        assert_eq!(v.dot(&[1.0, 1.0, 1.0, 1.0]), 1.0);
        assert_eq!(v.norm_sq(), 5.0);
        let mut acc = vec![1.0; 4];
        v.axpy(2.0, &mut acc);
        assert_eq!(acc, vec![1.0, 5.0, 1.0, -1.0]);
        assert_eq!(v.to_dense(), vec![0.0, 2.0, 0.0, -1.0]);
    }

    #[test]
    fn cut_dump_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train = small_train(&mut rng);
        let net = random_network(&[3, 4, 3], 8);
        let mut cuts =
            make_adversary_cuts(&net, &[adv_point(vec![0.5, 0.1, 0.3], 1)], 1e-5, 0.0, 2).unwrap();
        cuts.push(make_loss_cut(&net, 0.3, &train, 2).unwrap());
        let mut bytes = Vec::new();
        write_cut_dump(&cuts, net.num_params(), &mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 * (2 + cuts.len() * (net.num_params() + 5)));
        let (dim, back) = read_cut_dump(bytes.as_slice()).unwrap();
        assert_eq!(dim, net.num_params());
        assert_eq!(back, cuts);
        assert!(read_cut_dump(&bytes[..bytes.len() - 3]).is_err());
    }
}
