//! Pair formation from baseline covariates, pairs-of-pairs ordering, and
//! within-pair randomization.
//!
//! Two matchers are provided. `match_pairs_scalar` is the canonical design
//! for one matching covariate: sort and pair adjacent units. For several
//! covariates `match_pairs_greedy` runs nearest-neighbor non-bipartite
//! matching, visiting units in ascending order of the first covariate, and
//! then orders pairs into pairs-of-pairs blocks by the same greedy pass on
//! pair midpoints. Diagnostics for both the within-pair and cross-pair
//! distance conditions are reported so the pairing quality can be audited.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::data::PairStructure;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, uniform};
use crate::scalar::{count, Scalar};

/// Pairing diagnostics alongside the structure that produced them.
#[derive(Debug, Clone)]
pub struct MatchReport<F: Scalar = f64> {
    pub structure: PairStructure,
    /// Mean over pairs of the within-pair Euclidean distance.
    pub within_pair_mean_l2: F,
    /// Mean over pairs of the squared within-pair distance.
    pub within_pair_mean_sq_l2: F,
    /// Mean over pairs-of-pairs blocks of the four squared cross-pair
    /// distances (first-pair unit vs second-pair unit).
    pub cross_pair_mean_sq_l2: F,
}

impl<F: Scalar> MatchReport<F> {
    /// Computes the distance diagnostics of `structure` on covariates `x`.
    pub fn compute(x: &DMatrix<F>, structure: PairStructure) -> Self {
        let n = structure.n_pairs();
        let mut sum_l2 = F::zero();
        let mut sum_sq = F::zero();
        for [u, v] in structure.pairs() {
            let sq = row_dist_sq(x, *u, *v);
            sum_sq += sq;
            sum_l2 += sq.sqrt();
        }
        let ordered: Vec<[usize; 2]> = structure.ordered_pairs().collect();
        let blocks = n / 2;
        let mut cross = F::zero();
        for b in 0..blocks {
            let [p1, p2] = ordered[2 * b];
            let [q1, q2] = ordered[2 * b + 1];
            for u in [p1, p2] {
                for v in [q1, q2] {
                    cross += row_dist_sq(x, u, v);
                }
            }
        }
        let n_f: F = count(n);
        MatchReport {
            structure,
            within_pair_mean_l2: sum_l2 / n_f,
            within_pair_mean_sq_l2: sum_sq / n_f,
            cross_pair_mean_sq_l2: if blocks == 0 {
                F::zero()
            } else {
                cross / count::<F>(4 * blocks)
            },
        }
    }
}

fn row_dist_sq<F: Scalar>(x: &DMatrix<F>, u: usize, v: usize) -> F {
    let mut acc = F::zero();
    for c in 0..x.ncols() {
        let d = x[(u, c)] - x[(v, c)];
        acc += d * d;
    }
    acc
}

fn check_even_finite<F: Scalar>(values: impl Iterator<Item = F>, n_units: usize) -> Result<()> {
    if n_units < 2 || n_units % 2 != 0 {
        return Err(Error::InvalidPairing(format!(
            "need an even number of units >= 2, got {n_units}"
        )));
    }
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPairing(
            "matching covariates contain non-finite values".into(),
        ));
    }
    Ok(())
}

/// Pairs adjacent units after sorting by a single covariate.
///
/// Ties are broken by original row index. Pairs are created in ascending
/// order of their minimum covariate value, so the identity `pair_order`
/// already arranges adjacent pairs into pairs-of-pairs blocks.
pub fn match_pairs_scalar<F: Scalar>(x: &[F]) -> Result<PairStructure> {
    check_even_finite(x.iter().copied(), x.len())?;
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap().then(i.cmp(&j)));
    let pairs = idx.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    PairStructure::with_identity_order(pairs)
}

/// Greedy nearest-neighbor non-bipartite matching for `k >= 1` covariates.
///
/// Units are visited in ascending order of the first covariate (ties by row
/// index); each visited unit is paired with its Euclidean-nearest unmatched
/// unit. On one covariate this reproduces the sorted-adjacent pairing.
/// Pairs are then arranged into pairs-of-pairs blocks by the same greedy
/// pass over pair midpoints; with an odd number of pairs the leftover pair
/// is placed last (it never enters a block).
pub fn match_pairs_greedy<F: Scalar>(x: &DMatrix<F>) -> Result<PairStructure> {
    let n_units = x.nrows();
    if x.ncols() < 1 {
        return Err(Error::InvalidPairing(
            "greedy matching needs at least one covariate column".into(),
        ));
    }
    check_even_finite(x.iter().copied(), n_units)?;

    let mut visit: Vec<usize> = (0..n_units).collect();
    visit.sort_by(|&i, &j| x[(i, 0)].partial_cmp(&x[(j, 0)]).unwrap().then(i.cmp(&j)));

    let mut matched = vec![false; n_units];
    let mut pairs: Vec<[usize; 2]> = Vec::with_capacity(n_units / 2);
    for &u in &visit {
        if matched[u] {
            continue;
        }
        matched[u] = true;
        let mut best: Option<(usize, F)> = None;
        for v in 0..n_units {
            if matched[v] {
                continue;
            }
            let dist = row_dist_sq(x, u, v);
            // Strict improvement keeps the smallest row index among ties.
            if best.map_or(true, |(_, b)| dist < b) {
                best = Some((v, dist));
            }
        }
        let (v, _) = best.expect("even unit count leaves a partner");
        matched[v] = true;
        pairs.push([u, v]);
    }

    let n = pairs.len();
    let midpoints: Vec<Vec<F>> = pairs
        .iter()
        .map(|&[u, v]| {
            (0..x.ncols())
                .map(|c| (x[(u, c)] + x[(v, c)]) / count::<F>(2))
                .collect()
        })
        .collect();
    let mid_dist_sq = |p: usize, q: usize| -> F {
        let mut acc = F::zero();
        for c in 0..x.ncols() {
            let d = midpoints[p][c] - midpoints[q][c];
            acc += d * d;
        }
        acc
    };

    let mut used = vec![false; n];
    let mut pair_order: Vec<usize> = Vec::with_capacity(n);
    for p in 0..n {
        if used[p] {
            continue;
        }
        used[p] = true;
        let mut best: Option<(usize, F)> = None;
        for q in 0..n {
            if used[q] {
                continue;
            }
            let dist = mid_dist_sq(p, q);
            if best.map_or(true, |(_, b)| dist < b) {
                best = Some((q, dist));
            }
        }
        match best {
            Some((q, _)) => {
                used[q] = true;
                pair_order.push(p);
                pair_order.push(q);
            }
            // Odd pair count: the leftover pair goes last.
            None => pair_order.push(p),
        }
    }

    PairStructure::new(pairs, pair_order)
}

/// Draws the assignment vector: per pair, `(A_first, A_second)` is uniform
/// on `{(0,1), (1,0)}`, independently across pairs. Deterministic in
/// `seed`; pairs are visited in storage order.
pub fn assign_treatment(structure: &PairStructure, seed: u64) -> Vec<u8> {
    let mut rng = stream_rng(seed, 0);
    let mut a = vec![0u8; structure.n_units()];
    for [u, v] in structure.pairs() {
        assign_pair(&mut rng, &mut a, *u, *v);
    }
    a
}

/// Single-pair draw from an already-open stream; used by the simulation
/// engine so a replication consumes one stream end to end.
pub(crate) fn assign_pair(rng: &mut ChaCha8Rng, a: &mut [u8], u: usize, v: usize) {
    if uniform(rng) < 0.5 {
        a[u] = 1;
        a[v] = 0;
    } else {
        a[u] = 0;
        a[v] = 1;
    }
}
