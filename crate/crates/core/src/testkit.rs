//! Shared sample generators for unit tests.

use nalgebra::{DMatrix, DVector};

use crate::data::{ObservedSample, PairStructure};
use crate::pairing::match_pairs_scalar;
use crate::rng::{standard_normal, stream_rng, uniform};

/// The four-unit worked example: y = (3,1,2,2), d = (1,0,0,0),
/// a = (1,0,1,0), x = row index. Wald estimate 2, transformed outcome
/// (1,1,2,2).
pub(crate) fn micro_sample() -> (ObservedSample<f64>, PairStructure) {
    let sample = ObservedSample::new(
        DVector::from_vec(vec![3.0, 1.0, 2.0, 2.0]),
        vec![1, 0, 0, 0],
        vec![1, 0, 1, 0],
        DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
        DMatrix::zeros(4, 0),
    )
    .unwrap();
    let structure = match_pairs_scalar(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    (sample, structure)
}

/// Random matched-pairs sample with compliers, always-takers and
/// never-takers mixed so the first stage is bounded away from zero.
pub(crate) fn random_sample(
    seed: u64,
    n_pairs: usize,
    k_w: usize,
) -> (ObservedSample<f64>, PairStructure) {
    let mut rng = stream_rng(seed, 0);
    loop {
        let n = 2 * n_pairs;
        let x: Vec<f64> = (0..n).map(|_| uniform(&mut rng)).collect();
        let structure = match_pairs_scalar(&x).unwrap();
        let mut a = vec![0u8; n];
        for [u, v] in structure.pairs() {
            if uniform(&mut rng) < 0.5 {
                a[*u] = 1;
            } else {
                a[*v] = 1;
            }
        }
        let d: Vec<u8> = a
            .iter()
            .map(|&ai| {
                let u = uniform(&mut rng);
                // Complier w.p. 1/2, always-taker 1/4, never-taker 1/4.
                if u < 0.5 {
                    ai
                } else if u < 0.75 {
                    1
                } else {
                    0
                }
            })
            .collect();
        let w = DMatrix::from_fn(n, k_w, |_, _| standard_normal(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            2.0 * d[i] as f64
                + x[i]
                + (0..k_w).map(|c| 0.5 * w[(i, c)]).sum::<f64>()
                + standard_normal(&mut rng)
        });
        let phi_gap = {
            let t: f64 = (0..n).filter(|&i| a[i] == 1).map(|i| d[i] as f64).sum();
            let c: f64 = (0..n).filter(|&i| a[i] == 0).map(|i| d[i] as f64).sum();
            (t - c) / n_pairs as f64
        };
        if phi_gap.abs() < 0.2 {
            continue;
        }
        let sample =
            ObservedSample::new(y, d, a, DMatrix::from_column_slice(n, 1, &x), w).unwrap();
        return (sample, structure);
    }
}
