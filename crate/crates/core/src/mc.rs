//! Batched Monte-Carlo accumulation over a `DrawSet`.

use rayon::prelude::*;

use crate::channel::DrawSet;
use crate::linalg::CMat;

pub const BATCHES: usize = 10;

/// Run `f(t, acc)` for every draw index, accumulating into per-batch sums.
/// Batch boundaries and summation order are fixed, so results do not depend on
/// the number of worker threads.
pub fn batched<F>(draws: DrawSet, zero: &[CMat], f: F) -> Vec<Vec<CMat>>
where
    F: Fn(usize, &mut Vec<CMat>) + Sync,
{
    let nb = BATCHES.min(draws.trials.max(1));
    (0..nb)
        .into_par_iter()
        .map(|b| {
            let lo = b * draws.trials / nb;
            let hi = (b + 1) * draws.trials / nb;
            let mut acc = zero.to_vec();
            for t in lo..hi {
                f(t, &mut acc);
            }
            acc
        })
        .collect()
}

/// Sum of per-batch accumulators, scaled to a mean over `count` draws.
pub fn mean_of(batches: &[Vec<CMat>], count: usize) -> Vec<CMat> {
    let mut out = batches[0].clone();
    for b in &batches[1..] {
        for (o, x) in out.iter_mut().zip(b) {
            *o += x;
        }
    }
    let s = 1.0 / count.max(1) as f64;
    for o in &mut out {
        *o *= crate::linalg::cr(s);
    }
    out
}

/// Per-batch means.
pub fn batch_means(batches: &[Vec<CMat>], trials: usize) -> Vec<Vec<CMat>> {
    let nb = batches.len();
    batches
        .iter()
        .enumerate()
        .map(|(b, acc)| {
            let cnt = (b + 1) * trials / nb - b * trials / nb;
            let s = crate::linalg::cr(1.0 / cnt.max(1) as f64);
            acc.iter().map(|m| m * s).collect()
        })
        .collect()
}

/// Standard error of the mean from batch values.
pub fn std_err(values: &[f64]) -> f64 {
    let b = values.len();
    if b < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / b as f64;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}
