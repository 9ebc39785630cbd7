//! Thread-count independent reductions.
//!
//! Inputs are cut into fixed-size chunks, each chunk is summed with
//! Neumaier compensation, and the partial sums are combined in chunk order.
//! The partitioning never depends on the pool size, so results are
//! bit-identical at any `--threads` setting.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Sum of `f(i)` for `i in 0..n`.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    sums_indexed::<1, _>(n, |i| [f(i)])[0]
}

/// Several simultaneous sums of `f(i)` for `i in 0..n`.
pub fn sums_indexed<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<[f64; K]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = [CompensatedSum::default(); K];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let v = f(i);
                for k in 0..K {
                    acc[k].add(v[k]);
                }
            }
            acc.map(|a| a.value())
        })
        .collect();
    let mut total = [CompensatedSum::default(); K];
    for p in partials {
        for k in 0..K {
            total[k].add(p[k]);
        }
    }
    total.map(|a| a.value())
}
