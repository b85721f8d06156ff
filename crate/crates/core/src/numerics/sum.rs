//! Compensated summation with a thread-count independent reduction order.

use rayon::prelude::*;

/// Neumaier's variant of Kahan summation.
///
/// Also tracks the sum of absolute values and the term count, which bound
/// the rounding error of the result.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Compensated {
    sum: f64,
    comp: f64,
    abs: f64,
    count: u64,
}

impl Compensated {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
        self.abs += x.abs();
        self.count += 1;
    }

    /// Absorbs another accumulator (its compensated value plus bookkeeping).
    pub fn merge(&mut self, other: &Compensated) {
        let (abs, count) = (self.abs, self.count);
        self.add(other.sum);
        self.add(other.comp);
        self.abs = abs + other.abs;
        self.count = count + other.count;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    pub fn abs_sum(&self) -> f64 {
        self.abs
    }

    /// Bound on the rounding error, `2u|S| + 2n u^2 sum|x|`, doubled for slack.
    pub fn rounding_bound(&self) -> f64 {
        let u = f64::EPSILON;
        4.0 * u * self.value().abs() + 4.0 * (self.count as f64) * u * u * self.abs
    }
}

pub const SHARD: usize = 8192;

/// Sums `f(i)` for `i in 0..len` component-wise.
///
/// Shards are accumulated independently and merged in shard order, so the
/// result does not depend on the size of the rayon pool.
pub fn sharded_sum<const K: usize, F>(len: usize, f: F) -> [Compensated; K]
where
    F: Fn(usize) -> [f64; K] + Sync,
{
    let shards: Vec<[Compensated; K]> = (0..len.div_ceil(SHARD))
        .into_par_iter()
        .map(|k| {
            let mut acc = [Compensated::new(); K];
            for i in k * SHARD..((k + 1) * SHARD).min(len) {
                let v = f(i);
                for (a, x) in acc.iter_mut().zip(v) {
                    a.add(x);
                }
            }
            acc
        })
        .collect();
    let mut total = [Compensated::new(); K];
    for shard in &shards {
        for (t, s) in total.iter_mut().zip(shard) {
            t.merge(s);
        }
    }
    total
}
