//! Streaming mean/variance with an order-fixed merge.
//!
//! Per-path values are folded into chunk accumulators and chunks are
//! merged left to right, so results do not depend on the worker count.

use rayon::prelude::*;

/// Number of paths folded sequentially before a merge.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStat {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStat) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.m2 += other.m2 + delta * delta * (self.count as f64) * (other.count as f64) / n;
        self.mean += delta * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// A vector of independent running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StatVec(pub Vec<RunningStat>);

impl StatVec {
    pub fn new(len: usize) -> Self {
        StatVec(vec![RunningStat::default(); len])
    }

    pub fn push(&mut self, values: &[f64]) {
        for (s, v) in self.0.iter_mut().zip(values) {
            s.push(*v);
        }
    }

    pub fn merge(&mut self, other: &StatVec) {
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            s.merge(o);
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.0.iter().map(|s| s.mean).collect()
    }

    pub fn stderrs(&self) -> Vec<f64> {
        self.0.iter().map(|s| s.stderr()).collect()
    }
}

/// Runs `per_path(index, &mut row)` for every path in parallel and
/// reduces the rows of length `width` into running statistics in fixed
/// chunk order. `per_path` may fail; the first failure in path order wins.
pub fn reduce_paths<E, F>(n_paths: usize, width: usize, per_path: F) -> Result<StatVec, E>
where
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<(), E> + Sync,
{
    let n_chunks = n_paths.div_ceil(CHUNK);
    let chunks: Vec<Result<StatVec, E>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = StatVec::new(width);
            let mut row = vec![0.0; width];
            let end = ((c + 1) * CHUNK).min(n_paths);
            for p in c * CHUNK..end {
                per_path(p, &mut row)?;
                acc.push(&row);
            }
            Ok(acc)
        })
        .collect();
    let mut total = StatVec::new(width);
    for chunk in chunks {
        total.merge(&chunk?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let mut seq = RunningStat::default();
        xs.iter().for_each(|x| seq.push(*x));
        let mut a = RunningStat::default();
        let mut b = RunningStat::default();
        xs[..333].iter().for_each(|x| a.push(*x));
        xs[333..].iter().for_each(|x| b.push(*x));
        a.merge(&b);
        assert!((a.mean - seq.mean).abs() < 1e-12);
        assert!((a.variance() - seq.variance()).abs() < 1e-10);
    }

    #[test]
    fn constant_values_have_zero_spread() {
        let s = reduce_paths::<(), _>(1000, 1, |_, row| {
            row[0] = 0.2;
            Ok(())
        })
        .unwrap();
        assert_eq!(s.0[0].stderr(), 0.0);
        assert_eq!(s.0[0].mean, 0.2);
    }
}
