//! Data-parallel execution policy.
//!
//! Every embarrassingly parallel loop in the crate (corpus generation,
//! per-system forward/backward passes, scoring) goes through [`Exec`]. With
//! the `parallel` feature the work is spread over the rayon pool; without it,
//! or with [`Exec::Sequential`], the same closures run in order on the calling
//! thread. Results are always returned in input order, so outputs do not
//! depend on the policy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Picks the parallel policy when `workers != 1` and the feature is on.
    pub fn from_workers(workers: usize) -> Self {
        if workers == 1 {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// Map then fold with an associative `reduce`; `None` for empty input.
    pub fn map_reduce<T, R, F, G>(self, items: &[T], f: F, reduce: G) -> Option<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
        G: Fn(R, R) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).reduce(reduce),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).reduce_with(reduce),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree_on_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&xs, |x| x * x);
        let def = Exec::default().map(&xs, |x| x * x);
        assert_eq!(seq, def);
        assert_eq!(Exec::default().map_reduce(&xs, |x| *x, |a, b| a + b), Some(499_500));
        assert_eq!(Exec::Sequential.map_reduce(&[] as &[u64], |x| *x, |a, b| a + b), None);
    }
}
