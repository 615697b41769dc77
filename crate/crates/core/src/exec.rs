//! Execution strategy for the data-parallel inner loops.
//!
//! Every fan-out in the crate (per-example scoring, per-class beam search,
//! per-mapping fine-tuning) goes through [`Exec`]. Results are always
//! collected in input order, so the choice of strategy never changes
//! numerical output. Without the `parallel` feature, [`Exec::Parallel`]
//! runs sequentially.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Strategy for a worker count: `1` is sequential, anything else parallel.
    pub fn for_workers(workers: usize) -> Self {
        if workers == 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Like [`Exec::map`] but short-circuits on the first error in input order.
    pub fn try_map<T, R, F>(self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    pub fn try_map_range<R, F>(self, len: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            let out: Vec<Result<R>> = (0..len).into_par_iter().map(f).collect();
            return out.into_iter().collect();
        }
        (0..len).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&xs, |x| x * x);
        let par = Exec::Parallel.map(&xs, |x| x * x);
        assert_eq!(seq, par);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs: Vec<i32> = (0..100).collect();
        let r = Exec::Parallel.try_map(&xs, |&x| {
            if x == 10 || x == 50 {
                Err(crate::Error::Search(format!("bad {x}")))
            } else {
                Ok(x)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "search error: bad 10");
    }
}
