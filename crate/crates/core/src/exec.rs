//! Data-parallel execution with a sequential fallback.
//!
//! Every fan-out in the crate goes through [`Exec::map`], which always returns
//! results in input order. Reductions over those results are done by the
//! caller in that fixed order, so parallel and sequential runs produce
//! bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// behaves like `Sequential`.
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Like [`Exec::map`] but never runs more than `limit` items concurrently.
    pub fn map_bounded<T, U, F>(self, items: &[T], limit: Option<usize>, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match limit {
            Some(n) if n > 0 && n < items.len() => {
                let mut out = Vec::with_capacity(items.len());
                for chunk in items.chunks(n) {
                    out.extend(self.map(chunk, &f));
                }
                out
            }
            _ => self.map(items, f),
        }
    }
}
