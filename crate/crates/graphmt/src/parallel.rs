//! Execution-mode switch for the data-parallel inner loops (per-example
//! gradients, corpus decoding, corpus embedding). `Parallel` uses rayon when
//! the `parallel` feature is enabled and silently degrades to sequential
//! otherwise. Results are identical either way: maps preserve input order and
//! all reductions happen sequentially over the collected outputs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Parallel,
    Sequential,
}

impl Default for Exec {
    fn default() -> Self {
        Exec::Parallel
    }
}

/// Order-preserving indexed map over a slice.
pub fn map_indexed<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    match exec {
        Exec::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        Exec::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items
                    .par_iter()
                    .enumerate()
                    .map(|(i, t)| f(i, t))
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}
