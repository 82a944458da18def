//! Execution-strategy switch for the data-parallel inner loops.
//!
//! Channel-level loops (MIMO entries, per-channel static maps, finite-difference
//! probes) are independent tasks and may run on the rayon pool. Everything that
//! is recurrent in time stays sequential regardless of the strategy. Results are
//! collected in index order, so both strategies produce bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How independent tasks are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Plain sequential loops.
    Sequential,
    /// Rayon work-stealing pool.
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Sequential
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Applies `f` to every element of `data` in place.
pub fn for_each_mut<T, F>(mode: ExecMode, data: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    match mode {
        ExecMode::Sequential => data.iter_mut().for_each(f),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => data.par_iter_mut().for_each(f),
    }
}
