//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature the kernels split work over the batch (or
//! over output channels) with rayon. Every task writes a disjoint slice of
//! the output and reductions across tasks are summed in a fixed order, so
//! results are bitwise identical for any thread count. Without the feature,
//! or after [`set_sequential`]`(true)`, the same closures run in a plain loop.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the single-threaded code path at runtime.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// Whether kernels currently run sequentially.
pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || SEQUENTIAL.load(Ordering::Relaxed)
}

/// Configure kernel parallelism for the whole process. `threads == 1`
/// selects the sequential path; larger values size the global rayon pool
/// (which can only be sized once per process).
pub fn configure_threads(threads: usize) -> crate::Result<()> {
    if threads == 0 {
        return Err(crate::Error::InvalidArgument("threads must be >= 1".into()));
    }
    if threads == 1 {
        set_sequential(true);
        return Ok(());
    }
    set_sequential(false);
    #[cfg(feature = "parallel")]
    {
        // A pool that was already built keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(())
}

/// Run `f(i, chunk)` for every `chunk_len`-sized chunk of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
