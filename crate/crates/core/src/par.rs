//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon global
//! pool; without it they run on the calling thread. Results are always
//! returned in input order, and every caller reduces them sequentially, so
//! outputs are bitwise identical whichever path runs.
//!
//! [`sequential`] forces the serial path for the duration of a closure, which
//! lets benchmarks compare both paths inside one build.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with every helper in this module executing serially on the
/// current thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

fn serial() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Whether the helpers currently fan out across threads.
pub fn is_parallel() -> bool {
    !serial()
}

/// Map over `0..n`, preserving index order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    if serial() {
        return (0..n).map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

/// Map over a slice, preserving order.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Apply `f` to every chunk of `data` of length `chunk` (the last may be
/// shorter), passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if serial() {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
