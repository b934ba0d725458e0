//! Data-parallel loop helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default), these fan work out over a
//! rayon pool; without it they run plain sequential loops. Every call site
//! is written so each work item owns a disjoint slice of the output, which
//! makes the parallel result bit-identical to the sequential one regardless
//! of worker count.

/// Runs `f` on each element of `items` in index order (or in parallel when
/// the `parallel` feature is on).
pub fn for_each_indexed<T: Send, F: Fn(usize, &mut T) + Sync + Send>(items: &mut [T], f: F) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, t) in items.iter_mut().enumerate() {
            f(i, t);
        }
    }
}

/// Splits `out` into consecutive chunks of `chunk` elements and runs `f` on
/// each, passing the chunk index.
pub fn for_each_chunk<F: Fn(usize, &mut [f32]) + Sync + Send>(out: &mut [f32], chunk: usize, f: F) {
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Maps `0..n` to a vector, evaluating items in parallel when enabled.
/// Output order always matches the index order.
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f` inside a pool of exactly `workers` threads. With the sequential
/// build (or `workers == 0`) the closure runs on the current thread with
/// whatever pool is already active.
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: usize, f: F) -> T {
    #[cfg(feature = "parallel")]
    {
        if workers == 0 {
            return f();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

/// True when this build can actually fan out work.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
