//! Dispatch between sequential and rayon execution for compute-heavy kernels.
//!
//! Every parallel site splits the output buffer into disjoint chunks and runs
//! the same per-chunk computation in the same per-element order as the
//! sequential path, so results are bitwise identical regardless of mode or
//! thread count. The runtime toggle exists so benchmarks can compare both
//! paths in one process; builds without the `parallel` feature compile the
//! sequential path only.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Minimum number of output elements before a kernel is worth farming out.
const PAR_MIN_ELEMS: usize = 4096;

/// Enables or disables rayon dispatch at runtime. No effect without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Fills `out` by handing each `chunk_len`-sized piece to `f` with its chunk
/// index. The final chunk may be shorter when `out.len()` is not a multiple.
pub fn fill_chunks<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && out.len() >= PAR_MIN_ELEMS && out.len() > chunk_len {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
