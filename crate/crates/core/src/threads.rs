//! Worker-count plumbing.
//!
//! Serial mode (one worker) is the default and gives bit-reproducible
//! results. Raising the count parallelizes matmul over output rows and
//! independent Monte-Carlo trials; row-level parallelism never reassociates
//! floating-point sums, so results stay identical to serial mode.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the worker count (the CLI wires `SNAPDIFF_THREADS` here).
pub fn set_threads(n: usize) {
    let n = n.max(1);
    THREADS.store(n, Ordering::Relaxed);
    if n > 1 {
        // Best effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn get() -> usize {
    THREADS.load(Ordering::Relaxed)
}
