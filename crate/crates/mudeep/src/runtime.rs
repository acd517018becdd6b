//! Process-wide knobs: worker thread count for batch-parallel kernels.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the worker count for batch-parallel kernels. With 1 (the default)
/// every kernel runs on the calling thread and results are bitwise
/// reproducible; with more threads the batch is split per sample, which
/// keeps per-element reduction order unchanged.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}
