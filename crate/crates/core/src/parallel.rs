//! Worker-pool configuration.
//!
//! `CQCD_THREADS` caps the rayon pool used by the per-frame loops. Results do
//! not depend on the thread count: work is split into fixed-size chunks and
//! reductions run in a fixed order.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Pool honoring `CQCD_THREADS`; falls back to the rayon default.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("CQCD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build worker pool")
    })
}

/// Runs `op` inside the configured pool.
pub fn install<R: Send>(op: impl FnOnce() -> R + Send) -> R {
    pool().install(op)
}
