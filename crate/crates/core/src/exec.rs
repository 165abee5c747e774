//! Execution control: thread pool sizing and the strict sequential mode.
//!
//! Every kernel computes each output element with a fixed-order inner
//! reduction, so parallel and sequential execution produce bit-identical
//! results within one build. The sequential mode exists so reproducibility
//! tests can rule scheduling out entirely.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);
static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
static CONFIGURED_THREADS: OnceLock<usize> = OnceLock::new();

thread_local! {
    /// Set on threads spawned by [`run_jobs`]. Jobs own a full
    /// independent run (a stream training, a sweep cell), so their
    /// kernels execute inline: the pool stays reserved for short kernel
    /// tasks and is never occupied by minutes-long work that would
    /// starve other callers.
    static IN_JOB: Cell<bool> = const { Cell::new(false) };
}

/// Cap internal parallelism. Takes effect only before the pool is first
/// used; later calls are ignored. `1` implies sequential execution.
pub fn configure_threads(n: usize) {
    let _ = CONFIGURED_THREADS.set(n.max(1));
}

/// Reads the `MUSTGAN_THREADS` environment variable, defaulting to the
/// hardware concurrency.
pub fn threads_from_env() -> usize {
    std::env::var("MUSTGAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let n = *CONFIGURED_THREADS.get_or_init(threads_from_env);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("failed to build thread pool")
    })
}

/// Switch the strict sequential-reduction mode on or off.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    SEQUENTIAL.load(Ordering::SeqCst)
}

/// Effective worker count for kernel-level parallelism.
pub fn max_threads() -> usize {
    if is_sequential() {
        1
    } else {
        *CONFIGURED_THREADS.get_or_init(threads_from_env)
    }
}

/// Process disjoint chunks of `data` with `f(chunk_start, chunk)`. Each
/// chunk is a whole number of `unit_len` items (the last may be shorter);
/// chunks may span several units, so handlers must iterate units within
/// the slice they receive.
///
/// Runs sequentially when the sequential mode is active, when the caller
/// is already executing on the pool (outer-level parallelism over
/// independent runs wins over kernel-level splitting), or when the work
/// is too small to amortize task overhead.
pub(crate) fn for_each_chunk<E, F>(data: &mut [E], unit_len: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    let unit_len = unit_len.max(1);
    let threads = max_threads();
    let units = data.len().div_ceil(unit_len);
    let nested = IN_JOB.with(|flag| flag.get()) || rayon::current_thread_index().is_some();
    if threads == 1 || nested || units <= 1 || data.len() < (1 << 14) {
        f(0, data);
        return;
    }
    let units_per_task = units.div_ceil(threads * 4).max(1);
    let task_len = units_per_task * unit_len;
    use rayon::prelude::*;
    pool().install(|| {
        data.par_chunks_mut(task_len)
            .enumerate()
            .for_each(|(ci, chunk)| f(ci * task_len, chunk));
    });
}

/// Run independent jobs (disjoint state) to completion, in parallel
/// unless sequential mode is active. Used for stream trainings and sweep
/// cells.
///
/// Jobs run on scoped OS threads, not on the kernel pool: a job lasts
/// minutes, and parking it on a pool worker would starve every kernel
/// task queued behind it. Inside a job, kernels run inline and nested
/// `run_jobs` calls run sequentially; the top-level job fan-out is
/// already at least the worker count everywhere this is used.
pub fn run_jobs<T, F>(jobs: Vec<F>) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let inside_job = IN_JOB.with(|flag| flag.get());
    if max_threads() == 1 || jobs.len() <= 1 || inside_job {
        jobs.into_iter().map(|j| j()).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|job| {
                    scope.spawn(move || {
                        IN_JOB.with(|flag| flag.set(true));
                        job()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        })
    }
}
