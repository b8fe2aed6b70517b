use rayon::prelude::*;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "CAAI_THREADS";

/// Configures the global worker pool from `CAAI_THREADS` (default: all
/// cores). Returns the thread count in effect. Calling it more than once is
/// harmless; only the first call takes effect.
pub fn init_threads_from_env() -> usize {
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = requested {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialised; {THREADS_ENV}={n} ignored");
        }
    }
    rayon::current_num_threads()
}

/// Maps `f` over batch indices `0..n`, in parallel when `n > 1`. Results are
/// returned in index order regardless of scheduling.
pub(crate) fn map_batch<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    if n <= 1 || rayon::current_num_threads() == 1 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}
