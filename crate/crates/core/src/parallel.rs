//! Order-preserving map over independent jobs.
//!
//! With the `parallel` feature the jobs run on a rayon pool whose size is
//! capped by `RECEM_THREADS`; without it they run in order on the caller's
//! thread. Results are identical either way because every job derives its
//! randomness from its own seed.

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "RECEM_THREADS";

/// Worker count requested through `RECEM_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Applies `f` to every item, one after another.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let threads = thread_cap().unwrap_or_else(rayon::current_num_threads);
    if threads <= 1 || items.len() <= 1 {
        return seq_map(items, f);
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("falling back to sequential execution: {e}");
            seq_map(items, f)
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    seq_map(items, f)
}
