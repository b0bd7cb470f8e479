//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always cut into the same fixed-size chunks and partial results
//! are merged by a fixed pairwise tree, so floating-point results do not
//! depend on whether rayon is enabled or on the worker count. Without the
//! `parallel` feature, [`Execution::Parallel`] runs sequentially.

/// Pixels per work item in chunked reductions.
pub const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Ordered map over `0..n`.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Splits `0..n` into ranges of `chunk`, maps each, and merges the partials
/// pairwise in index order. Returns `None` when `n == 0`.
pub fn chunked_reduce<T, M, R>(n: usize, chunk: usize, exec: Execution, map: M, merge: R) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    R: Fn(T, T) -> T,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let partials = map_indexed(n_chunks, exec, |c| {
        let lo = c * chunk;
        map(lo..(lo + chunk).min(n))
    });
    pairwise(partials, merge)
}

/// Fixed-shape pairwise tree reduction.
pub fn pairwise<T, R>(mut items: Vec<T>, merge: R) -> Option<T>
where
    R: Fn(T, T) -> T,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Runs `f` on a pool capped at `threads` workers (ignored without rayon).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}
