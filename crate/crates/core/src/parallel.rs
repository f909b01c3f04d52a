//! Runtime switch between the rayon work-stealing path and a plain
//! sequential path.
//!
//! Every parallel kernel splits its output into disjoint chunks and keeps
//! the reduction order inside each chunk identical to the sequential code,
//! so both paths produce bitwise-identical results. The switch exists for
//! benchmarking and for debugging on machines where thread startup noise
//! matters; correctness never depends on it.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. No-op when the crate is
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// True when kernels will dispatch onto the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len` slices of `data`.
///
/// Chunks are disjoint, so the parallel dispatch is race-free and the
/// result does not depend on scheduling.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel_enabled() {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_cover_input() {
        let mut data = vec![0usize; 12];
        for_each_chunk_mut(&mut data, 3, |i, chunk| {
            for v in chunk.iter_mut() {
                *v = i;
            }
        });
        assert_eq!(data, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn toggle_round_trips() {
        let before = parallel_enabled();
        set_parallel(false);
        assert!(!parallel_enabled());
        set_parallel(true);
        set_parallel(before);
    }
}
