//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the helpers dispatch to rayon;
//! without it they run on the calling thread. Every helper keeps results in
//! input order, so the output is bit-identical whichever path runs.
//!
//! The runtime switch [`set_parallel`] lets benches compare both paths inside
//! one binary.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Minimum number of rows before a row kernel is split across threads.
#[cfg(feature = "parallel")]
const MIN_PAR_ROWS: usize = 64;

/// Enables or disables the rayon path at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f(row_index, row)` over each `width`-sized chunk of `out`.
pub fn for_each_row_mut<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && out.len() / width >= MIN_PAR_ROWS {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Ordered map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert!(ys.iter().enumerate().all(|(i, y)| *y == 2 * i));
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn row_kernel_matches_sequential() {
        let mut a = vec![0.0; 300 * 3];
        for_each_row_mut(&mut a, 3, |i, row| row.iter_mut().for_each(|v| *v = i as f64));
        assert!(a.chunks(3).enumerate().all(|(i, r)| r.iter().all(|v| *v == i as f64)));
    }
}
