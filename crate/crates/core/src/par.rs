//! Data-parallel fan-out with a sequential fallback.
//!
//! Hot loops (per-frame renders, per-sequence evaluation, pixel rows in the
//! rasterizer backward pass) fan out through [`map_indexed`]. With the
//! `parallel` feature the work runs on the rayon pool; without it the same
//! closure runs serially. Results are always collected in index order, so
//! downstream reductions see a fixed operand order and stay deterministic
//! regardless of thread scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential variant, always available. Benches compare this against
/// [`map_indexed`] to measure the rayon speedup.
pub fn map_indexed_serial<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Map over ordered items by reference.
pub fn map_slice<'a, T, R, F>(items: &'a [T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&'a T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_agree_in_order() {
        let a = map_indexed(100, |i| i * i);
        let b = map_indexed_serial(100, |i| i * i);
        assert_eq!(a, b);
    }
}
