//! Data-parallel helpers with a sequential fallback when the `rayon` feature
//! is disabled.

/// True when built with the `rayon` feature.
pub const fn is_parallel_available() -> bool {
    cfg!(feature = "rayon")
}

/// Maps `f` over `0..count`, preserving order.
#[cfg(feature = "rayon")]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "rayon"))]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
#[cfg(feature = "rayon")]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "rayon"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        assert_eq!(map_indexed(100, |i| i * 2), (0..100).map(|i| i * 2).collect::<Vec<_>>());
        assert_eq!(map(&[3, 1, 2], |x| x + 1), vec![4, 2, 3]);
    }
}
