//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature the closures run on the rayon pool; without it
//! they run in a plain loop. Results come back in input order either way, and
//! callers derive any randomness from the item index, so both builds produce
//! identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `f(i)` for `i in 0..n`, collected in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// `f(item)` for every element of `items`, collected in order.
#[cfg(feature = "parallel")]
pub fn map<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Fallible variant of [`map`]; the first error in input order wins.
pub fn try_map<I, T, E, F>(items: &[I], f: F) -> Result<Vec<T>, E>
where
    I: Sync,
    T: Send,
    E: Send,
    F: Fn(&I) -> Result<T, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = map_indices(1000, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 3));
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(map(&items, |x| x + 1), (1..51).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_in_order() {
        let items: Vec<i32> = (0..20).collect();
        let r: Result<Vec<i32>, i32> = try_map(&items, |&x| if x % 7 == 6 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(6));
    }
}
