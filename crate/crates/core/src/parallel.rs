//! Order-preserving sample-level parallelism.

use rayon::prelude::*;
use rayon::ThreadPoolBuilder;

use crate::error::{Error, Result};

/// `f(0), ..., f(n - 1)` evaluated on `workers` threads, collected in index
/// order. Results do not depend on the worker count as long as `f` is pure.
pub fn par_map<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers == 0 {
        return Err(Error::param("workers", "must be at least 1"));
    }
    let pool = ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let one = par_map(1, 100, |i| Ok(i * i)).unwrap();
        let many = par_map(7, 100, |i| Ok(i * i)).unwrap();
        assert_eq!(one, many);
        assert!(par_map(0, 1, Ok).is_err());
    }

    #[test]
    fn first_error_propagates() {
        let r: Result<Vec<usize>> = par_map(3, 10, |i| {
            if i == 4 {
                Err(Error::domain("boom"))
            } else {
                Ok(i)
            }
        });
        assert!(r.is_err());
    }
}
