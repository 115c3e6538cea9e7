//! Data-parallel execution helpers.
//!
//! Every parallel loop in the crate decomposes work into chunks whose
//! boundaries depend only on problem shape, never on the worker count, and
//! writes into disjoint outputs. Floating-point reduction order is therefore
//! identical in parallel and sequential execution, so results are
//! bit-identical with the `parallel` feature on or off, and at any thread
//! count. `set_sequential(true)` forces plain loops at runtime (used by the
//! benchmarks and by `--deterministic`, which also documents intent).

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn sequential() -> bool {
    SEQUENTIAL.load(Ordering::SeqCst) || !cfg!(feature = "parallel")
}

/// Apply `f` to every element of `items` with its index.
pub fn par_for_each<T: Send, F: Fn(usize, &mut T) + Send + Sync>(items: &mut [T], f: F) {
    #[cfg(feature = "parallel")]
    {
        if !sequential() {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
    }
    for (i, t) in items.iter_mut().enumerate() {
        f(i, t);
    }
}

/// Map indices `0..n` to values, preserving index order in the result.
pub fn par_map<T: Send, F: Fn(usize) -> T + Send + Sync>(n: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        if !sequential() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let v = par_map(100, |i| i * 3);
        assert_eq!(v, (0..100).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_toggle_matches_parallel() {
        let mut a = vec![0u64; 1000];
        par_for_each(&mut a, |i, x| *x = (i as u64).wrapping_mul(2654435761));
        set_sequential(true);
        let mut b = vec![0u64; 1000];
        par_for_each(&mut b, |i, x| *x = (i as u64).wrapping_mul(2654435761));
        set_sequential(false);
        assert_eq!(a, b);
    }
}
