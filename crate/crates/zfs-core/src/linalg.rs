//! Deterministic block-parallel matrix multiply.
//!
//! The larger output dimension is split into a fixed number of blocks
//! (independent of the worker count) and each block is computed by a
//! single-threaded gemm with the full inner dimension. Summation order per
//! output element is therefore fixed, which keeps results bit-identical
//! between sequential and parallel execution.

use crate::element::Element;
use crate::exec;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

/// Block count for the split dimension. Depends only on the problem shape,
/// never on the worker count. Inner-dimension-heavy products get fewer blocks
/// because every block call re-packs the long operand.
fn block_count(m: usize, k: usize, n: usize) -> usize {
    if k > 4 * m.max(n) {
        2
    } else {
        8
    }
}

/// c = alpha * a·b + beta * c
pub fn matmul_into<F: Element>(
    alpha: F,
    a: &ArrayView2<F>,
    b: &ArrayView2<F>,
    beta: F,
    c: &mut ArrayViewMut2<F>,
) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions differ: {k} vs {k2}");
    assert_eq!(c.dim(), (m, n), "output shape mismatch");
    let blocks = block_count(m, k, n);

    if m >= n && m >= 2 * blocks {
        let bs = m.div_ceil(blocks);
        let mut parts: Vec<ArrayViewMut2<F>> = c.axis_chunks_iter_mut(Axis(0), bs).collect();
        exec::par_for_each(&mut parts, |i, cb| {
            let r0 = i * bs;
            let ab = a.slice(s![r0..r0 + cb.nrows(), ..]);
            general_mat_mul(alpha, &ab, b, beta, cb);
        });
    } else if n > m && n >= 2 * blocks {
        let bs = n.div_ceil(blocks);
        let mut parts: Vec<ArrayViewMut2<F>> = c.axis_chunks_iter_mut(Axis(1), bs).collect();
        exec::par_for_each(&mut parts, |i, cb| {
            let c0 = i * bs;
            let bb = b.slice(s![.., c0..c0 + cb.ncols()]);
            general_mat_mul(alpha, a, &bb, beta, cb);
        });
    } else {
        general_mat_mul(alpha, a, b, beta, c);
    }
}

pub fn matmul<F: Element>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    let mut c = Array2::<F>::zeros((a.nrows(), b.ncols()));
    matmul_into(F::one(), a, b, F::zero(), &mut c.view_mut());
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (m, k) = a.dim();
        let n = b.ncols();
        let mut c = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[[i, p]] * b[[p, j]];
                }
                c[[i, j]] = acc;
            }
        }
        c
    }

    #[test]
    fn matches_naive() {
        for &(m, k, n) in &[(3, 4, 5), (64, 17, 33), (130, 7, 2), (5, 9, 200)] {
            let a = Array::from_shape_fn((m, k), |(i, j)| ((i * 31 + j * 7) % 13) as f64 - 6.0);
            let b = Array::from_shape_fn((k, n), |(i, j)| ((i * 5 + j * 11) % 17) as f64 - 8.0);
            let c = matmul(&a.view(), &b.view());
            let r = naive(&a, &b);
            assert!(c.iter().zip(r.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn transposed_view_operand() {
        let a = Array::from_shape_fn((20, 6), |(i, j)| (i + 2 * j) as f32);
        let bt = Array::from_shape_fn((30, 6), |(i, j)| (i as f32) - (j as f32));
        let c = matmul(&a.view(), &bt.t());
        let c2 = a.dot(&bt.t());
        assert_eq!(c, c2);
    }

    #[test]
    fn parallel_equals_sequential_bitwise() {
        let a = Array::from_shape_fn((200, 300), |(i, j)| ((i * j + 3) as f32).sin());
        let b = Array::from_shape_fn((300, 150), |(i, j)| ((i + 7 * j) as f32).cos());
        let c_par = matmul(&a.view(), &b.view());
        crate::exec::set_sequential(true);
        let c_seq = matmul(&a.view(), &b.view());
        crate::exec::set_sequential(false);
        assert_eq!(c_par, c_seq);
    }
}
