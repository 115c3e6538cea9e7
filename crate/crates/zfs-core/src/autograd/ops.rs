//! Elementwise, matrix, and reduction operations on the tape.

use super::{Tape, Var};
use crate::element::Element;
use crate::exec;
use crate::linalg;
use ndarray::{arr0, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

fn as2<F: Element>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

impl<F: Element> Tape<F> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![need[0].then(|| g.clone()), need[1].then(|| g.mapv(|x| -x))]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * &*vb),
                    need[1].then(|| g * &*va),
                ]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g.mapv(|x| x * c))]),
        )
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x + c);
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g.clone())]),
        )
    }

    /// `x` of shape `[n, c]` plus a bias row of shape `[c]`.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let x2 = as2(&vx);
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias rank 1");
        assert_eq!(x2.ncols(), b1.len(), "add_bias: width mismatch");
        let out = (&x2 + &b1).into_dyn();
        self.push_op(
            out,
            vec![x, b],
            Box::new(move |g, need| {
                let g2 = as2(g);
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g2.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = std::rc::Rc::new(va.mapv(|x| x.exp()));
        let cap = std::rc::Rc::clone(&out);
        self.push_op_rc(
            out,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g * &*cap)]),
        )
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.ln());
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g / &*va)]),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * x);
        let two = F::lit(2.0);
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g * &va.mapv(|x| x * two))]),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = std::rc::Rc::new(va.mapv(stable_sigmoid));
        let cap = std::rc::Rc::clone(&out);
        self.push_op_rc(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| g * &cap.mapv(|s| s * (F::one() - s)))]
            }),
        )
    }

    /// softplus(x) = ln(1 + e^x), computed without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(stable_softplus);
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| g * &va.mapv(stable_sigmoid))]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| if x > F::zero() { x } else { x * slope });
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&va, |d, &x| {
                        if x <= F::zero() {
                            *d = *d * slope;
                        }
                    });
                    dg
                })]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, F::zero())
    }

    /// Clamp values to `[lo, hi]`; gradient is passed through strictly inside
    /// the interval and zero outside.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(lo).min(hi));
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&va, |d, &x| {
                        if x < lo || x > hi {
                            *d = F::zero();
                        }
                    });
                    dg
                })]
            }),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = arr0(va.sum()).into_dyn();
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| {
                let gs = *g.iter().next().unwrap();
                vec![need[0].then(|| ArrayD::from_elem(IxDyn(va.shape()), gs))]
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let old_shape: Vec<usize> = va.shape().to_vec();
        let data: Vec<F> = va.iter().copied().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let data: Vec<F> = g.iter().copied().collect();
                    ArrayD::from_shape_vec(IxDyn(&old_shape), data).unwrap()
                })]
            }),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), axes.len());
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push_op(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned()
                })]
            }),
        )
    }

    /// `a` of shape `[m, k]` times `b` of shape `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = as2(&va);
        let b2 = as2(&vb);
        let out = linalg::matmul(&a2, &b2).into_dyn();
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                let g2 = as2(g);
                let da = need[0].then(|| linalg::matmul(&g2, &as2(&vb).t()).into_dyn());
                let db = need[1].then(|| linalg::matmul(&as2(&va).t(), &g2).into_dyn());
                vec![da, db]
            }),
        )
    }

    /// Row-wise log-softmax of `[n, k]`.
    pub fn log_softmax(&self, a: Var) -> Var {
        let va = self.value(a);
        let x = as2(&va);
        let mut out = Array2::<F>::zeros(x.dim());
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
            let mx = xrow.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = xrow
                .iter()
                .map(|&v| (v - mx).exp())
                .fold(F::zero(), |s, e| s + e)
                .ln()
                + mx;
            for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                *o = v - lse;
            }
        }
        let out = std::rc::Rc::new(out.into_dyn());
        let cap = std::rc::Rc::clone(&out);
        self.push_op_rc(
            out,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let g2 = as2(g);
                    let logp = as2(&cap);
                    let mut dx = g2.to_owned();
                    for i in 0..dx.nrows() {
                        let gsum = g2.row(i).sum();
                        for j in 0..dx.ncols() {
                            dx[[i, j]] = dx[[i, j]] - logp[[i, j]].exp() * gsum;
                        }
                    }
                    dx.into_dyn()
                })]
            }),
        )
    }

    /// Mean negative log-likelihood of `logp[i, labels[i]]`. Labels must be
    /// validated by the caller.
    pub fn nll_loss(&self, logp: Var, labels: &[usize]) -> Var {
        let vl = self.value(logp);
        let lp = as2(&vl);
        assert_eq!(lp.nrows(), labels.len(), "nll_loss: batch mismatch");
        let n = labels.len();
        let inv_n = F::one() / F::lit(n as f64);
        let mut acc = F::zero();
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < lp.ncols(), "nll_loss: label out of range");
            acc = acc - lp[[i, y]];
        }
        let out = arr0(acc * inv_n).into_dyn();
        let labels: Vec<usize> = labels.to_vec();
        let (rows, cols) = lp.dim();
        self.push_op(
            out,
            vec![logp],
            Box::new(move |g, need| {
                let gs = *g.iter().next().unwrap();
                vec![need[0].then(|| {
                    let mut dx = Array2::<F>::zeros((rows, cols));
                    for (i, &y) in labels.iter().enumerate() {
                        dx[[i, y]] = -gs * inv_n;
                    }
                    dx.into_dyn()
                })]
            }),
        )
    }

    /// All pairwise squared Euclidean distances between rows of `u` (`[n, d]`)
    /// and rows of `p` (`[k, d]`), yielding `[n, k]`.
    pub fn pairwise_sqdist(&self, u: Var, p: Var) -> Var {
        let (vu, vp) = (self.value(u), self.value(p));
        let u2 = as2(&vu);
        let p2 = as2(&vp);
        assert_eq!(u2.ncols(), p2.ncols(), "pairwise_sqdist: dim mismatch");
        let out = sqdist_direct(&u2, &p2).into_dyn();
        self.push_op(
            out,
            vec![u, p],
            Box::new(move |g, need| {
                let g2 = as2(g);
                let u2 = as2(&vu);
                let p2 = as2(&vp);
                let two = F::lit(2.0);
                let du = need[0].then(|| {
                    // dU = 2 * (rowsum(g) ∘ u - g·p)
                    let mut du = linalg::matmul(&g2, &p2);
                    let rsum = g2.sum_axis(Axis(1));
                    for (i, mut row) in du.rows_mut().into_iter().enumerate() {
                        let r = rsum[i];
                        for (j, d) in row.iter_mut().enumerate() {
                            *d = two * (r * u2[[i, j]] - *d);
                        }
                    }
                    du.into_dyn()
                });
                let dp = need[1].then(|| {
                    // dP = 2 * (colsum(g) ∘ p - gᵀ·u)
                    let mut dp = linalg::matmul(&g2.t(), &u2);
                    let csum = g2.sum_axis(Axis(0));
                    for (kk, mut row) in dp.rows_mut().into_iter().enumerate() {
                        let c = csum[kk];
                        for (j, d) in row.iter_mut().enumerate() {
                            *d = two * (c * p2[[kk, j]] - *d);
                        }
                    }
                    dp.into_dyn()
                });
                vec![du, dp]
            }),
        )
    }

    pub(crate) fn push_op_rc(
        &self,
        value: super::Value<F>,
        parents: Vec<Var>,
        back: Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>,
    ) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        if needs {
            self.insert(value, parents, Some(back), true)
        } else {
            self.insert(value, Vec::new(), None, false)
        }
    }
}

fn stable_sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn stable_softplus<F: Element>(x: F) -> F {
    x.max(F::zero()) + (-(x.abs())).exp().ln_1p()
}

/// Direct (non-expanded) squared distances, parallel over query rows.
pub(crate) fn sqdist_direct<F: Element>(
    u: &ndarray::ArrayView2<F>,
    p: &ndarray::ArrayView2<F>,
) -> Array2<F> {
    let (n, d) = u.dim();
    let k = p.nrows();
    let mut out = Array2::<F>::zeros((n, k));
    let mut rows: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    exec::par_for_each(&mut rows, |i, orow| {
        let urow = u.row(i);
        for kk in 0..k {
            let prow = p.row(kk);
            let mut acc = F::zero();
            for j in 0..d {
                let diff = urow[j] - prow[j];
                acc = acc + diff * diff;
            }
            orow[kk] = acc;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let lp = tape.log_softmax(x);
        let v = tape.value(lp);
        for row in as2(&v).rows() {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_of_uniform_is_ln_k() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Array2::<f64>::zeros((4, 150)).into_dyn());
        let lp = tape.log_softmax(x);
        let loss = tape.nll_loss(lp, &[0, 10, 50, 149]);
        assert!((tape.scalar(loss) - (150.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sqdist_matches_expanded_form() {
        let tape = Tape::<f64>::new();
        let u = tape.leaf(arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]).into_dyn());
        let p = tape.leaf(arr2(&[[0.0, 0.0], [1.0, 1.0]]).into_dyn());
        let d = tape.pairwise_sqdist(u, p);
        let dv = tape.value(d);
        let (uv, pv) = (tape.value(u), tape.value(p));
        let u2 = as2(&uv);
        let p2 = as2(&pv);
        for i in 0..3 {
            for k in 0..2 {
                let un: f64 = u2.row(i).iter().map(|x| x * x).sum();
                let pn: f64 = p2.row(k).iter().map(|x| x * x).sum();
                let dot: f64 = u2.row(i).iter().zip(p2.row(k)).map(|(a, b)| a * b).sum();
                let expanded = un - 2.0 * dot + pn;
                assert!((dv[[i, k]] - expanded).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr1(&[0.0]).into_dyn());
        let y = tape.softplus(x);
        assert!((tape.value(y)[[0]] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn clamp_kills_gradient_outside_range() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[-40.0, 0.0, 40.0]).into_dyn());
        let y = tape.clamp(x, -30.0, 30.0);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss);
        assert_eq!(g.wrt(x).unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }
}
