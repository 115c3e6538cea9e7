//! Spatial pooling.

use super::{Tape, Var};
use crate::element::Element;
use crate::exec;
use ndarray::{Array2, Array4, ArrayD, Ix4};

fn as4<F: Element>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 value")
}

impl<F: Element> Tape<F> {
    /// Max pooling with square window `k` and stride `s` (no padding).
    /// Ties resolve to the first element in scan order, deterministically.
    pub fn max_pool2d(&self, x: Var, k: usize, s: usize) -> Var {
        let vx = self.value(x);
        let x4 = as4(&vx);
        let (n, c, h, w) = x4.dim();
        let oh = (h - k) / s + 1;
        let ow = (w - k) / s + 1;

        let mut y = Array4::<F>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xs = vx.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let plane = h * w;
            let oplane = oh * ow;
            let mut chunks: Vec<(&mut [F], &mut [u32])> = ys
                .chunks_mut(c * oplane)
                .zip(argmax.chunks_mut(c * oplane))
                .collect();
            exec::par_for_each(&mut chunks, |ni, (y_n, a_n)| {
                for ci in 0..c {
                    let src = &xs[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut best = F::neg_infinity();
                            let mut best_idx = 0u32;
                            for ki in 0..k {
                                let row = (oi * s + ki) * w;
                                for kj in 0..k {
                                    let idx = row + oj * s + kj;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                            y_n[ci * oplane + oi * ow + oj] = best;
                            a_n[ci * oplane + oi * ow + oj] = best_idx;
                        }
                    }
                }
            });
        }

        self.push_op(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    let gs = g.as_slice().unwrap();
                    let dxs = dx.as_slice_mut().unwrap();
                    let plane = h * w;
                    let oplane = oh * ow;
                    let mut samples: Vec<&mut [F]> = dxs.chunks_mut(c * plane).collect();
                    exec::par_for_each(&mut samples, |ni, dx_n| {
                        for ci in 0..c {
                            let base_o = (ni * c + ci) * oplane;
                            for q in 0..oplane {
                                let idx = argmax[base_o + q] as usize;
                                dx_n[ci * plane + idx] =
                                    dx_n[ci * plane + idx] + gs[base_o + q];
                            }
                        }
                    });
                    dx.into_dyn()
                })]
            }),
        )
    }

    /// Mean over the spatial axes: `[n, c, h, w]` to `[n, c]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = as4(&vx);
        let (n, c, h, w) = x4.dim();
        let inv = F::one() / F::lit((h * w) as f64);
        let mut y = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = F::zero();
                for hi in 0..h {
                    for wi in 0..w {
                        acc = acc + x4[[ni, ci, hi, wi]];
                    }
                }
                y[[ni, ci]] = acc * inv;
            }
        }
        self.push_op(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g2[[ni, ci]] * inv;
                            for hi in 0..h {
                                for wi in 0..w {
                                    dx[[ni, ci, hi, wi]] = gv;
                                }
                            }
                        }
                    }
                    dx.into_dyn()
                })]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn max_pool_picks_maxima_and_routes_gradient() {
        let tape = Tape::<f64>::new();
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, h, w)| (h * 4 + w) as f64);
        let xv = tape.leaf(x.into_dyn());
        let y = tape.max_pool2d(xv, 2, 2);
        let yv = tape.value(y);
        assert_eq!(
            yv.view().into_dimensionality::<Ix4>().unwrap()[[0, 0, 1, 1]],
            15.0
        );
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let dx = grads.wrt(xv).unwrap();
        let dx4 = dx.view().into_dimensionality::<Ix4>().unwrap();
        // Only window maxima (bottom-right of each 2x2 block) receive gradient.
        assert_eq!(dx4[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx4[[0, 0, 0, 0]], 0.0);
        assert_eq!(dx4[[0, 0, 3, 3]], 1.0);
    }

    #[test]
    fn global_avg_pool_means() {
        let tape = Tape::<f64>::new();
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(n, c, _, _)| (n + c) as f64);
        let xv = tape.constant(x.into_dyn());
        let y = tape.global_avg_pool(xv);
        let yv = tape.value(y);
        let want = arr2(&[[0.0, 1.0, 2.0], [1.0, 2.0, 3.0]]).into_dyn();
        assert_eq!(&*yv, &want);
    }
}
