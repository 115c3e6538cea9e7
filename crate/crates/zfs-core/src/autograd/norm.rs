//! Batch normalization over `[n, c, h, w]`, with the block's rectifier fused
//! in (`slope` = 1 disables the activation, 0 gives ReLU, 0.2 the usual leaky
//! variant). Statistics accumulate in f64 in one pass.

use super::{Tape, Var};
use crate::element::Element;
use crate::exec;
use ndarray::{Array1, Array4, ArrayD, Ix1, Ix4};
use std::rc::Rc;

fn as4<F: Element>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 value")
}

fn as1<F: Element>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 value")
}

impl<F: Element> Tape<F> {
    /// Training-mode batch norm + rectifier: normalizes with batch statistics
    /// and returns them so the caller can update its running estimates.
    pub fn batch_norm2d_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
        slope: F,
    ) -> (Var, Array1<F>, Array1<F>) {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let x4 = as4(&vx);
        let (n, c, h, w) = x4.dim();
        let plane = h * w;
        let m = (n * plane) as f64;
        let xs = vx.as_slice().expect("bn: contiguous input");

        let stats: Vec<(F, F)> = exec::par_map(c, |ci| {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for smp in 0..n {
                let off = (smp * c + ci) * plane;
                for &v in &xs[off..off + plane] {
                    let v = v.as_f64();
                    s += v;
                    s2 += v * v;
                }
            }
            let mu = s / m;
            let var = (s2 / m - mu * mu).max(0.0);
            (F::lit(mu), F::lit(var))
        });
        let mean = Array1::from_iter(stats.iter().map(|&(mu, _)| mu));
        let var = Array1::from_iter(stats.iter().map(|&(_, v)| v));

        let invstd: Array1<F> = var.mapv(|v| F::one() / (v + eps).sqrt());
        let g1 = as1(&vg);
        let b1 = as1(&vb);
        let mut xhat = Array4::<F>::zeros((n, c, h, w));
        let mut y = Array4::<F>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let mut pairs: Vec<(&mut [F], &mut [F])> = xh
                .chunks_mut(c * plane)
                .zip(ys.chunks_mut(c * plane))
                .collect();
            exec::par_for_each(&mut pairs, |s, (xh_n, y_n)| {
                for ci in 0..c {
                    let (mu, is, ga, be) = (mean[ci], invstd[ci], g1[ci], b1[ci]);
                    let src = &xs[(s * c + ci) * plane..(s * c + ci + 1) * plane];
                    let xh_p = &mut xh_n[ci * plane..(ci + 1) * plane];
                    let y_p = &mut y_n[ci * plane..(ci + 1) * plane];
                    for i in 0..plane {
                        let v = (src[i] - mu) * is;
                        xh_p[i] = v;
                        let z = ga * v + be;
                        y_p[i] = if z > F::zero() { z } else { z * slope };
                    }
                }
            });
        }

        let xhat = Rc::new(xhat);
        let out_rc = Rc::new(y.into_dyn());
        let out_cap = Rc::clone(&out_rc);
        let invstd_c = invstd;
        let gamma_c = g1.to_owned();
        let mean_out = mean.clone();
        let var_out = var.clone();
        let out = self.push_op_rc(
            out_rc,
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let g4 = as4(g);
                let (n, c, h, w) = g4.dim();
                let plane = h * w;
                let m = F::lit((n * plane) as f64);
                let gs = g.as_slice().expect("bn: contiguous grad");
                let xh = xhat.as_slice().unwrap();
                let ys = out_cap.as_slice().unwrap();

                // Rectifier factor folds into the per-channel sums.
                let sums: Vec<(F, F)> = exec::par_map(c, |ci| {
                    let mut sg = F::zero();
                    let mut sgx = F::zero();
                    for s in 0..n {
                        let off = (s * c + ci) * plane;
                        for i in 0..plane {
                            let ga = if ys[off + i] > F::zero() {
                                gs[off + i]
                            } else {
                                gs[off + i] * slope
                            };
                            sg = sg + ga;
                            sgx = sgx + ga * xh[off + i];
                        }
                    }
                    (sg, sgx)
                });

                let dx = need[0].then(|| {
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    let dxs = dx.as_slice_mut().unwrap();
                    let mut samples: Vec<&mut [F]> = dxs.chunks_mut(c * plane).collect();
                    exec::par_for_each(&mut samples, |s, dx_n| {
                        for ci in 0..c {
                            let (sg, sgx) = sums[ci];
                            let scale = gamma_c[ci] * invstd_c[ci] / m;
                            let off = (s * c + ci) * plane;
                            let dp = &mut dx_n[ci * plane..(ci + 1) * plane];
                            for i in 0..plane {
                                let ga = if ys[off + i] > F::zero() {
                                    gs[off + i]
                                } else {
                                    gs[off + i] * slope
                                };
                                dp[i] = scale * (m * ga - sg - xh[off + i] * sgx);
                            }
                        }
                    });
                    dx.into_dyn()
                });
                let dgamma =
                    need[1].then(|| Array1::from_iter(sums.iter().map(|&(_, sgx)| sgx)).into_dyn());
                let dbeta =
                    need[2].then(|| Array1::from_iter(sums.iter().map(|&(sg, _)| sg)).into_dyn());
                vec![dx, dgamma, dbeta]
            }),
        );
        (out, mean_out, var_out)
    }

    /// Inference-mode batch norm + rectifier with fixed statistics.
    pub fn batch_norm2d_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<F>,
        var: &Array1<F>,
        eps: F,
        slope: F,
    ) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let x4 = as4(&vx);
        let (n, c, h, w) = x4.dim();
        let plane = h * w;
        let invstd: Array1<F> = var.mapv(|v| F::one() / (v + eps).sqrt());
        let g1 = as1(&vg);
        let b1 = as1(&vb);
        let xs = vx.as_slice().expect("bn: contiguous input");
        let mut y = Array4::<F>::zeros((n, c, h, w));
        {
            let ys = y.as_slice_mut().unwrap();
            let mut samples: Vec<&mut [F]> = ys.chunks_mut(c * plane).collect();
            exec::par_for_each(&mut samples, |s, y_n| {
                for ci in 0..c {
                    let (mu, is, ga, be) = (mean[ci], invstd[ci], g1[ci], b1[ci]);
                    let src = &xs[(s * c + ci) * plane..(s * c + ci + 1) * plane];
                    let y_p = &mut y_n[ci * plane..(ci + 1) * plane];
                    for i in 0..plane {
                        let z = ga * ((src[i] - mu) * is) + be;
                        y_p[i] = if z > F::zero() { z } else { z * slope };
                    }
                }
            });
        }
        let mean_c = mean.clone();
        let invstd_c = invstd;
        let gamma_c = g1.to_owned();
        let out_rc = Rc::new(y.into_dyn());
        let out_cap = Rc::clone(&out_rc);
        self.push_op_rc(
            out_rc,
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let g4 = as4(g);
                let (n, c, h, w) = g4.dim();
                let plane = h * w;
                let gs = g.as_slice().unwrap();
                let xs = vx.as_slice().unwrap();
                let ys = out_cap.as_slice().unwrap();
                let act = |i: usize| {
                    if ys[i] > F::zero() {
                        gs[i]
                    } else {
                        gs[i] * slope
                    }
                };
                let dx = need[0].then(|| {
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    let dxs = dx.as_slice_mut().unwrap();
                    let mut samples: Vec<&mut [F]> = dxs.chunks_mut(c * plane).collect();
                    exec::par_for_each(&mut samples, |s, dx_n| {
                        for ci in 0..c {
                            let sc = gamma_c[ci] * invstd_c[ci];
                            let off = (s * c + ci) * plane;
                            let dp = &mut dx_n[ci * plane..(ci + 1) * plane];
                            for i in 0..plane {
                                dp[i] = act(off + i) * sc;
                            }
                        }
                    });
                    dx.into_dyn()
                });
                let dgamma = need[1].then(|| {
                    let per_c: Vec<F> = exec::par_map(c, |ci| {
                        let (mu, is) = (mean_c[ci], invstd_c[ci]);
                        let mut acc = F::zero();
                        for s in 0..n {
                            let off = (s * c + ci) * plane;
                            for i in 0..plane {
                                acc = acc + act(off + i) * (xs[off + i] - mu) * is;
                            }
                        }
                        acc
                    });
                    Array1::from_vec(per_c).into_dyn()
                });
                let dbeta = need[2].then(|| {
                    let per_c: Vec<F> = exec::par_map(c, |ci| {
                        let mut acc = F::zero();
                        for s in 0..n {
                            let off = (s * c + ci) * plane;
                            for i in 0..plane {
                                acc = acc + act(off + i);
                            }
                        }
                        acc
                    });
                    Array1::from_vec(per_c).into_dyn()
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn train_mode_normalizes_batch() {
        let tape = Tape::<f64>::new();
        let x = Array4::from_shape_fn((4, 2, 3, 3), |(n, c, h, w)| {
            (n * 17 + c * 5 + h * 3 + w) as f64 * 0.1 - 1.0
        });
        let xv = tape.leaf(x.into_dyn());
        let g = tape.leaf(Array1::from_elem(2, 1.0).into_dyn());
        let b = tape.leaf(Array1::from_elem(2, 0.0).into_dyn());
        let (y, mean, var) = tape.batch_norm2d_train(xv, g, b, 1e-5, 1.0);
        let yv = tape.value(y);
        let y4 = yv.view().into_dimensionality::<Ix4>().unwrap();
        for c in 0..2 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut cnt = 0.0;
            for n in 0..4 {
                for h in 0..3 {
                    for w in 0..3 {
                        s += y4[[n, c, h, w]];
                        s2 += y4[[n, c, h, w]].powi(2);
                        cnt += 1.0;
                    }
                }
            }
            assert!((s / cnt).abs() < 1e-10);
            assert!((s2 / cnt - 1.0).abs() < 1e-3);
            assert!(var[c] > 0.0);
            assert!(mean[c].is_finite());
        }
    }

    #[test]
    fn fused_rectifier_clips_negative_side() {
        let tape = Tape::<f64>::new();
        let x = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, h, w)| (n * 4 + h * 2 + w) as f64);
        let xv = tape.leaf(x.into_dyn());
        let g = tape.constant(Array1::from_elem(1, 1.0).into_dyn());
        let b = tape.constant(Array1::from_elem(1, 0.0).into_dyn());
        let (y, _, _) = tape.batch_norm2d_train(xv, g, b, 1e-5, 0.0);
        let yv = tape.value(y);
        // Normalized output has mean zero, so the ReLU must zero some entries
        // and keep the rest positive.
        assert!(yv.iter().any(|&v| v == 0.0));
        assert!(yv.iter().any(|&v| v > 0.0));
        assert!(yv.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn eval_mode_is_affine_in_x() {
        let tape = Tape::<f64>::new();
        let x = Array4::from_shape_fn((2, 3, 4, 4), |(n, c, h, w)| {
            (n + c + h + w) as f64 * 0.25 + 1.0
        });
        let xv = tape.leaf(x.into_dyn());
        let g = tape.constant(Array1::from_elem(3, 2.0).into_dyn());
        let b = tape.constant(Array1::from_elem(3, 0.0).into_dyn());
        let mean = Array1::from_elem(3, 0.5);
        let var = Array1::from_elem(3, 4.0);
        let y = tape.batch_norm2d_eval(xv, g, b, &mean, &var, 0.0, 1.0);
        // y = 2*(x-0.5)/2 = x - 0.5, all positive here
        let yv = tape.value(y);
        let y4 = yv.view().into_dimensionality::<Ix4>().unwrap();
        assert!((y4[[0, 0, 0, 0]] - (1.0 - 0.5)).abs() < 1e-9);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads
            .wrt(xv)
            .unwrap()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
