//! Adaptive-moment optimizer.

use crate::autograd::{Gradients, Params};
use crate::element::Element;
use ndarray::ArrayD;

pub struct Adam<F: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<F>>>,
    v: Vec<Option<ArrayD<F>>>,
}

impl<F: Element> Adam<F> {
    pub fn new(lr: f64, params: &Params<F>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..params.len()).map(|_| None).collect(),
            v: (0..params.len()).map(|_| None).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every trainable entry that received a gradient.
    pub fn step(&mut self, params: &mut Params<F>, grads: &Gradients<F>) {
        self.t += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let one = F::one();
        let corr1 = F::lit(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);

        for i in 0..params.len() {
            let id = crate::autograd::ParamId(i);
            if !params.entries()[i].trainable {
                continue;
            }
            let Some(g) = grads.for_param(params, id) else {
                continue;
            };
            if self.m[i].is_none() {
                self.m[i] = Some(ArrayD::zeros(g.raw_dim()));
                self.v[i] = Some(ArrayD::zeros(g.raw_dim()));
            }
            let m = self.m[i].as_mut().unwrap();
            let v = self.v[i].as_mut().unwrap();
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = *m * b1 + g * (one - b1);
                    *v = *v * b2 + g * g * (one - b2);
                    let mhat = *m / corr1;
                    let vhat = *v / corr2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
