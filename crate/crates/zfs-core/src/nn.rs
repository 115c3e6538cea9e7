//! Layers: thin parameter holders over the tape ops.
//!
//! Initialization is fan-in-scaled normal (`fan_in_normal_v1`): weights drawn
//! from N(0, 2/fan_in), biases zero, norm scales one. The scheme id is
//! recorded in weight provenance so a checkpoint's origin can be re-derived.

use crate::autograd::{ParamId, Params, Tape, Var};
use crate::element::Element;
use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

pub const INIT_SCHEME: &str = "fan_in_normal_v1";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

pub fn fan_in_normal<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = F::lit((2.0 / fan_in as f64).sqrt());
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::standard_normal(rng) * std)
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            fan_in_normal(rng, &[in_dim, out_dim], in_dim),
        );
        let b = params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `x`: `[n, in_dim]` -> `[n, out_dim]`
    pub fn forward<F: Element>(&self, tape: &Tape<F>, params: &Params<F>, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }

    /// Forward with the weights bound as constants: gradients flow through
    /// `x` but never reach this layer's parameters.
    pub fn forward_frozen<F: Element>(&self, tape: &Tape<F>, params: &Params<F>, x: Var) -> Var {
        let w = tape.constant(params.get(self.w).clone());
        let b = tape.constant(params.get(self.b).clone());
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            fan_in_normal(rng, &[co, ci, k, k], ci * k * k),
        );
        let b = params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, params: &Params<F>, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct ConvT2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
}

impl ConvT2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Element>(
        params: &mut Params<F>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            fan_in_normal(rng, &[ci, co, k, k], ci * k * k),
        );
        let b = params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        ConvT2dLayer {
            w,
            b,
            stride,
            pad,
            out_hw,
        }
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, params: &Params<F>, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_hw)
    }
}

pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2dLayer {
    pub fn init<F: Element>(params: &mut Params<F>, name: &str, c: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])));
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
        let run_mean = params.add_state(format!("{name}.run_mean"), ArrayD::zeros(IxDyn(&[c])));
        let run_var = params.add_state(format!("{name}.run_var"), ArrayD::ones(IxDyn(&[c])));
        BatchNorm2dLayer {
            gamma,
            beta,
            run_mean,
            run_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training mode folds the batch statistics into the running estimates,
    /// which is why it needs `&mut Params`. `slope` fuses the block's
    /// rectifier (1.0 = linear output).
    pub fn forward<F: Element>(
        &self,
        tape: &Tape<F>,
        params: &mut Params<F>,
        x: Var,
        mode: Mode,
        slope: f64,
    ) -> Var {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        let eps = F::lit(self.eps);
        let slope = F::lit(slope);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm2d_train(x, gamma, beta, eps, slope);
                let mom = F::lit(self.momentum);
                let one_m = F::one() - mom;
                {
                    let rm = params.get_mut(self.run_mean);
                    for (r, m) in rm.iter_mut().zip(mean.iter()) {
                        *r = *r * one_m + *m * mom;
                    }
                }
                {
                    let rv = params.get_mut(self.run_var);
                    for (r, v) in rv.iter_mut().zip(var.iter()) {
                        *r = *r * one_m + *v * mom;
                    }
                }
                y
            }
            Mode::Eval => {
                let mean: Array1<F> = params
                    .get(self.run_mean)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned();
                let var: Array1<F> = params
                    .get(self.run_var)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned();
                tape.batch_norm2d_eval(x, gamma, beta, &mean, &var, eps, slope)
            }
        }
    }
}

/// Fully connected stack with rectifier activations between layers and a
/// linear last layer.
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        name: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::init(params, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, params: &Params<F>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// See [`Linear::forward_frozen`].
    pub fn forward_frozen<F: Element>(&self, tape: &Tape<F>, params: &Params<F>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_frozen(tape, params, h);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn linear_shapes_and_bias() {
        let mut params = Params::<f64>::new();
        let mut rng = crate::rng::derive(1, "t", &[]);
        let lin = Linear::init(&mut params, "l", 4, 3, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Array2::<f64>::zeros((2, 4)).into_dyn());
        let y = lin.forward(&tape, &params, x);
        assert_eq!(tape.shape(y), vec![2, 3]);
        // zero input -> bias -> zeros
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bn_running_stats_move_toward_batch() {
        let mut params = Params::<f64>::new();
        let bn = BatchNorm2dLayer::init(&mut params, "bn", 2);
        let tape = Tape::new();
        let x = ndarray::Array4::from_shape_fn((3, 2, 2, 2), |(n, c, h, w)| {
            5.0 + (n + c + h + w) as f64
        });
        let xv = tape.constant(x.into_dyn());
        let _ = bn.forward(&tape, &mut params, xv, Mode::Train, 1.0);
        let rm = params.get(bn.run_mean);
        assert!(rm.iter().all(|&m| m > 0.0), "running mean updated: {rm:?}");
    }

    #[test]
    fn mlp_hidden_rectification() {
        let mut params = Params::<f64>::new();
        let mut rng = crate::rng::derive(2, "t", &[]);
        let mlp = Mlp::init(&mut params, "m", &[3, 5, 2], &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.3).into_dyn());
        let y = mlp.forward(&tape, &params, x);
        assert_eq!(tape.shape(y), vec![4, 2]);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        assert!(grads.for_param(&params, mlp.layers[0].w).is_some());
    }
}
