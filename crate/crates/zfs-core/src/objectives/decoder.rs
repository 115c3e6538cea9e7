//! Mirror decoder for the reconstruction objectives: latent vector to a
//! 3x112x112 image in [0, 1] through stride-2 transposed convolutions.

use crate::autograd::{Params, Tape, Var};
use crate::element::Element;
use crate::nn::{BatchNorm2dLayer, ConvT2dLayer, Linear, Mode};
use rand_chacha::ChaCha8Rng;

pub struct Decoder {
    fc: Linear,
    tconvs: Vec<ConvT2dLayer>,
    bns: Vec<BatchNorm2dLayer>,
}

impl Decoder {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc = Linear::init(params, "dec.fc", latent_dim, 1024 * 3 * 3, rng);
        // 3 -> 7 -> 14 -> 28 -> 56 -> 112
        let spec: [(usize, usize, usize, usize, usize, usize); 5] = [
            // (ci, co, k, stride, pad, out)
            (1024, 512, 3, 2, 0, 7),
            (512, 256, 4, 2, 1, 14),
            (256, 128, 4, 2, 1, 28),
            (128, 64, 4, 2, 1, 56),
            (64, 3, 4, 2, 1, 112),
        ];
        let mut tconvs = Vec::new();
        let mut bns = Vec::new();
        for (i, &(ci, co, k, s, p, out)) in spec.iter().enumerate() {
            tconvs.push(ConvT2dLayer::init(
                params,
                &format!("dec.tconv{}", i + 1),
                ci,
                co,
                k,
                s,
                p,
                (out, out),
                rng,
            ));
            if i < 4 {
                bns.push(BatchNorm2dLayer::init(params, &format!("dec.bn{}", i + 1), co));
            }
        }
        Decoder { fc, tconvs, bns }
    }

    pub fn forward<F: Element>(
        &self,
        tape: &Tape<F>,
        params: &mut Params<F>,
        z: Var,
        mode: Mode,
    ) -> Var {
        let n = tape.shape(z)[0];
        let h = self.fc.forward(tape, params, z);
        let mut h = tape.reshape(h, &[n, 1024, 3, 3]);
        for i in 0..5 {
            h = self.tconvs[i].forward(tape, params, h);
            if i < 4 {
                h = self.bns[i].forward(tape, params, h, mode, 0.2);
            }
        }
        tape.sigmoid(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_to_unit_interval_images() {
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng::derive(4, "dec", &[]);
        let dec = Decoder::init(&mut params, 1024, &mut rng);
        let tape = Tape::new();
        let z = tape.constant(ndarray::Array2::<f32>::from_elem((2, 1024), 0.1).into_dyn());
        let img = dec.forward(&tape, &mut params, z, Mode::Train);
        assert_eq!(tape.shape(img), vec![2, 3, 112, 112]);
        let v = tape.value(img);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
