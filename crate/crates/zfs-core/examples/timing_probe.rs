use ndarray::Array4;
use zfs_core::autograd::{Params, Tape};
use zfs_core::encoders::{build_encoder, EncoderArch};
use zfs_core::nn::Mode;
use std::time::Instant;

fn main() {
    let mut params = Params::<f32>::new();
    let (enc, _) = build_encoder(EncoderArch::Basic, 1, &mut params);
    let x = Array4::<f32>::from_shape_fn((64, 3, 112, 112), |(n, c, h, w)| {
        (((n + c + h + w) % 7) as f32) / 7.0
    })
    .into_dyn();
    for rep in 0..4 {
        let t = Instant::now();
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = enc.forward(&tape, &mut params, xv, Mode::Train).unwrap();
        let fwd = t.elapsed().as_secs_f64();
        let g = tape.global_avg_pool(out.local);
        let s1 = tape.sum_all(g);
        let s2 = tape.sum_all(out.global);
        let loss = tape.add(s1, s2);
        let t2 = Instant::now();
        let grads = tape.backward(loss);
        let bwd = t2.elapsed().as_secs_f64();
        let n_grads = (0..params.len())
            .filter(|i| grads.for_param(&params, zfs_core::autograd::ParamId(*i)).is_some())
            .count();
        println!("rep {rep}: fwd {fwd:.3}s bwd {bwd:.3}s total {:.3}s ({n_grads} grads)", fwd + bwd);
    }
}
