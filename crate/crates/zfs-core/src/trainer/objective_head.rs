//! Per-objective trainable heads living in the encoder's parameter group.

use crate::autograd::{Params, Tape, Var};
use crate::element::Element;
use crate::encoders::{EncoderOutput, GLOBAL_DIM};
use crate::error::Result;
use crate::nn::{Linear, Mlp, Mode};
use crate::objectives::{
    aae_losses, dim_loss, fc_loss, reparameterize, vae_loss, Component, Decoder, DimScorer,
    LossReport, ObjectiveKind, ObjectiveLoss,
};
use crate::protonet::{embed_attributes, proto_logits, proto_loss, Metric, ProtoNet};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub enum ObjectiveHead {
    Fc { head: Linear },
    Proto { net: ProtoNet },
    Vae { logvar: Linear, decoder: Decoder, beta: f64 },
    Aae { decoder: Decoder, disc: Mlp },
    Dim { scorer: DimScorer },
}

pub struct ModelLoss {
    pub main: ObjectiveLoss,
    /// Adversarial branch optimized alongside (disjoint parameters).
    pub disc: Option<ObjectiveLoss>,
}

impl ObjectiveHead {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Element>(
        kind: ObjectiveKind,
        params: &mut Params<F>,
        num_train_classes: usize,
        attribute_dim: usize,
        local_dim: usize,
        latent_dim: usize,
        beta: f64,
        metric: Metric,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match kind {
            ObjectiveKind::Fc => ObjectiveHead::Fc {
                head: Linear::init(params, "obj.fc", GLOBAL_DIM, num_train_classes, rng),
            },
            ObjectiveKind::Proto => ObjectiveHead::Proto {
                net: ProtoNet::init(params, attribute_dim, metric, rng),
            },
            ObjectiveKind::Vae | ObjectiveKind::BetaVae => ObjectiveHead::Vae {
                logvar: Linear::init(params, "obj.logvar", GLOBAL_DIM, latent_dim, rng),
                decoder: Decoder::init(params, latent_dim, rng),
                beta: if kind == ObjectiveKind::Vae { 1.0 } else { beta },
            },
            ObjectiveKind::Aae => ObjectiveHead::Aae {
                decoder: Decoder::init(params, latent_dim, rng),
                disc: Mlp::init(params, "obj.disc", &[latent_dim, 512, 512, 1], rng),
            },
            ObjectiveKind::Dim => ObjectiveHead::Dim {
                scorer: DimScorer::init(params, local_dim, GLOBAL_DIM, rng),
            },
        }
    }

    /// L_model for this batch. `images` is the transformed input batch (the
    /// reconstruction target for the autoencoders).
    #[allow(clippy::too_many_arguments)]
    pub fn loss<F: Element>(
        &self,
        tape: &Tape<F>,
        params: &mut Params<F>,
        images: Var,
        enc: &EncoderOutput,
        labels: &[usize],
        train_attributes: &Array2<F>,
        metric: Metric,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelLoss> {
        match self {
            ObjectiveHead::Fc { head } => {
                let main = fc_loss(tape, params, head, enc.global, labels)?;
                Ok(ModelLoss { main, disc: None })
            }
            ObjectiveHead::Proto { net } => {
                let class_ids: Vec<usize> = (0..train_attributes.nrows()).collect();
                let protos = embed_attributes(tape, params, net, train_attributes, &class_ids)?;
                let logits = proto_logits(tape, metric, enc.global, &protos)?;
                let loss = proto_loss(tape, logits, labels)?;
                let report = LossReport::new(vec![Component {
                    name: "proto_model".into(),
                    weight: 1.0,
                    value: tape.scalar(loss).as_f64(),
                }]);
                Ok(ModelLoss {
                    main: ObjectiveLoss { var: loss, report },
                    disc: None,
                })
            }
            ObjectiveHead::Vae {
                logvar,
                decoder,
                beta,
            } => {
                let lv = logvar.forward(tape, params, enc.global);
                let latent = reparameterize(tape, enc.global, lv, rng);
                let recon = decoder.forward(tape, params, latent.sample, Mode::Train);
                let main = vae_loss(tape, images, recon, &latent, *beta)?;
                Ok(ModelLoss { main, disc: None })
            }
            ObjectiveHead::Aae { decoder, disc } => {
                let latent = enc.global;
                let recon = decoder.forward(tape, params, latent, Mode::Train);
                let n = tape.shape(images)[0];
                let diff = tape.sub(recon, images);
                let sq = tape.square(diff);
                let sse = tape.sum_all(sq);
                let recon_term = tape.scale(sse, F::lit(1.0 / n as f64));
                let (enc_loss, disc_loss) =
                    aae_losses(tape, params, recon_term, latent, disc, rng)?;
                Ok(ModelLoss {
                    main: enc_loss,
                    disc: Some(disc_loss),
                })
            }
            ObjectiveHead::Dim { scorer } => {
                let main = dim_loss(tape, params, scorer, enc.local, enc.global)?;
                Ok(ModelLoss { main, disc: None })
            }
        }
    }
}
