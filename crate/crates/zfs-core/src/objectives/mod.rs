//! Encoder-training objectives: FC, prototypical, VAE, beta-VAE, AAE, DIM.
//!
//! Each loss returns an [`ObjectiveLoss`]: the scalar tape node driving
//! optimization plus a [`LossReport`] whose weighted components always sum to
//! the reported total.

mod decoder;

pub use decoder::Decoder;

use crate::autograd::{Params, Tape, Var};
use crate::element::Element;
use crate::error::{Result, ZfsError};
use crate::nn::{Linear, Mlp};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Fc,
    Proto,
    Vae,
    BetaVae,
    Aae,
    Dim,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fc" => ObjectiveKind::Fc,
            "proto" => ObjectiveKind::Proto,
            "vae" => ObjectiveKind::Vae,
            "betavae" => ObjectiveKind::BetaVae,
            "aae" => ObjectiveKind::Aae,
            "dim" => ObjectiveKind::Dim,
            other => {
                return Err(ZfsError::Config(format!(
                    "unknown objective '{other}' (expected fc|proto|vae|betavae|aae|dim)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Fc => "fc",
            ObjectiveKind::Proto => "proto",
            ObjectiveKind::Vae => "vae",
            ObjectiveKind::BetaVae => "betavae",
            ObjectiveKind::Aae => "aae",
            ObjectiveKind::Dim => "dim",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Named, weighted scalar components and their weighted sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<Component>,
}

impl LossReport {
    pub fn new(components: Vec<Component>) -> Self {
        let total = components.iter().map(|c| c.weight * c.value).sum();
        LossReport { total, components }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.value)
    }

    /// Merge reports (used to compose J = w_local*L_local + L_model).
    pub fn merged(reports: &[(&LossReport, f64)]) -> LossReport {
        let mut components = Vec::new();
        for (r, outer_w) in reports {
            for c in &r.components {
                components.push(Component {
                    name: c.name.clone(),
                    weight: c.weight * outer_w,
                    value: c.value,
                });
            }
        }
        LossReport::new(components)
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.components.iter().all(|c| c.value.is_finite())
    }
}

pub struct ObjectiveLoss {
    pub var: Var,
    pub report: LossReport,
}

fn component<F: Element>(tape: &Tape<F>, name: &str, weight: f64, var: Var) -> Component {
    Component {
        name: name.to_string(),
        weight,
        value: tape.scalar(var).as_f64(),
    }
}

/// Reparameterized diagonal-Gaussian draw with its recorded noise.
pub struct LatentSample {
    pub mean: Var,
    pub log_variance: Var,
    pub sample: Var,
    pub noise: ArrayD<f64>,
}

pub fn reparameterize<F: Element>(
    tape: &Tape<F>,
    mean: Var,
    log_variance: Var,
    rng: &mut ChaCha8Rng,
) -> LatentSample {
    let shape = tape.shape(mean);
    let noise = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
        <f64 as Element>::standard_normal(rng)
    });
    let noise_f = noise.mapv(F::lit);
    let half_lv = tape.scale(log_variance, F::lit(0.5));
    let std = tape.exp(half_lv);
    let nv = tape.constant(noise_f);
    let scaled = tape.mul(std, nv);
    let sample = tape.add(mean, scaled);
    LatentSample {
        mean,
        log_variance,
        sample,
        noise,
    }
}

/// Cross-entropy of a linear classifier on global features.
pub fn fc_loss<F: Element>(
    tape: &Tape<F>,
    params: &Params<F>,
    head: &Linear,
    global: Var,
    labels: &[usize],
) -> Result<ObjectiveLoss> {
    validate_labels(labels, head.out_dim)?;
    let logits = head.forward(tape, params, global);
    let lp = tape.log_softmax(logits);
    let loss = tape.nll_loss(lp, labels);
    let report = LossReport::new(vec![component(tape, "cross_entropy", 1.0, loss)]);
    Ok(ObjectiveLoss { var: loss, report })
}

/// total = reconstruction + beta * kl, with the closed-form divergence of the
/// diagonal-Gaussian posterior from the standard normal, batch-averaged.
/// Reconstruction is summed over pixels per sample, averaged over the batch.
pub fn vae_loss<F: Element>(
    tape: &Tape<F>,
    x: Var,
    reconstruction: Var,
    latent: &LatentSample,
    beta: f64,
) -> Result<ObjectiveLoss> {
    if beta < 0.0 {
        return Err(ZfsError::Config(format!("beta must be >= 0, got {beta}")));
    }
    let xs = tape.shape(x);
    if xs != tape.shape(reconstruction) {
        return Err(ZfsError::Shape(format!(
            "reconstruction shape {:?} != input shape {:?}",
            tape.shape(reconstruction),
            xs
        )));
    }
    let n = xs[0];
    let inv_n = F::lit(1.0 / n as f64);

    let diff = tape.sub(reconstruction, x);
    let sq = tape.square(diff);
    let sse = tape.sum_all(sq);
    let recon = tape.scale(sse, inv_n);

    // 0.5 * sum(mu^2 + exp(lv) - 1 - lv) / n
    let mu2 = tape.square(latent.mean);
    let ev = tape.exp(latent.log_variance);
    let a = tape.add(mu2, ev);
    let b = tape.sub(a, latent.log_variance);
    let c = tape.add_scalar(b, -F::one());
    let ksum = tape.sum_all(c);
    let kl = tape.scale(ksum, F::lit(0.5 / n as f64));

    let kl_w = tape.scale(kl, F::lit(beta));
    let total = tape.add(recon, kl_w);
    let report = LossReport::new(vec![
        component(tape, "reconstruction", 1.0, recon),
        component(tape, "kl", beta, kl),
    ]);
    Ok(ObjectiveLoss { var: total, report })
}

/// Adversarial autoencoder pair. The discriminator sees prior draws as real
/// and (detached) posterior samples as fake; the encoder term pushes
/// posterior samples toward "real" through a frozen discriminator, so each
/// loss reaches only its own parameter set. Logits clamp to +-30.
pub fn aae_losses<F: Element>(
    tape: &Tape<F>,
    params: &Params<F>,
    reconstruction_term: Var,
    latent_sample: Var,
    discriminator: &Mlp,
    prior_rng: &mut ChaCha8Rng,
) -> Result<(ObjectiveLoss, ObjectiveLoss)> {
    let shape = tape.shape(latent_sample);
    if shape.len() != 2 {
        return Err(ZfsError::Shape(format!(
            "latent sample must be [n, d], got {shape:?}"
        )));
    }
    let clamp = F::lit(30.0);
    let prior = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
        F::standard_normal(prior_rng)
    });

    // Discriminator side.
    let prior_v = tape.constant(prior);
    let d_real = tape.clamp(discriminator.forward(tape, params, prior_v), -clamp, clamp);
    let detached = tape.detach(latent_sample);
    let d_fake = tape.clamp(discriminator.forward(tape, params, detached), -clamp, clamp);
    let neg_real = tape.neg(d_real);
    let sp_real = tape.softplus(neg_real);
    let real_term = tape.mean_all(sp_real);
    let sp_fake = tape.softplus(d_fake);
    let fake_term = tape.mean_all(sp_fake);
    let disc_total = tape.add(real_term, fake_term);
    let disc_report = LossReport::new(vec![
        component(tape, "disc_real", 1.0, real_term),
        component(tape, "disc_fake", 1.0, fake_term),
    ]);

    // Encoder side: frozen discriminator, non-saturating generator term.
    let d_gen = tape.clamp(
        discriminator.forward_frozen(tape, params, latent_sample),
        -clamp,
        clamp,
    );
    let neg_gen = tape.neg(d_gen);
    let sp_gen = tape.softplus(neg_gen);
    let adv = tape.mean_all(sp_gen);
    let enc_total = tape.add(reconstruction_term, adv);
    let enc_report = LossReport::new(vec![
        component(tape, "reconstruction", 1.0, reconstruction_term),
        component(tape, "adversarial", 1.0, adv),
    ]);

    Ok((
        ObjectiveLoss {
            var: enc_total,
            report: enc_report,
        },
        ObjectiveLoss {
            var: disc_total,
            report: disc_report,
        },
    ))
}

/// Pairwise scorer for local-global mutual information.
pub struct DimScorer {
    pub proj_local: Linear,
    pub proj_global: Linear,
}

pub const DIM_EMBED_DIM: usize = 512;

impl DimScorer {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        local_dim: usize,
        global_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DimScorer {
            proj_local: Linear::init(params, "dim.proj_local", local_dim, DIM_EMBED_DIM, rng),
            proj_global: Linear::init(params, "dim.proj_global", global_dim, DIM_EMBED_DIM, rng),
        }
    }
}

/// Jensen-Shannon-style bound on local-global mutual information:
/// softplus(-T) on matched (location, global) pairs plus softplus(T) on all
/// cross-image pairs within the batch.
pub fn dim_loss<F: Element>(
    tape: &Tape<F>,
    params: &Params<F>,
    scorer: &DimScorer,
    local: Var,
    global: Var,
) -> Result<ObjectiveLoss> {
    let lshape = tape.shape(local);
    let n = lshape[0];
    if n < 2 {
        return Err(ZfsError::Config(
            "dim loss needs batch size >= 2 to form negative pairs".into(),
        ));
    }
    let (d, h, w) = (lshape[1], lshape[2], lshape[3]);
    if d != scorer.proj_local.in_dim {
        return Err(ZfsError::Shape(format!(
            "local channel dim {d} != scorer input {}",
            scorer.proj_local.in_dim
        )));
    }
    let hw = h * w;

    let rows = {
        let p = tape.permute(local, &[0, 2, 3, 1]);
        tape.reshape(p, &[n * hw, d])
    };
    let lproj = scorer.proj_local.forward(tape, params, rows);
    let gproj = scorer.proj_global.forward(tape, params, global);
    let gt = tape.permute(gproj, &[1, 0]);
    let scores = tape.matmul(lproj, gt); // [n*hw, n]

    let mut pos = Array2::<F>::zeros((n * hw, n));
    for i in 0..n {
        for q in 0..hw {
            pos[[i * hw + q, i]] = F::one();
        }
    }
    let neg = pos.mapv(|v| F::one() - v);
    let n_pos = (n * hw) as f64;
    let n_neg = (n * hw * (n - 1)) as f64;

    let pos_v = tape.constant(pos.into_dyn());
    let neg_v = tape.constant(neg.into_dyn());
    let neg_scores = tape.neg(scores);
    let sp_pos = tape.softplus(neg_scores);
    let sp_pos_m = tape.mul(sp_pos, pos_v);
    let pos_sum = tape.sum_all(sp_pos_m);
    let pos_term = tape.scale(pos_sum, F::lit(1.0 / n_pos));
    let sp_neg = tape.softplus(scores);
    let sp_neg_m = tape.mul(sp_neg, neg_v);
    let neg_sum = tape.sum_all(sp_neg_m);
    let neg_term = tape.scale(neg_sum, F::lit(1.0 / n_neg));
    let total = tape.add(pos_term, neg_term);

    let value = tape.scalar(total).as_f64();
    let report = LossReport::new(vec![Component {
        name: "mi_local".to_string(),
        weight: 1.0,
        value,
    }]);
    Ok(ObjectiveLoss { var: total, report })
}

pub(crate) fn validate_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(ZfsError::Schema(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
