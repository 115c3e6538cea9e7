//! Local auxiliary classifiers on third-layer features.
//!
//! LC applies one shared linear classifier independently at every spatial
//! location; AC embeds class attributes into the local feature space and
//! classifies each location by negative squared distance to the embedded
//! prototypes. Both losses average over locations and batch.

use crate::autograd::{Params, Tape, Var};
use crate::element::Element;
use crate::error::{Result, ZfsError};
use crate::nn::{Linear, Mlp};
use crate::objectives::{validate_labels, Component, LossReport, ObjectiveLoss};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalKind {
    None,
    Lc,
    Ac,
}

impl LocalKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => LocalKind::None,
            "lc" => LocalKind::Lc,
            "ac" => LocalKind::Ac,
            other => {
                return Err(ZfsError::Config(format!(
                    "unknown local classifier '{other}' (expected none|lc|ac)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LocalKind::None => "none",
            LocalKind::Lc => "lc",
            LocalKind::Ac => "ac",
        }
    }
}

pub struct LcHead {
    pub classifier: Linear,
}

impl LcHead {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        local_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LcHead {
            classifier: Linear::init(params, "lc.classifier", local_dim, num_classes, rng),
        }
    }
}

pub const AC_HIDDEN: usize = 512;

pub struct AcHead {
    pub embed: Mlp,
    pub attribute_dim: usize,
}

impl AcHead {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        attribute_dim: usize,
        local_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AcHead {
            embed: Mlp::init(params, "ac.embed", &[attribute_dim, AC_HIDDEN, local_dim], rng),
            attribute_dim,
        }
    }
}

/// Flatten `[n, d, h, w]` into location rows `[n*h*w, d]` plus the repeated
/// per-location labels.
fn location_rows<F: Element>(
    tape: &Tape<F>,
    local: Var,
    labels: &[usize],
) -> Result<(Var, Vec<usize>, usize)> {
    let shape = tape.shape(local);
    if shape.len() != 4 {
        return Err(ZfsError::Shape(format!(
            "local map must be [n, d, h, w], got {shape:?}"
        )));
    }
    let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != n {
        return Err(ZfsError::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let hw = h * w;
    let p = tape.permute(local, &[0, 2, 3, 1]);
    let rows = tape.reshape(p, &[n * hw, d]);
    let mut row_labels = Vec::with_capacity(n * hw);
    for &y in labels {
        row_labels.extend(std::iter::repeat_n(y, hw));
    }
    Ok((rows, row_labels, d))
}

/// Cross-entropy of the shared linear classifier applied at every location.
pub fn lc_loss<F: Element>(
    tape: &Tape<F>,
    params: &Params<F>,
    head: &LcHead,
    local: Var,
    labels: &[usize],
) -> Result<ObjectiveLoss> {
    validate_labels(labels, head.classifier.out_dim)?;
    let (rows, row_labels, d) = location_rows(tape, local, labels)?;
    if d != head.classifier.in_dim {
        return Err(ZfsError::Shape(format!(
            "local channel dim {d} != LC classifier input {}",
            head.classifier.in_dim
        )));
    }
    let logits = head.classifier.forward(tape, params, rows);
    let lp = tape.log_softmax(logits);
    let loss = tape.nll_loss(lp, &row_labels);
    let report = LossReport::new(vec![Component {
        name: "local_aux".into(),
        weight: 1.0,
        value: tape.scalar(loss).as_f64(),
    }]);
    Ok(ObjectiveLoss { var: loss, report })
}

/// Prototypical cross-entropy at every location: logits are negative squared
/// distances to the embedded train-class attribute prototypes.
pub fn ac_loss<F: Element>(
    tape: &Tape<F>,
    params: &Params<F>,
    head: &AcHead,
    local: Var,
    train_attributes: &Array2<F>,
    labels: &[usize],
) -> Result<ObjectiveLoss> {
    let k = train_attributes.nrows();
    validate_labels(labels, k)?;
    if train_attributes.ncols() != head.attribute_dim {
        return Err(ZfsError::Shape(format!(
            "attribute dim {} != AC embedder input {}",
            train_attributes.ncols(),
            head.attribute_dim
        )));
    }
    let (rows, row_labels, _d) = location_rows(tape, local, labels)?;
    let attrs = tape.constant(train_attributes.clone().into_dyn());
    let protos = head.embed.forward(tape, params, attrs); // [k, d_l]
    let dist = tape.pairwise_sqdist(rows, protos);
    let logits = tape.neg(dist);
    let lp = tape.log_softmax(logits);
    let loss = tape.nll_loss(lp, &row_labels);
    let report = LossReport::new(vec![Component {
        name: "local_aux".into(),
        weight: 1.0,
        value: tape.scalar(loss).as_f64(),
    }]);
    Ok(ObjectiveLoss { var: loss, report })
}
