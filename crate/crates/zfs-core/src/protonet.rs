//! Prototypical-network head for zero-shot evaluation.
//!
//! Class attributes embed to prototypes in the encoder's global feature
//! space; queries classify by distance softmax. At test time the candidate
//! set is exactly the unseen classes.

use crate::autograd::{Params, Tape, Var};
use crate::element::Element;
use crate::encoders::GLOBAL_DIM;
use crate::error::{Result, ZfsError};
use crate::nn::Mlp;
use crate::objectives::validate_labels;
use ndarray::{Array2, Ix2};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SquaredEuclidean,
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "squared_euclidean" => Metric::SquaredEuclidean,
            "cosine" => Metric::Cosine,
            other => {
                return Err(ZfsError::Config(format!(
                    "unknown metric '{other}' (expected squared_euclidean|cosine)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::SquaredEuclidean => "squared_euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

pub const PROTO_HIDDEN: usize = 512;

pub struct ProtoNet {
    pub embed: Mlp,
    pub metric: Metric,
    pub attribute_dim: usize,
}

impl ProtoNet {
    pub fn init<F: Element>(
        params: &mut Params<F>,
        attribute_dim: usize,
        metric: Metric,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ProtoNet {
            embed: Mlp::init(
                params,
                "protonet.embed",
                &[attribute_dim, PROTO_HIDDEN, GLOBAL_DIM],
                rng,
            ),
            metric,
            attribute_dim,
        }
    }
}

/// Embedded attribute rows acting as class prototypes.
pub struct PrototypeSet {
    pub protos: Var,
    pub class_ids: Vec<usize>,
}

/// Embed one attribute row per candidate class.
pub fn embed_attributes<F: Element>(
    tape: &Tape<F>,
    params: &Params<F>,
    net: &ProtoNet,
    attributes: &Array2<F>,
    class_ids: &[usize],
) -> Result<PrototypeSet> {
    if attributes.ncols() != net.attribute_dim {
        return Err(ZfsError::Shape(format!(
            "attribute dim {} != prototype embedder input {}",
            attributes.ncols(),
            net.attribute_dim
        )));
    }
    if attributes.nrows() != class_ids.len() {
        return Err(ZfsError::Shape(format!(
            "{} attribute rows vs {} class ids",
            attributes.nrows(),
            class_ids.len()
        )));
    }
    let a = tape.constant(attributes.clone().into_dyn());
    let protos = net.embed.forward(tape, params, a);
    Ok(PrototypeSet {
        protos,
        class_ids: class_ids.to_vec(),
    })
}

/// `logits[i, k] = -||g_i - p_k||^2` (or the cosine score under that metric).
pub fn proto_logits<F: Element>(
    tape: &Tape<F>,
    metric: Metric,
    global: Var,
    protos: &PrototypeSet,
) -> Result<Var> {
    if protos.class_ids.is_empty() {
        return Err(ZfsError::Config("empty prototype set".into()));
    }
    let gd = tape.shape(global);
    let pd = tape.shape(protos.protos);
    if gd.len() != 2 || pd.len() != 2 || gd[1] != pd[1] {
        return Err(ZfsError::Shape(format!(
            "query shape {gd:?} incompatible with prototypes {pd:?}"
        )));
    }
    Ok(match metric {
        Metric::SquaredEuclidean => {
            let d = tape.pairwise_sqdist(global, protos.protos);
            tape.neg(d)
        }
        Metric::Cosine => {
            // score = (g/||g||) . (p/||p||); composed from primitive ops so
            // gradients flow through both normalizations.
            let gn = row_normalize(tape, global);
            let pn = row_normalize(tape, protos.protos);
            let pt = tape.permute(pn, &[1, 0]);
            tape.matmul(gn, pt)
        }
    })
}

/// x / ||x|| per row, as primitive ops so gradients flow through the norm.
fn row_normalize<F: Element>(tape: &Tape<F>, x: Var) -> Var {
    let d = tape.shape(x)[1];
    let sq = tape.square(x);
    let ones_col = tape.constant(Array2::<F>::ones((d, 1)).into_dyn());
    let norms2 = tape.matmul(sq, ones_col); // [n, 1]
    let safe = tape.add_scalar(norms2, F::lit(1e-12));
    let log_inv = tape.scale(tape.ln(safe), F::lit(-0.5));
    let inv = tape.exp(log_inv); // [n, 1] = 1/||x||
    let ones_row = tape.constant(Array2::<F>::ones((1, d)).into_dyn());
    let spread = tape.matmul(inv, ones_row);
    tape.mul(x, spread)
}

/// Batch-averaged cross-entropy over the distance softmax.
pub fn proto_loss<F: Element>(tape: &Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(logits)[1];
    validate_labels(labels, k)?;
    let lp = tape.log_softmax(logits);
    Ok(tape.nll_loss(lp, labels))
}

/// Zero-shot evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Fraction of test images whose top-scoring candidate is correct.
    pub top1: f64,
    /// Mean of per-class accuracies.
    pub per_class_top1: f64,
    /// `confusion[[true, pred]]` over candidate-class indices.
    pub confusion: Array2<u64>,
    pub n_images: usize,
    pub class_ids: Vec<usize>,
}

impl EvalReport {
    /// Build from predictions over candidate-local indices.
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        class_ids: &[usize],
    ) -> EvalReport {
        let k = class_ids.len();
        let mut confusion = Array2::<u64>::zeros((k, k));
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[[t, p]] += 1;
        }
        let n_images = truth.len();
        let correct: u64 = (0..k).map(|i| confusion[[i, i]]).sum();
        let top1 = correct as f64 / n_images.max(1) as f64;
        let mut per_class = 0.0;
        let mut seen = 0usize;
        for i in 0..k {
            let row: u64 = confusion.row(i).sum();
            if row > 0 {
                per_class += confusion[[i, i]] as f64 / row as f64;
                seen += 1;
            }
        }
        let per_class_top1 = if seen > 0 { per_class / seen as f64 } else { 0.0 };
        EvalReport {
            top1,
            per_class_top1,
            confusion,
            n_images,
            class_ids: class_ids.to_vec(),
        }
    }
}

/// Argmax with ties resolved to the lowest class index.
pub fn predict<F: Element>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Materialized prototype matrix for off-tape evaluation.
pub fn prototype_matrix<F: Element>(
    params: &Params<F>,
    net: &ProtoNet,
    attributes: &Array2<F>,
) -> Array2<F> {
    let tape = Tape::new();
    let a = tape.constant(attributes.clone().into_dyn());
    let p = net.embed.forward(&tape, params, a);
    let v = tape.value(p);
    v.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}
