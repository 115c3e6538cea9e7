//! Training loop: joint encoder/objective/local-head updates with a
//! concurrently trained (detached) prototypical network, followed by a fresh
//! protonet refit on the frozen encoder and zero-shot evaluation on the
//! unseen classes.
//!
//! Per batch: encode; L_local from the configured local head (zero if none);
//! L_model from the objective; update the encoder-side parameters with
//! d(L_local + L_model); compute the protonet loss on detached global
//! features and update the protonet parameters. One backward pass serves
//! both updates because the two parameter sets are disjoint and the detach
//! point blocks every cross path.

mod objective_head;
mod persist;

pub use objective_head::{ModelLoss, ObjectiveHead};
pub use persist::{
    load_checkpoint, restore_registry, save_checkpoint, CheckpointData, GroupRecord,
};

use crate::autograd::{Params, Tape};
use crate::data::{AttributeMatrix, ClassView, DatasetHandle, SplitViews, TransformMode};
use crate::encoders::{build_encoder, local_tap_shape, Encoder, EncoderArch, WeightProvenance};
use crate::error::{io_ingest, Result, ZfsError};
use crate::local_aux::{ac_loss, lc_loss, AcHead, LcHead, LocalKind};
use crate::nn::{Mode, INIT_SCHEME};
use crate::objectives::{Component, LossReport, ObjectiveKind};
use crate::optim::Adam;
use crate::protonet::{
    embed_attributes, predict, proto_logits, proto_loss, prototype_matrix, EvalReport, Metric,
    PrototypeSet, ProtoNet,
};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Optimization settings; the defaults are the experiment defaults
/// (adaptive moments, learning rate 1e-4, batch size 64).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: "adam".into(),
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub arch: EncoderArch,
    pub objective: ObjectiveKind,
    pub local: LocalKind,
    pub local_weight: f64,
    pub beta: f64,
    pub latent_dim: usize,
    pub metric: Metric,
    pub optimizer: OptimizerConfig,
    pub refit_epochs: usize,
    pub seed: u64,
    /// 0 = checkpoint only after the final epoch.
    pub checkpoint_every: usize,
}

impl TrainerConfig {
    pub fn new(arch: EncoderArch, objective: ObjectiveKind, local: LocalKind, seed: u64) -> Self {
        TrainerConfig {
            arch,
            objective,
            local,
            local_weight: 1.0,
            beta: if objective == ObjectiveKind::BetaVae { 4.0 } else { 1.0 },
            latent_dim: crate::encoders::GLOBAL_DIM,
            metric: Metric::SquaredEuclidean,
            optimizer: OptimizerConfig::default(),
            refit_epochs: 25,
            seed,
            checkpoint_every: 0,
        }
    }
}

pub enum LocalHead {
    Lc(LcHead),
    Ac(AcHead),
}

pub struct GroupSpan {
    pub name: String,
    pub registry: &'static str,
    pub range: std::ops::Range<usize>,
    pub provenance: WeightProvenance,
}

/// Everything the training loop owns: the two disjoint parameter registries
/// (phi: encoder + objective + local head; theta: prototypical network),
/// their optimizers, and per-group provenance.
pub struct TrainState {
    pub config: TrainerConfig,
    pub phi: Params<f32>,
    pub theta: Params<f32>,
    pub encoder: Encoder,
    pub objective: ObjectiveHead,
    pub local_head: Option<LocalHead>,
    pub protonet: ProtoNet,
    pub adam_phi: Adam<f32>,
    pub adam_theta: Adam<f32>,
    pub epoch: usize,
    pub groups: Vec<GroupSpan>,
}

/// Dimensions a state is built for (derived from dataset + split).
#[derive(Clone, Copy, Debug)]
pub struct ProblemDims {
    pub num_train_classes: usize,
    pub attribute_dim: usize,
}

impl TrainState {
    pub fn new(config: TrainerConfig, dims: ProblemDims) -> Result<TrainState> {
        if config.latent_dim != crate::encoders::GLOBAL_DIM {
            return Err(ZfsError::Config(format!(
                "latent dim must equal the {}-d global feature",
                crate::encoders::GLOBAL_DIM
            )));
        }
        let mut phi = Params::<f32>::new();
        let mut theta = Params::<f32>::new();
        let mut groups = Vec::new();

        let (encoder, enc_prov) = build_encoder(config.arch, config.seed, &mut phi);
        groups.push(GroupSpan {
            name: "encoder".into(),
            registry: "phi",
            range: encoder.param_range.clone(),
            provenance: enc_prov,
        });

        let (_, _, local_dim) = local_tap_shape(config.arch);
        let start = phi.len();
        let objective = ObjectiveHead::init(
            config.objective,
            &mut phi,
            dims.num_train_classes,
            dims.attribute_dim,
            local_dim,
            config.latent_dim,
            config.beta,
            config.metric,
            &mut crate::rng::derive(config.seed, "init-objective", &[]),
        );
        groups.push(GroupSpan {
            name: "objective".into(),
            registry: "phi",
            range: start..phi.len(),
            provenance: WeightProvenance {
                init_seed: config.seed,
                init_scheme: INIT_SCHEME.into(),
                external_sources: vec![],
                parameter_digest: phi.digest_range(start..phi.len()),
            },
        });

        let start = phi.len();
        let local_head = match config.local {
            LocalKind::None => None,
            LocalKind::Lc => Some(LocalHead::Lc(LcHead::init(
                &mut phi,
                local_dim,
                dims.num_train_classes,
                &mut crate::rng::derive(config.seed, "init-local", &[]),
            ))),
            LocalKind::Ac => Some(LocalHead::Ac(AcHead::init(
                &mut phi,
                dims.attribute_dim,
                local_dim,
                &mut crate::rng::derive(config.seed, "init-local", &[]),
            ))),
        };
        if local_head.is_some() {
            groups.push(GroupSpan {
                name: "local".into(),
                registry: "phi",
                range: start..phi.len(),
                provenance: WeightProvenance {
                    init_seed: config.seed,
                    init_scheme: INIT_SCHEME.into(),
                    external_sources: vec![],
                    parameter_digest: phi.digest_range(start..phi.len()),
                },
            });
        }

        let protonet = ProtoNet::init(
            &mut theta,
            dims.attribute_dim,
            config.metric,
            &mut crate::rng::derive(config.seed, "init-protonet", &[]),
        );
        groups.push(GroupSpan {
            name: "protonet".into(),
            registry: "theta",
            range: 0..theta.len(),
            provenance: WeightProvenance {
                init_seed: config.seed,
                init_scheme: INIT_SCHEME.into(),
                external_sources: vec![],
                parameter_digest: theta.digest_range(0..theta.len()),
            },
        });

        let adam_phi = Adam::new(config.optimizer.learning_rate, &phi);
        let adam_theta = Adam::new(config.optimizer.learning_rate, &theta);
        Ok(TrainState {
            config,
            phi,
            theta,
            encoder,
            objective,
            local_head,
            protonet,
            adam_phi,
            adam_theta,
            epoch: 0,
            groups,
        })
    }

    /// Re-derive every group's initialization and compare digests; refuse any
    /// provenance with external sources. This is the compliance gate: no
    /// parameter group may originate outside a fresh seeded init.
    pub fn zfs_guard(&self, dims: ProblemDims) -> Result<()> {
        verify_provenance(&self.config, dims, &group_records(&self.groups))
    }

    pub fn digest_phi(&self) -> String {
        self.phi.digest()
    }
}

fn group_records(groups: &[GroupSpan]) -> Vec<GroupRecord> {
    groups
        .iter()
        .map(|g| GroupRecord {
            name: g.name.clone(),
            registry: g.registry.to_string(),
            range: g.range.clone(),
            provenance: g.provenance.clone(),
        })
        .collect()
}

/// Shared by the in-memory guard and checkpoint verification: every group's
/// provenance must be a fresh seeded init (no external sources) whose digest
/// matches a rebuild from the declared seed and scheme.
pub fn verify_provenance(
    config: &TrainerConfig,
    dims: ProblemDims,
    groups: &[GroupRecord],
) -> Result<()> {
    for g in groups {
        if !g.provenance.external_sources.is_empty() {
            return Err(ZfsError::ZfsViolation(format!(
                "parameter group '{}' lists external sources {:?}",
                g.name, g.provenance.external_sources
            )));
        }
        if g.provenance.init_scheme != INIT_SCHEME {
            return Err(ZfsError::ZfsViolation(format!(
                "parameter group '{}' uses unknown init scheme '{}'",
                g.name, g.provenance.init_scheme
            )));
        }
    }
    // Rebuild the inits in scratch registries with the declared seed.
    let mut rebuilt = config.clone();
    rebuilt.seed = groups
        .first()
        .map(|g| g.provenance.init_seed)
        .unwrap_or(config.seed);
    let scratch = TrainState::new(rebuilt, dims)?;
    let fresh = group_records(&scratch.groups);
    for g in groups {
        let Some(f) = fresh.iter().find(|f| f.name == g.name) else {
            return Err(ZfsError::ZfsViolation(format!(
                "unexpected parameter group '{}'",
                g.name
            )));
        };
        if f.provenance.parameter_digest != g.provenance.parameter_digest {
            return Err(ZfsError::ZfsViolation(format!(
                "parameter group '{}' digest does not match a fresh init from seed {} \
                 (weights did not originate from the declared initialization)",
                g.name, g.provenance.init_seed
            )));
        }
    }
    Ok(())
}

/// Verify a stored checkpoint's provenance chain against a fresh rebuild.
pub fn verify_checkpoint(
    config: &TrainerConfig,
    dims: ProblemDims,
    data: &CheckpointData,
) -> Result<()> {
    verify_provenance(config, dims, &data.groups)
}

pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub components: Vec<Component>,
}

/// One pass over the train view.
pub fn train_epoch(
    state: &mut TrainState,
    handle: &DatasetHandle,
    train_view: &ClassView,
    train_attrs: &Array2<f32>,
    epoch: usize,
) -> Result<Vec<BatchLog>> {
    if train_view.image_indices.is_empty() {
        return Err(ZfsError::Config("train view is empty".into()));
    }
    let seed = state.config.seed;
    let batch_size = state.config.optimizer.batch_size;
    let mut order = train_view.image_indices.clone();
    order.shuffle(&mut crate::rng::derive(seed, "order", &[epoch as u64]));

    let mut logs = Vec::new();
    for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
        // DIM needs negatives; drop a trailing singleton batch.
        if chunk.len() < 2 && state.config.objective == ObjectiveKind::Dim {
            continue;
        }
        let images = load_batch(handle, chunk, TransformMode::Train, seed, epoch)?;
        let labels: Vec<usize> = chunk
            .iter()
            .map(|&i| {
                train_view.local_label(handle.label(i)).ok_or_else(|| {
                    ZfsError::Contract(format!("image {i} outside the train classes"))
                })
            })
            .collect::<Result<_>>()?;

        let log = train_step(state, &images, &labels, train_attrs, epoch, batch_idx)?;
        logs.push(log);
    }
    state.epoch = epoch;
    Ok(logs)
}

/// Single optimization step over a prepared batch.
pub fn train_step(
    state: &mut TrainState,
    images: &Array4<f32>,
    labels: &[usize],
    train_attrs: &Array2<f32>,
    epoch: usize,
    batch_idx: usize,
) -> Result<BatchLog> {
    let seed = state.config.seed;
    let tape = Tape::<f32>::new();
    let x = tape.constant(images.clone().into_dyn());
    let enc_out = state
        .encoder
        .forward(&tape, &mut state.phi, x, Mode::Train)?;

    // L_local
    let local = match (&state.local_head, state.config.local) {
        (Some(LocalHead::Lc(head)), LocalKind::Lc) => {
            Some(lc_loss(&tape, &state.phi, head, enc_out.local, labels)?)
        }
        (Some(LocalHead::Ac(head)), LocalKind::Ac) => Some(ac_loss(
            &tape,
            &state.phi,
            head,
            enc_out.local,
            train_attrs,
            labels,
        )?),
        _ => None,
    };

    // L_model
    let mut obj_rng = crate::rng::derive(seed, "objective-noise", &[epoch as u64, batch_idx as u64]);
    let model = state.objective.loss(
        &tape,
        &mut state.phi,
        x,
        &enc_out,
        labels,
        train_attrs,
        state.config.metric,
        &mut obj_rng,
    )?;

    // J = w * L_local + L_model
    let j_var = match &local {
        Some(l) => {
            let lw = tape.scale(l.var, state.config.local_weight as f32);
            tape.add(lw, model.main.var)
        }
        None => model.main.var,
    };
    let j_report = match &local {
        Some(l) => LossReport::merged(&[(&l.report, state.config.local_weight), (&model.main.report, 1.0)]),
        None => model.main.report.clone(),
    };

    // A: prototypical loss on detached features, updating theta only.
    let g_det = tape.detach(enc_out.global);
    let class_ids: Vec<usize> = (0..train_attrs.nrows()).collect();
    let protos = embed_attributes(&tape, &state.theta, &state.protonet, train_attrs, &class_ids)?;
    let logits = proto_logits(&tape, state.config.metric, g_det, &protos)?;
    let a_var = proto_loss(&tape, logits, labels)?;
    let a_value = tape.scalar(a_var) as f64;

    let mut total = tape.add(j_var, a_var);
    if let Some(disc) = &model.disc {
        total = tape.add(total, disc.var);
    }

    // Divergence check before stepping.
    let j_value = tape.scalar(j_var) as f64;
    if !j_value.is_finite() || !a_value.is_finite() || !j_report.all_finite() {
        return Err(ZfsError::Divergence {
            batch: batch_idx,
            message: format!("non-finite loss at epoch {epoch} (J={j_value}, proto={a_value})"),
        });
    }

    let grads = tape.backward(total);
    state.adam_phi.step(&mut state.phi, &grads);
    state.adam_theta.step(&mut state.theta, &grads);

    let mut components = j_report.components.clone();
    components.push(Component {
        name: "total".into(),
        weight: 1.0,
        value: j_value,
    });
    components.push(Component {
        name: "proto".into(),
        weight: 1.0,
        value: a_value,
    });
    if let Some(disc) = &model.disc {
        components.push(Component {
            name: "disc".into(),
            weight: 1.0,
            value: disc.report.total,
        });
    }
    Ok(BatchLog {
        epoch,
        batch: batch_idx,
        components,
    })
}

/// Load and transform a batch in parallel; per-image generators are derived
/// from (seed, epoch, image index) so worker scheduling cannot change crops.
pub fn load_batch(
    handle: &DatasetHandle,
    indices: &[usize],
    mode: TransformMode,
    seed: u64,
    epoch: usize,
) -> Result<Array4<f32>> {
    let tensors: Vec<Result<crate::data::ImageTensor>> =
        crate::exec::par_map(indices.len(), |j| {
            let idx = indices[j];
            let mut rng = crate::rng::derive(seed, "crop", &[epoch as u64, idx as u64]);
            handle.tensor(idx, mode, &mut rng)
        });
    let side = crate::data::CROP_SIDE;
    let mut batch = Array4::<f32>::zeros((indices.len(), 3, side, side));
    for (j, t) in tensors.into_iter().enumerate() {
        batch
            .index_axis_mut(ndarray::Axis(0), j)
            .assign(&t?);
    }
    Ok(batch)
}

/// Cache eval-transform global features for a view, batch by batch.
pub fn cache_global_features(
    encoder: &Encoder,
    phi: &mut Params<f32>,
    handle: &DatasetHandle,
    view: &ClassView,
    seed: u64,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let n = view.image_indices.len();
    let mut feats = Array2::<f32>::zeros((n, crate::encoders::GLOBAL_DIM));
    let mut labels = Vec::with_capacity(n);
    for (start, chunk) in view.image_indices.chunks(64).enumerate() {
        let images = load_batch(handle, chunk, TransformMode::Eval, seed, 0)?;
        let tape = Tape::<f32>::new();
        let x = tape.constant(images.into_dyn());
        let out = encoder.forward(&tape, phi, x, Mode::Eval)?;
        let g = tape.value(out.global);
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        feats
            .slice_mut(ndarray::s![start * 64..start * 64 + chunk.len(), ..])
            .assign(&g2);
    }
    for &i in &view.image_indices {
        labels.push(
            view.local_label(handle.label(i))
                .ok_or_else(|| ZfsError::Contract(format!("image {i} outside view classes")))?,
        );
    }
    Ok((feats, labels))
}

/// Train a fresh prototypical network on frozen global features. Returns the
/// network, its parameters, and per-epoch batch losses. The encoder registry
/// digest must be unchanged afterwards.
pub fn refit_protonet(
    encoder: &Encoder,
    phi: &mut Params<f32>,
    handle: &DatasetHandle,
    train_view: &ClassView,
    train_attrs: &Array2<f32>,
    config: &TrainerConfig,
) -> Result<(ProtoNet, Params<f32>, Vec<Vec<f64>>)> {
    let digest_before = phi.digest();
    let (feats, labels) = cache_global_features(encoder, phi, handle, train_view, config.seed)?;

    let mut theta = Params::<f32>::new();
    let net = ProtoNet::init(
        &mut theta,
        train_attrs.ncols(),
        config.metric,
        &mut crate::rng::derive(config.seed, "init-protonet-refit", &[]),
    );
    let mut adam = Adam::new(config.optimizer.learning_rate, &theta);
    let class_ids: Vec<usize> = (0..train_attrs.nrows()).collect();

    let mut curves = Vec::new();
    let n = feats.nrows();
    for epoch in 0..config.refit_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut crate::rng::derive(config.seed, "refit-order", &[epoch as u64]));
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(config.optimizer.batch_size) {
            let mut g = Array2::<f32>::zeros((chunk.len(), feats.ncols()));
            let mut y = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                g.row_mut(j).assign(&feats.row(i));
                y.push(labels[i]);
            }
            let tape = Tape::<f32>::new();
            let gv = tape.constant(g.into_dyn());
            let protos = embed_attributes(&tape, &theta, &net, train_attrs, &class_ids)?;
            let logits = proto_logits(&tape, config.metric, gv, &protos)?;
            let loss = proto_loss(&tape, logits, &y)?;
            epoch_losses.push(tape.scalar(loss) as f64);
            let grads = tape.backward(loss);
            adam.step(&mut theta, &grads);
        }
        curves.push(epoch_losses);
    }

    if phi.digest() != digest_before {
        return Err(ZfsError::Contract(
            "encoder parameters changed during protonet refit".into(),
        ));
    }
    Ok((net, theta, curves))
}

/// Classify every test image by its nearest test-class prototype.
pub fn zero_shot_eval(
    encoder: &Encoder,
    phi: &mut Params<f32>,
    net: &ProtoNet,
    theta: &Params<f32>,
    handle: &DatasetHandle,
    test_view: &ClassView,
    attrs: &AttributeMatrix,
    metric: Metric,
    seed: u64,
) -> Result<EvalReport> {
    if test_view.image_indices.is_empty() {
        return Err(ZfsError::Config("test view is empty".into()));
    }
    let test_attrs: Array2<f32> = attrs.rows_for(&test_view.classes);
    let protos = prototype_matrix(theta, net, &test_attrs);

    let (feats, truth) = cache_global_features(encoder, phi, handle, test_view, seed)?;
    let logits = match metric {
        Metric::SquaredEuclidean => {
            let tape = Tape::<f32>::new();
            let q = tape.constant(feats.into_dyn());
            let set = PrototypeSet {
                protos: tape.constant(protos.into_dyn()),
                class_ids: test_view.classes.clone(),
            };
            let l = proto_logits(&tape, metric, q, &set)?;
            let v = tape.value(l);
            v.view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        }
        Metric::Cosine => {
            let tape = Tape::<f32>::new();
            let q = tape.constant(feats.into_dyn());
            let set = PrototypeSet {
                protos: tape.constant(protos.into_dyn()),
                class_ids: test_view.classes.clone(),
            };
            let l = proto_logits(&tape, metric, q, &set)?;
            let v = tape.value(l);
            v.view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        }
    };
    let predictions = predict(&logits);
    Ok(EvalReport::from_predictions(
        &truth,
        &predictions,
        &test_view.classes,
    ))
}

pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub eval: EvalReport,
    pub wall_time: f64,
    pub phi_digest: String,
    pub provenance_digest: String,
}

/// Full training run: guard, epochs, checkpoints, refit, evaluation, and the
/// run-directory files (provenance.manifest, losses.csv, checkpoints/,
/// eval.report). `config_snapshot` is written verbatim as config.snapshot.
pub fn fit(
    config: &TrainerConfig,
    handle: &DatasetHandle,
    views: &SplitViews,
    attrs: &AttributeMatrix,
    run_dir: &Path,
    config_snapshot: &str,
) -> Result<RunArtifacts> {
    let started = std::time::Instant::now();
    let dims = ProblemDims {
        num_train_classes: views.train.classes.len(),
        attribute_dim: attrs.attribute_dim(),
    };
    let mut state = TrainState::new(config.clone(), dims)?;
    state.zfs_guard(dims)?;

    std::fs::create_dir_all(run_dir.join("checkpoints"))
        .map_err(|e| io_ingest(run_dir, e))?;
    std::fs::write(run_dir.join("config.snapshot"), config_snapshot)
        .map_err(|e| io_ingest(run_dir, e))?;
    write_provenance_manifest(&run_dir.join("provenance.manifest"), &state.groups)?;

    let train_attrs: Array2<f32> = attrs.rows_for(&views.train.classes);
    let losses_path = run_dir.join("losses.csv");
    let mut losses = std::io::BufWriter::new(
        std::fs::File::create(&losses_path).map_err(|e| io_ingest(&losses_path, e))?,
    );
    writeln!(losses, "format=1").map_err(|e| io_ingest(&losses_path, e))?;
    writeln!(losses, "epoch,batch,component,value").map_err(|e| io_ingest(&losses_path, e))?;

    for epoch in 1..=config.optimizer.epochs {
        let logs = train_epoch(&mut state, handle, &views.train, &train_attrs, epoch)?;
        for log in &logs {
            for c in &log.components {
                writeln!(losses, "{},{},{},{}", log.epoch, log.batch, c.name, c.value)
                    .map_err(|e| io_ingest(&losses_path, e))?;
            }
        }
        let cadence = config.checkpoint_every;
        if (cadence > 0 && epoch % cadence == 0) || epoch == config.optimizer.epochs {
            let path = run_dir.join(format!("checkpoints/epoch_{epoch}"));
            save_state_checkpoint(&path, &state, epoch)?;
        }
    }
    losses.flush().map_err(|e| io_ingest(&losses_path, e))?;

    // Evaluated protonet: fresh refit on the frozen encoder.
    let (refit_net, refit_theta, _curves) = refit_protonet(
        &state.encoder,
        &mut state.phi,
        handle,
        &views.train,
        &train_attrs,
        config,
    )?;

    let eval = zero_shot_eval(
        &state.encoder,
        &mut state.phi,
        &refit_net,
        &refit_theta,
        handle,
        &views.test,
        attrs,
        config.metric,
        config.seed,
    )?;
    write_eval_report(&run_dir.join("eval.report"), &eval)?;

    let provenance_digest = provenance_digest(&state.groups);
    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        eval,
        wall_time: started.elapsed().as_secs_f64(),
        phi_digest: state.phi.digest(),
        provenance_digest,
    })
}

pub fn save_state_checkpoint(path: &Path, state: &TrainState, epoch: usize) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("arch".into(), state.config.arch.name().into());
    meta.insert("objective".into(), state.config.objective.name().into());
    meta.insert("local".into(), state.config.local.name().into());
    meta.insert("seed".into(), state.config.seed.to_string());
    meta.insert("epoch".into(), epoch.to_string());
    save_checkpoint(
        path,
        &meta,
        &group_records(&state.groups),
        &[("phi", &state.phi), ("theta", &state.theta)],
    )
}

pub fn write_provenance_manifest(path: &Path, groups: &[GroupSpan]) -> Result<()> {
    let mut out = String::from("format=1\n");
    for g in groups {
        out.push_str(&format!(
            "group={}\nregistry={}\ninit_seed={}\ninit_scheme={}\nexternal_sources={}\nparameter_digest={}\n\n",
            g.name,
            g.registry,
            g.provenance.init_seed,
            g.provenance.init_scheme,
            g.provenance.external_sources.join(","),
            g.provenance.parameter_digest
        ));
    }
    std::fs::write(path, out).map_err(|e| io_ingest(path, e))
}

pub fn provenance_digest(groups: &[GroupSpan]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for g in groups {
        h.update(g.name.as_bytes());
        h.update(g.provenance.parameter_digest.as_bytes());
    }
    crate::autograd::hex(&h.finalize())
}

pub fn write_eval_report(path: &Path, eval: &EvalReport) -> Result<()> {
    let mut out = String::from("format=1\n");
    out.push_str(&format!("top1={}\n", eval.top1));
    out.push_str(&format!("per_class_top1={}\n", eval.per_class_top1));
    out.push_str(&format!("n_images={}\n", eval.n_images));
    let ids: Vec<String> = eval.class_ids.iter().map(|c| c.to_string()).collect();
    out.push_str(&format!("classes={}\n", ids.join(" ")));
    out.push_str("confusion=\n");
    for row in eval.confusion.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_ingest(path, e))
}
