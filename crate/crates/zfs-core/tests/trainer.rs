//! Training-loop contracts: loss composition, detachment, determinism,
//! provenance guarding, and the frozen-encoder refit.

use ndarray::Array2;
use std::path::Path;
use zfs_core::autograd::{ParamId, Tape};
use zfs_core::data::{
    apply_split, generate_synthetic, load_dataset, normalize_attributes, AttributeMatrix,
    DatasetHandle, SplitViews, SyntheticSpec,
};
use zfs_core::encoders::EncoderArch;
use zfs_core::error::ZfsError;
use zfs_core::local_aux::LocalKind;
use zfs_core::objectives::ObjectiveKind;
use zfs_core::protonet::{embed_attributes, proto_logits, proto_loss};
use zfs_core::trainer::{
    fit, load_checkpoint, refit_protonet, save_state_checkpoint, train_epoch, train_step,
    verify_checkpoint, zero_shot_eval, OptimizerConfig, ProblemDims, TrainState, TrainerConfig,
};

/// Small but coverage-valid synthetic spec: 6 classes over 6 parts, 4/2 split.
fn tiny_spec(samples: usize) -> SyntheticSpec {
    SyntheticSpec {
        grid_size: 2,
        part_vocabulary: 6,
        classes: vec![
            vec![0, 1],
            vec![2, 3],
            vec![4, 5],
            vec![0, 3, 4],
            vec![1, 2],
            vec![0, 5],
        ],
        train_fraction: 0.67,
        samples_per_class: samples,
        image_side: 128,
    }
}

struct TinyData {
    _dir: tempfile::TempDir,
    handle: DatasetHandle,
    views: SplitViews,
    attrs: AttributeMatrix,
}

fn tiny_data(samples: usize, seed: u64) -> TinyData {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(samples);
    let out = generate_synthetic(&spec, seed, dir.path()).unwrap();
    let handle = load_dataset(&out.manifest).unwrap();
    let views = apply_split(&handle, &out.split).unwrap();
    let attrs = normalize_attributes(&handle.raw_attributes).unwrap();
    TinyData {
        _dir: dir,
        handle,
        views,
        attrs,
    }
}

fn tiny_config(objective: ObjectiveKind, local: LocalKind, seed: u64) -> TrainerConfig {
    let mut cfg = TrainerConfig::new(EncoderArch::Basic, objective, local, seed);
    cfg.optimizer = OptimizerConfig {
        batch_size: 8,
        epochs: 2,
        ..Default::default()
    };
    cfg.refit_epochs = 2;
    cfg
}

fn dims_of(data: &TinyData) -> ProblemDims {
    ProblemDims {
        num_train_classes: data.views.train.classes.len(),
        attribute_dim: data.attrs.attribute_dim(),
    }
}

#[test]
fn no_local_head_means_j_equals_l_model() {
    let data = tiny_data(3, 1);
    let cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 5);
    let mut state = TrainState::new(cfg, dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);
    let logs = train_epoch(&mut state, &data.handle, &data.views.train, &train_attrs, 1).unwrap();
    assert!(!logs.is_empty());
    for log in &logs {
        assert!(log.components.iter().all(|c| c.name != "local_aux"));
        let total = log
            .components
            .iter()
            .find(|c| c.name == "total")
            .unwrap()
            .value;
        let ce = log
            .components
            .iter()
            .find(|c| c.name == "cross_entropy")
            .unwrap()
            .value;
        assert!((total - ce).abs() < 1e-6, "J must equal L_model exactly");
    }
}

#[test]
fn j_composes_local_and_model_within_tolerance() {
    let data = tiny_data(3, 2);
    let cfg = tiny_config(ObjectiveKind::Dim, LocalKind::Ac, 6);
    let mut state = TrainState::new(cfg, dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);
    let logs = train_epoch(&mut state, &data.handle, &data.views.train, &train_attrs, 1).unwrap();
    for log in &logs {
        let get = |n: &str| log.components.iter().find(|c| c.name == n).map(|c| c.value);
        let total = get("total").unwrap();
        let local = get("local_aux").unwrap();
        let model = get("mi_local").unwrap();
        assert!(
            (total - (local + model)).abs() < 1e-6,
            "J = L_local + L_global violated: {total} vs {local} + {model}"
        );
    }
}

#[test]
fn theta_updates_never_touch_phi_and_vice_versa() {
    let data = tiny_data(3, 3);
    let cfg = tiny_config(ObjectiveKind::Fc, LocalKind::Lc, 7);
    let mut state = TrainState::new(cfg, dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);

    // Build the joint graph by hand to inspect gradients of A alone.
    let chunk: Vec<usize> = data.views.train.image_indices[..8].to_vec();
    let images =
        zfs_core::trainer::load_batch(&data.handle, &chunk, zfs_core::data::TransformMode::Train, 7, 1)
            .unwrap();
    let labels: Vec<usize> = chunk
        .iter()
        .map(|&i| data.views.train.local_label(data.handle.label(i)).unwrap())
        .collect();

    let tape = Tape::<f32>::new();
    let x = tape.constant(images.into_dyn());
    let out = state
        .encoder
        .forward(&tape, &mut state.phi, x, zfs_core::nn::Mode::Train)
        .unwrap();
    let g_det = tape.detach(out.global);
    let class_ids: Vec<usize> = (0..train_attrs.nrows()).collect();
    let protos =
        embed_attributes(&tape, &state.theta, &state.protonet, &train_attrs, &class_ids).unwrap();
    let logits = proto_logits(&tape, state.config.metric, g_det, &protos).unwrap();
    let a = proto_loss(&tape, logits, &labels).unwrap();
    let grads = tape.backward(a);

    for i in 0..state.phi.len() {
        assert!(
            grads.for_param(&state.phi, ParamId(i)).is_none(),
            "proto loss leaked into phi parameter {i}"
        );
    }
    let theta_reached = (0..state.theta.len())
        .filter(|&i| grads.for_param(&state.theta, ParamId(i)).is_some())
        .count();
    assert!(theta_reached > 0);
}

#[test]
fn theta_gradient_is_independent_of_encoder_weights_given_stored_features() {
    // Finite-difference cross-check of the detachment contract: with the
    // detached features held fixed, theta gradients must not move when an
    // encoder weight is perturbed (difference <= 1e-8).
    let data = tiny_data(3, 4);
    let cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 8);
    let mut state = TrainState::new(cfg, dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);

    let chunk: Vec<usize> = data.views.train.image_indices[..8].to_vec();
    let images =
        zfs_core::trainer::load_batch(&data.handle, &chunk, zfs_core::data::TransformMode::Eval, 8, 0)
            .unwrap();
    let labels: Vec<usize> = chunk
        .iter()
        .map(|&i| data.views.train.local_label(data.handle.label(i)).unwrap())
        .collect();

    // Stored detached features.
    let stored = {
        let tape = Tape::<f32>::new();
        let x = tape.constant(images.clone().into_dyn());
        let out = state
            .encoder
            .forward(&tape, &mut state.phi, x, zfs_core::nn::Mode::Eval)
            .unwrap();
        let g = tape.value(out.global);
        g.view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    };

    let theta_grad = |state: &TrainState| -> Vec<f32> {
        let tape = Tape::<f32>::new();
        let g = tape.constant(stored.clone().into_dyn());
        let class_ids: Vec<usize> = (0..train_attrs.nrows()).collect();
        let protos =
            embed_attributes(&tape, &state.theta, &state.protonet, &train_attrs, &class_ids)
                .unwrap();
        let logits = proto_logits(&tape, state.config.metric, g, &protos).unwrap();
        let a = proto_loss(&tape, logits, &labels).unwrap();
        let grads = tape.backward(a);
        let mut flat = Vec::new();
        for i in 0..state.theta.len() {
            if let Some(g) = grads.for_param(&state.theta, ParamId(i)) {
                flat.extend(g.iter().copied());
            }
        }
        flat
    };

    let base = theta_grad(&state);
    // Perturb one encoder weight strongly in both directions.
    let eps = 0.5f32;
    let w0 = ParamId(state.encoder.param_range.start);
    state.phi.get_mut(w0)[[0, 0, 0, 0]] += eps;
    let plus = theta_grad(&state);
    state.phi.get_mut(w0)[[0, 0, 0, 0]] -= 2.0 * eps;
    let minus = theta_grad(&state);

    let max_diff = base
        .iter()
        .zip(plus.iter().zip(minus.iter()))
        .map(|(b, (p, m))| (b - p).abs().max((b - m).abs()) as f64)
        .fold(0.0f64, f64::max);
    assert!(max_diff <= 1e-8, "cross dependence {max_diff}");
}

#[test]
fn fit_is_deterministic_and_logs_expected_components() {
    let data = tiny_data(4, 5);
    let mut cfg = tiny_config(ObjectiveKind::Dim, LocalKind::Ac, 9);
    cfg.optimizer.epochs = 1;
    cfg.refit_epochs = 1;

    let run = |dir: &Path| {
        fit(&cfg, &data.handle, &data.views, &data.attrs, dir, "format=1\n").unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let a1 = run(d1.path());
    let d2 = tempfile::tempdir().unwrap();
    let a2 = run(d2.path());

    assert_eq!(a1.eval, a2.eval, "identical config+seed must reproduce eval");
    assert_eq!(a1.phi_digest, a2.phi_digest);
    let e1 = std::fs::read(d1.path().join("eval.report")).unwrap();
    let e2 = std::fs::read(d2.path().join("eval.report")).unwrap();
    assert_eq!(e1, e2);
    let l1 = std::fs::read_to_string(d1.path().join("losses.csv")).unwrap();
    let l2 = std::fs::read_to_string(d2.path().join("losses.csv")).unwrap();
    assert_eq!(l1, l2);

    for component in ["mi_local", "local_aux", "proto", "total"] {
        assert!(
            l1.contains(&format!(",{component},")),
            "losses.csv missing component {component}"
        );
    }
    assert!(d1.path().join("checkpoints/epoch_1").exists());
    assert!(d1.path().join("provenance.manifest").exists());
    assert!(d1.path().join("config.snapshot").exists());
}

#[test]
fn overfit_one_batch_of_eight() {
    // One fixed batch of 8 synthetic images, FC objective, 500 steps: the
    // training loss must collapse below 0.1.
    let data = tiny_data(2, 6);
    let mut cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 10);
    cfg.optimizer.learning_rate = 1e-3;
    let mut state = TrainState::new(cfg, dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);

    let chunk: Vec<usize> = data.views.train.image_indices[..8].to_vec();
    let images =
        zfs_core::trainer::load_batch(&data.handle, &chunk, zfs_core::data::TransformMode::Eval, 10, 0)
            .unwrap();
    let labels: Vec<usize> = chunk
        .iter()
        .map(|&i| data.views.train.local_label(data.handle.label(i)).unwrap())
        .collect();

    let mut last = f64::INFINITY;
    for step in 0..500 {
        let log = train_step(&mut state, &images, &labels, &train_attrs, 1, step).unwrap();
        last = log
            .components
            .iter()
            .find(|c| c.name == "total")
            .unwrap()
            .value;
        if last < 0.05 {
            break;
        }
    }
    assert!(last < 0.1, "training loss stuck at {last}");
}

#[test]
fn refit_keeps_encoder_frozen_and_improves() {
    let data = tiny_data(4, 7);
    let mut cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 11);
    cfg.refit_epochs = 6;
    let mut state = TrainState::new(cfg.clone(), dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);

    let digest_before = state.phi.digest();
    let (_net, _theta, curves) = refit_protonet(
        &state.encoder,
        &mut state.phi,
        &data.handle,
        &data.views.train,
        &train_attrs,
        &cfg,
    )
    .unwrap();
    assert_eq!(state.phi.digest(), digest_before);

    // Median batch loss per epoch must be non-increasing overall (first vs
    // last epoch on this toy problem).
    let median = |v: &Vec<f64>| {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    assert!(
        median(&curves[curves.len() - 1]) <= median(&curves[0]),
        "refit loss went up: {:?}",
        curves.iter().map(median).collect::<Vec<_>>()
    );
}

#[test]
fn zero_refit_epochs_gives_chance_level_eval() {
    let data = tiny_data(6, 8);
    let mut cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 12);
    cfg.refit_epochs = 0;
    let mut state = TrainState::new(cfg.clone(), dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);
    let (net, theta, curves) = refit_protonet(
        &state.encoder,
        &mut state.phi,
        &data.handle,
        &data.views.train,
        &train_attrs,
        &cfg,
    )
    .unwrap();
    assert!(curves.is_empty());
    let eval = zero_shot_eval(
        &state.encoder,
        &mut state.phi,
        &net,
        &theta,
        &data.handle,
        &data.views.test,
        &data.attrs,
        cfg.metric,
        cfg.seed,
    )
    .unwrap();
    // 2 test classes, untrained everything: accuracy should hover near 1/2,
    // certainly not near 1.
    assert!(eval.top1 < 0.95);
    assert_eq!(eval.confusion.dim(), (2, 2));
}

#[test]
fn eval_is_pure_and_restricted_to_test_classes() {
    let data = tiny_data(3, 9);
    let cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 13);
    let mut state = TrainState::new(cfg.clone(), dims_of(&data)).unwrap();
    let train_attrs: Array2<f32> = data.attrs.rows_for(&data.views.train.classes);
    let (net, theta, _) = refit_protonet(
        &state.encoder,
        &mut state.phi,
        &data.handle,
        &data.views.train,
        &train_attrs,
        &cfg,
    )
    .unwrap();

    let phi_before = state.phi.digest();
    let theta_before = theta.digest();
    let eval = zero_shot_eval(
        &state.encoder,
        &mut state.phi,
        &net,
        &theta,
        &data.handle,
        &data.views.test,
        &data.attrs,
        cfg.metric,
        cfg.seed,
    )
    .unwrap();
    assert_eq!(state.phi.digest(), phi_before, "evaluation mutated phi");
    assert_eq!(theta.digest(), theta_before, "evaluation mutated theta");
    // Candidate restriction: confusion is K_test x K_test and counts cover
    // every test image.
    assert_eq!(eval.confusion.dim(), (2, 2));
    assert_eq!(eval.confusion.sum() as usize, eval.n_images);
}

#[test]
fn guard_accepts_fresh_and_rejects_tampering() {
    let data = tiny_data(2, 10);
    let cfg = tiny_config(ObjectiveKind::Fc, LocalKind::None, 14);
    let dims = dims_of(&data);
    let state = TrainState::new(cfg.clone(), dims).unwrap();
    state.zfs_guard(dims).unwrap();

    // Checkpoint roundtrip passes the guard.
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("checkpoints_epoch_0");
    save_state_checkpoint(&ck, &state, 0).unwrap();
    let data_ck = load_checkpoint(&ck).unwrap();
    verify_checkpoint(&cfg, dims, &data_ck).unwrap();

    // 1. Declared external sources are refused.
    let mut poisoned = data_ck.clone();
    poisoned.groups[0]
        .provenance
        .external_sources
        .push("imagenet".into());
    let err = verify_checkpoint(&cfg, dims, &poisoned).unwrap_err();
    assert!(matches!(err, ZfsError::ZfsViolation(_)));

    // 2. A provenance digest that does not match a fresh seeded init.
    let mut forged = data_ck.clone();
    forged.groups[0].provenance.parameter_digest = format!(
        "{}{}",
        &data_ck.groups[0].provenance.parameter_digest[1..],
        "0"
    );
    let err = verify_checkpoint(&cfg, dims, &forged).unwrap_err();
    assert!(matches!(err, ZfsError::ZfsViolation(_)));

    // 3. A flipped byte anywhere in the file fails the content digest.
    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 3;
    bytes[mid] ^= 0x40;
    std::fs::write(&ck, &bytes).unwrap();
    let err = load_checkpoint(&ck).unwrap_err();
    assert!(matches!(err, ZfsError::ZfsViolation(_)));
}
