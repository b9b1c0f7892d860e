use pqvit::checkpoint::Checkpoint;
use pqvit::dataset::{generate_dataset, Dataset, DatasetSpec};
use pqvit::optim::{adamw_step, AdamState, AdamWConfig};
use pqvit::raster::ImageSpec;
use pqvit::signal::DisturbanceClass;
use pqvit::train::{prepare_input, train, TrainConfig, TrainOptions};
use pqvit::vit::{is_decayed, ModelParams, ViTConfig, VisionTransformer};
use pqvit::Error;
use tempfile::TempDir;

fn small_model() -> ViTConfig {
    ViTConfig {
        image_height: 16,
        image_width: 16,
        channels: 1,
        patch_size: 8,
        dim: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 2,
        final_norm: true,
        ln_eps: 1e-6,
        init_seed: 1,
    }
}

fn small_dataset(per_class: usize, train_fraction: f64) -> (TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        per_class,
        classes: vec![DisturbanceClass::Normal, DisturbanceClass::Sag],
        seed: 5,
        train_fraction,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        eval_batch_size: 2,
        lr,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn image() -> ImageSpec {
    ImageSpec::square(16)
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let (_dir, ds) = small_dataset(6, 0.5);
    let out = train(&ds, &small_model(), &config(3, 0.0), &image(), &TrainOptions::default()).unwrap();
    assert_eq!(out.checkpoint.params, ModelParams::init(&small_model()).unwrap());
    assert_eq!(out.history.records.len(), 3);
    assert_eq!(out.checkpoint.header.epochs_completed, 3);
    assert_eq!(out.checkpoint.header.optimizer_step, 3 * 2);
}

#[test]
fn training_is_deterministic() {
    let (_dir, ds) = small_dataset(6, 0.5);
    let run = || train(&ds, &small_model(), &config(2, 1e-3), &image(), &TrainOptions::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    assert_eq!(a.checkpoint.optimizer, b.checkpoint.optimizer);
    for (x, y) in a.history.records.iter().zip(&b.history.records) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.eval_acc, y.eval_acc);
    }
}

#[test]
fn resume_continues_identically() {
    let (_dir, ds) = small_dataset(6, 0.5);
    let full = train(&ds, &small_model(), &config(3, 1e-3), &image(), &TrainOptions::default()).unwrap();

    let ckdir = tempfile::tempdir().unwrap();
    let partial = TrainOptions {
        checkpoint_dir: Some(ckdir.path().to_path_buf()),
        resume: None,
    };
    let cadence = TrainConfig {
        checkpoint_every: 1,
        ..config(1, 1e-3)
    };
    train(&ds, &small_model(), &cadence, &image(), &partial).unwrap();
    let saved = Checkpoint::load(&ckdir.path().join("epoch_0001.pqvt")).unwrap();
    let resumed = TrainOptions {
        checkpoint_dir: None,
        resume: Some(saved),
    };
    let rest = train(&ds, &small_model(), &config(3, 1e-3), &image(), &resumed).unwrap();
    assert_eq!(rest.checkpoint.params, full.checkpoint.params);
    assert_eq!(rest.checkpoint.optimizer, full.checkpoint.optimizer);
    let losses = |h: &pqvit::TrainHistory| h.records.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&rest.history), losses(&full.history));
}

#[test]
fn non_finite_loss_reports_divergence() {
    let (_dir, ds) = small_dataset(6, 0.5);
    let mut start = train(&ds, &small_model(), &config(1, 1e-3), &image(), &TrainOptions::default())
        .unwrap()
        .checkpoint;
    start.params.head_bias.data_mut()[0] = f64::NAN;
    let options = TrainOptions {
        checkpoint_dir: None,
        resume: Some(start),
    };
    match train(&ds, &small_model(), &config(2, 1e-3), &image(), &options) {
        Err(Error::Divergence { epoch, batch, loss }) => {
            assert_eq!((epoch, batch), (2, 0));
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_splits_are_rejected() {
    let (_dir, ds) = small_dataset(2, 0.8);
    let err = train(&ds, &small_model(), &config(1, 1e-3), &image(), &TrainOptions::default()).unwrap_err();
    assert!(err.to_string().contains("test split is empty"), "{err}");
}

#[test]
fn class_count_mismatch_is_rejected() {
    let (_dir, ds) = small_dataset(4, 0.5);
    let model = ViTConfig {
        num_classes: 3,
        ..small_model()
    };
    assert!(matches!(
        train(&ds, &model, &config(1, 1e-3), &image(), &TrainOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn decay_skips_biases_and_norms() {
    let mut params = ModelParams::init(&small_model()).unwrap();
    for t in params.iter_mut() {
        t.data_mut().fill(0.5);
    }
    let zeros = params.map(|t| pqvit::Tensor::zeros(t.shape()));
    let mut state = AdamState::new(&params);
    let hyper = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.2,
        ..AdamWConfig::default()
    };
    adamw_step(&mut params, &zeros, &mut state, &hyper).unwrap();
    for (name, t) in params.named() {
        let want = if is_decayed(&name) { 0.5 * (1.0 - 0.1 * 0.2) } else { 0.5 };
        assert!(t.data().iter().all(|&v| (v - want).abs() < 1e-15), "{name}");
    }
    let decayed: Vec<_> = params.names().into_iter().filter(|n| is_decayed(n)).collect();
    assert!(decayed.iter().all(|n| !n.contains("bias") && !n.contains("norm") && !n.contains("cls")));
    assert!(decayed.iter().any(|n| n == "head.weight"));
}

#[test]
fn single_sample_loss_does_not_rise() {
    let (_dir, ds) = small_dataset(2, 0.5);
    let store = ds.signal_store().unwrap();
    let entry = &ds.manifest.entries[0];
    let input = prepare_input(&store.get(entry).unwrap(), &image()).unwrap();
    let mut model = VisionTransformer::new(small_model()).unwrap();
    let mut state = AdamState::new(&model.params);
    let hyper = AdamWConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut previous = f64::INFINITY;
    for step in 0..50 {
        let sg = model.loss_and_grad(&input, 0).unwrap();
        assert!(sg.loss <= previous + 1e-12, "step {step}: {} > {previous}", sg.loss);
        previous = sg.loss;
        adamw_step(&mut model.params, &sg.grads, &mut state, &hyper).unwrap();
    }
}
