//! Mini-batch training and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, MAGIC, VERSION};
use crate::dataset::{Dataset, ManifestEntry, SignalStore, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, ConfusionMatrix};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::raster::{rasterize, to_model_input, ImageSpec};
use crate::rng::{derive_seed, rng_from_seed, TAG_EPOCH};
use crate::tensor::Tensor;
use crate::vit::{argmax, ModelParams, ViTConfig, VisionTransformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            eval_batch_size: 8,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.optimizer().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,eval_acc,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.eval_acc, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Maps disturbance class ids to model outputs, in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub class_ids: Vec<u8>,
}

impl LabelMap {
    pub fn for_dataset(dataset: &Dataset) -> Self {
        let mut class_ids: Vec<u8> = dataset.manifest.spec.classes.iter().map(|c| c.id()).collect();
        class_ids.sort_unstable();
        LabelMap { class_ids }
    }

    pub fn label(&self, class_id: u8) -> Result<usize> {
        self.class_ids
            .binary_search(&class_id)
            .map_err(|_| Error::Data(format!("class id {class_id} is not in the label map")))
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Rasterizes one record into a model input.
pub fn prepare_input(samples: &[f64], image: &ImageSpec) -> Result<Tensor> {
    Ok(to_model_input(&rasterize(samples, image)?))
}

/// Checks that `image` produces inputs of the geometry `model` expects.
pub fn check_geometry(model: &ViTConfig, image: &ImageSpec) -> Result<()> {
    image.validate()?;
    if (model.image_height, model.image_width, model.channels) != (image.height, image.width, image.channels) {
        return Err(Error::Config(format!(
            "model expects {}x{}x{} images, renderer produces {}x{}x{}",
            model.image_height, model.image_width, model.channels, image.height, image.width, image.channels
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where cadence checkpoints go, as `epoch_NNNN.pqvt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Mean loss, summed gradients and correct count over a batch.
struct BatchResult {
    loss_sum: f64,
    correct: usize,
    grads: ModelParams,
}

/// Forward/backward over `batch` in parallel. Per-sample gradients are
/// summed in batch order, so the result does not depend on thread count.
fn batch_gradients(
    model: &VisionTransformer,
    batch: &[(&ManifestEntry, usize)],
    store: &SignalStore,
    image: &ImageSpec,
) -> Result<BatchResult> {
    let mut acc = BatchResult {
        loss_sum: 0.0,
        correct: 0,
        grads: model.params.map(|t| Tensor::zeros(t.shape())),
    };
    let wave = rayon::current_num_threads().max(1);
    for chunk in batch.chunks(wave) {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|&(entry, label)| {
                let input = prepare_input(&store.get(entry)?, image)?;
                let g = model.loss_and_grad(&input, label)?;
                Ok((g, label))
            })
            .collect::<Result<_>>()?;
        for (g, label) in results {
            acc.loss_sum += g.loss;
            acc.correct += usize::from(argmax(&g.probs) == label);
            for (a, b) in acc.grads.iter_mut().zip(g.grads.iter()) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok(acc)
}

fn round_to_f32(params: &mut ModelParams) {
    for t in params.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Predictions for `entries`, in order.
pub fn predict_entries(
    model: &VisionTransformer,
    entries: &[&ManifestEntry],
    store: &SignalStore,
    image: &ImageSpec,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(batch_size.max(1)) {
        let preds: Vec<usize> = chunk
            .par_iter()
            .map(|e| model.predict(&prepare_input(&store.get(e)?, image)?))
            .collect::<Result<_>>()?;
        out.extend(preds);
    }
    Ok(out)
}

/// Confusion matrix of `model` over one split.
pub fn evaluate(
    model: &VisionTransformer,
    dataset: &Dataset,
    split: Split,
    image: &ImageSpec,
    labels: &LabelMap,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    check_geometry(&model.config, image)?;
    let entries: Vec<&ManifestEntry> = dataset.manifest.split(split).collect();
    let store = dataset.signal_store()?;
    let preds = predict_entries(model, &entries, &store, image, batch_size)?;
    let mut cm = ConfusionMatrix::zeros(model.config.num_classes);
    for (e, p) in entries.iter().zip(preds) {
        cm.record(labels.label(e.class_id)?, p)?;
    }
    Ok(cm)
}

/// Trains `model_config` on the training split of `dataset`, evaluating on
/// the test split after every epoch. The final epoch's weights are returned.
pub fn train(
    dataset: &Dataset,
    model_config: &ViTConfig,
    config: &TrainConfig,
    image: &ImageSpec,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    check_geometry(model_config, image)?;
    let labels = LabelMap::for_dataset(dataset);
    if labels.len() != model_config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {} outputs",
            labels.len(),
            model_config.num_classes
        )));
    }

    let train_set: Vec<(&ManifestEntry, usize)> = dataset
        .manifest
        .split(Split::Train)
        .map(|e| Ok((e, labels.label(e.class_id)?)))
        .collect::<Result<_>>()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if dataset.manifest.count(Split::Test) == 0 {
        return Err(Error::Data("test split is empty".into()));
    }
    let store = dataset.signal_store()?;

    let (mut params, mut state, mut history, start_epoch) = match &options.resume {
        Some(ck) => {
            if &ck.header.model != model_config {
                return Err(Error::Config("resume checkpoint has a different model config".into()));
            }
            let state = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::Config("resume checkpoint has no optimizer state".into()))?;
            let history = TrainHistory {
                records: ck.header.history.clone(),
            };
            (ck.params.clone(), state, history, ck.header.epochs_completed)
        }
        None => {
            let params = ModelParams::init(model_config)?;
            let state = AdamState::new(&params);
            (params, state, TrainHistory::default(), 0)
        }
    };
    let hyper = config.optimizer();

    let make_checkpoint = |params: &ModelParams, state: &AdamState, history: &TrainHistory, epochs: usize| Checkpoint {
        header: CheckpointHeader {
            magic: String::from_utf8_lossy(MAGIC).into_owned(),
            version: VERSION,
            model: model_config.clone(),
            train: config.clone(),
            grid: *dataset.grid(),
            image: *image,
            class_ids: labels.class_ids.clone(),
            epochs_completed: epochs,
            optimizer_step: state.step,
            history: history.records.clone(),
        },
        params: params.clone(),
        optimizer: Some(state.clone()),
    };

    for epoch in start_epoch + 1..=config.epochs {
        let started = Instant::now();
        let mut order = train_set.clone();
        order.shuffle(&mut rng_from_seed(derive_seed(config.seed, &[TAG_EPOCH, epoch as u64])));

        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let model = VisionTransformer {
                config: model_config.clone(),
                params,
            };
            let mut res = batch_gradients(&model, batch, &store, image)?;
            params = model.params;
            let n = batch.len() as f64;
            let batch_loss = res.loss_sum / n;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            for t in res.grads.iter_mut() {
                for v in t.data_mut() {
                    *v /= n;
                }
            }
            adamw_step(&mut params, &res.grads, &mut state, &hyper)?;
            round_to_f32(&mut params);
            round_to_f32(&mut state.m);
            round_to_f32(&mut state.v);
            loss_sum += res.loss_sum;
            correct += res.correct;
        }

        let model = VisionTransformer {
            config: model_config.clone(),
            params,
        };
        let cm = evaluate(&model, dataset, Split::Test, image, &labels, config.eval_batch_size)?;
        params = model.params;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            eval_acc: accuracy(&cm)?,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train acc {:.4}, eval acc {:.4} ({:.1}s)",
            record.train_loss,
            record.train_acc,
            record.eval_acc,
            record.seconds
        );
        history.records.push(record);

        if let Some(dir) = &options.checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                make_checkpoint(&params, &state, &history, epoch).save(&dir.join(format!("epoch_{epoch:04}.pqvt")))?;
            }
        }
    }

    let epochs_done = start_epoch.max(config.epochs);
    let checkpoint = make_checkpoint(&params, &state, &history, epochs_done);
    Ok(TrainOutcome { checkpoint, history })
}
