//! Minibatch training with binary cross-entropy, the two-stage ensemble
//! protocol, loss histories and checkpoints.

pub mod checkpoint;
mod optim;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{batches, sequential_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::{EnsembleConfig, Model, ResUNetConfig};
use crate::tensor::{Graph, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointError,
};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Measure wall-clock seconds per epoch. Off by default so that histories
    /// are reproducible byte for byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 15,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `None` when timing was not requested.
    pub seconds: Vec<Option<f64>>,
}

impl History {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    /// `epoch,train_loss,val_loss,seconds` with 1-based epochs; the seconds
    /// field is left empty when it was not measured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for i in 0..self.len() {
            let secs = self.seconds[i].map(|s| format!("{s:.3}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", i + 1, self.train_loss[i], self.val_loss[i], secs);
        }
        out
    }
}

/// What the training loop reports after each epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochSummary<'a> {
    pub stage: &'a str,
    pub epoch: usize,
    pub epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Maps a batch to the model's output probabilities.
type ForwardFn<'f> = dyn Fn(&Model, &mut Graph<f32>, &Batch) -> Result<Var> + 'f;

fn plain_forward(model: &Model, g: &mut Graph<f32>, batch: &Batch) -> Result<Var> {
    let x = g.leaf(&batch.images);
    model.forward(g, x)
}

pub fn train_model(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<History> {
    train_model_observed(model, train, val, cfg, &mut |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_observed(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochSummary<'_>),
) -> Result<History> {
    fit(model, train, val, cfg, "train", &plain_forward, observer)
}

fn fit(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    stage: &str,
    forward: &ForwardFn<'_>,
    observer: &mut dyn FnMut(&EpochSummary<'_>),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs nonempty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params());
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut total, mut seen) = (0.0f64, 0usize);
        for (b, batch) in batches(train, cfg.batch_size, cfg.seed, epoch as u64)?.enumerate() {
            let mut g = Graph::<f32>::new();
            let y = forward(model, &mut g, &batch)?;
            let t = g.leaf(&batch.masks);
            let loss = g.bce_loss(y, t)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, loss: value });
            }
            g.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&g)?;
            opt.step(model.params_mut())?;
            total += value as f64 * batch.ids.len() as f64;
            seen += batch.ids.len();
        }
        let train_loss = total / seen as f64;
        let val_loss = mean_loss_with(model, val, cfg.batch_size, forward)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: usize::MAX,
                loss: val_loss as f32,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history
            .seconds
            .push(cfg.record_time.then(|| start.elapsed().as_secs_f64()));
        observer(&EpochSummary {
            stage,
            epoch,
            epochs: cfg.epochs,
            train_loss,
            val_loss,
        });
    }
    model.zero_grad();
    Ok(history)
}

/// Sample-weighted mean BCE of `model` over `ds`, in inference mode.
pub fn mean_loss(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    mean_loss_with(model, ds, batch_size, &plain_forward)
}

fn mean_loss_with(model: &Model, ds: &Dataset, batch_size: usize, forward: &ForwardFn<'_>) -> Result<f64> {
    let (mut total, mut seen) = (0.0f64, 0usize);
    for batch in sequential_batches(ds, batch_size)? {
        let mut g = Graph::<f32>::inference();
        let y = forward(model, &mut g, &batch)?;
        let t = g.leaf(&batch.masks);
        let loss = g.bce_loss(y, t)?;
        total += g.value(loss)[0] as f64 * batch.ids.len() as f64;
        seen += batch.ids.len();
    }
    if seen == 0 {
        return Err(Error::Data("cannot compute a loss over an empty dataset".into()));
    }
    Ok(total / seen as f64)
}

/// Result of [`train_ensemble_two_stage`].
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub ensemble: Model,
    /// Bases as they stood at the end of stage 1.
    pub bases: Vec<Model>,
    /// One history per base, then the meta-model's.
    pub histories: Vec<History>,
}

/// Stage 1 trains one residual U-Net per config, base `i` using seed
/// `stage1.seed + i`. Stage 2 stacks them under a fresh meta block seeded
/// with `stage2.seed`, freezes every base parameter and trains only the meta
/// block.
pub fn train_ensemble_two_stage(
    base_cfgs: &[ResUNetConfig],
    ensemble_cfg: &EnsembleConfig,
    train: &Dataset,
    val: &Dataset,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    observer: &mut dyn FnMut(&EpochSummary<'_>),
) -> Result<EnsembleRun> {
    if base_cfgs.len() < 2 {
        return Err(Error::Config(format!(
            "an ensemble needs at least 2 bases, got {}",
            base_cfgs.len()
        )));
    }
    stage1.validate()?;
    stage2.validate()?;
    let mut bases = Vec::with_capacity(base_cfgs.len());
    let mut histories = Vec::with_capacity(base_cfgs.len() + 1);
    for (i, cfg) in base_cfgs.iter().enumerate() {
        let seed = stage1.seed.wrapping_add(i as u64);
        let mut base = Model::residual_unet(*cfg, seed)?;
        let base_train = TrainConfig {
            seed,
            ..stage1.clone()
        };
        let stage = format!("base{i}");
        histories.push(fit(&mut base, train, val, &base_train, &stage, &plain_forward, observer)?);
        bases.push(base);
    }
    let mut ensemble = Model::ensemble(&bases, ensemble_cfg, stage2.seed)?;
    let history = train_meta(&mut ensemble, train, val, stage2, observer)?;
    histories.push(history);
    Ok(EnsembleRun {
        ensemble,
        bases,
        histories,
    })
}

/// Trains only the trainable (meta) parameters of an ensemble whose bases are
/// frozen. Base outputs never change, so they are computed once per sample
/// and reused.
pub fn train_meta(
    ensemble: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochSummary<'_>),
) -> Result<History> {
    if ensemble.params().iter().any(|(n, t)| n.starts_with("base.") && t.requires_grad) {
        return Err(Error::Config("ensemble bases must be frozen before meta training".into()));
    }
    let bases = ensemble.bases()?;
    let mut cache = HashMap::new();
    for ds in [train, val] {
        stack_base_outputs(&bases, ds, cfg.batch_size.max(1), &mut cache)?;
    }
    let forward = move |model: &Model, g: &mut Graph<f32>, batch: &Batch| -> Result<Var> {
        let (n, _, h, w) = batch.images.dims4()?;
        let k = bases.len();
        let mut data = Vec::with_capacity(n * k * h * w);
        for id in &batch.ids {
            data.extend_from_slice(&cache[id.as_str()]);
        }
        let features = g.leaf(&Tensor::new([n, k, h, w], data)?);
        model.meta_forward(g, features)
    };
    fit(ensemble, train, val, cfg, "meta", &forward, observer)
}

/// Per sample, the `[k, H, W]` stack of the `k` base probability maps.
fn stack_base_outputs(
    bases: &[Model],
    ds: &Dataset,
    batch_size: usize,
    cache: &mut HashMap<String, Vec<f32>>,
) -> Result<()> {
    for batch in sequential_batches(ds, batch_size)? {
        let (n, _, h, w) = batch.images.dims4()?;
        let plane = h * w;
        let mut stacked = vec![vec![0.0f32; bases.len() * plane]; n];
        for (k, base) in bases.iter().enumerate() {
            let y = base.predict(&batch.images)?;
            for (s, out) in stacked.iter_mut().enumerate() {
                out[k * plane..(k + 1) * plane].copy_from_slice(&y.data()[s * plane..(s + 1) * plane]);
            }
        }
        for (id, v) in batch.ids.into_iter().zip(stacked) {
            cache.insert(id, v);
        }
    }
    Ok(())
}
