//! Desk-scale optimization loop: per-iteration clip sampling, unrolled
//! forward/backward, gradient clipping, ADAM with a stepwise-decayed
//! learning rate, and single-file checkpoints.

pub mod checkpoint;
pub mod unroll;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_MAGIC};
pub use unroll::{clip_grads, clip_loss, ClipLoss};

use rand::Rng as _;

use crate::data::{assemble_batch, sample_clip, Clip, SampleStrategy, SequenceRecord};
use crate::error::{Error, Result};
use crate::model::{ModelGrads, RflModel, VariantConfig};
use crate::nn::adam::{clip_elementwise, clip_global_norm, Adam};
use crate::nn::Scratch;
use crate::rng::{derive_seed, rng_from_seed};
use crate::supervision::DEFAULT_ALPHA;

/// Tag for the parameter-initialization stream.
const SALT_INIT: u64 = 0x5041_5241_4d49;
/// Tag for per-iteration clip-sampling streams.
const SALT_CLIP: u64 = 0x434c_4950;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Clips per mini-batch.
    pub batch_size: usize,
    /// Steps per clip (each step pairs one exemplar with one search image).
    pub clip_len: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    /// Gradient magnitude limit (per element, or joint L2 norm with
    /// `global_norm_clip`).
    pub grad_clip: f64,
    pub global_norm_clip: bool,
    /// Reweight the response-map loss so positive and negative cells
    /// contribute equally.
    pub balanced_loss: bool,
    pub total_iters: u64,
    pub seed: u64,
    pub variant: VariantConfig,
    pub strategy: SampleStrategy,
    /// Photometric + geometric jitter on sampled clips (the first exemplar
    /// of each clip is always left untouched).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            clip_len: 10,
            lr0: 1e-4,
            lr_decay: 0.8,
            lr_decay_every: 5000,
            grad_clip: 10.0,
            global_norm_clip: false,
            balanced_loss: false,
            total_iters: 10_000,
            seed: 0,
            variant: VariantConfig::default(),
            strategy: SampleStrategy::UniformRandom,
            augment: true,
        }
    }
}

/// Stepwise-decayed learning rate for a 0-based iteration index.
pub fn learning_rate(cfg: &TrainConfig, iter: u64) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((iter / cfg.lr_decay_every) as i32)
}

/// Everything that evolves across iterations. Checkpoints snapshot this
/// exactly, so an interrupted run resumed from its last checkpoint retraces
/// the uninterrupted run bit for bit.
pub struct TrainState {
    pub model: RflModel<f32>,
    pub adam: Adam<f32>,
    /// Number of completed iterations.
    pub iter: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[SALT_INIT]));
        let model = RflModel::new(&mut rng, &cfg.variant);
        let adam = Adam::new(&model.trainable_dims());
        TrainState {
            model,
            adam,
            iter: 0,
        }
    }

    pub fn from_checkpoint(loaded: LoadedCheckpoint<f32>) -> Self {
        let adam = loaded
            .adam
            .unwrap_or_else(|| Adam::new(&loaded.model.trainable_dims()));
        TrainState {
            model: loaded.model,
            adam,
            iter: loaded.iter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Write the loss history as `iter,loss,lr` CSV.
pub fn write_loss_csv(path: &std::path::Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("iter,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.lr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Draw one mini-batch of clips for `iter`. Every random choice (sequence,
/// frames, augmentation) flows from per-clip seeds derived from
/// `(cfg.seed, iter, clip index)`, so any batch can be reproduced in
/// isolation. Returns the clips with their seeds.
pub fn sample_training_batch(
    cfg: &TrainConfig,
    sequences: &[SequenceRecord],
    iter: u64,
) -> Result<(Vec<Clip>, Vec<u64>)> {
    if sequences.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    let mut clips = Vec::with_capacity(cfg.batch_size);
    let mut seeds = Vec::with_capacity(cfg.batch_size);
    for c in 0..cfg.batch_size {
        let seed = derive_seed(cfg.seed, &[SALT_CLIP, iter, c as u64]);
        let mut rng = rng_from_seed(seed);
        let seq = &sequences[rng.gen_range(0..sequences.len())];
        clips.push(sample_clip(
            seq,
            cfg.clip_len,
            &mut rng,
            cfg.strategy,
            cfg.augment,
        )?);
        seeds.push(seed);
    }
    Ok((clips, seeds))
}

/// Run iterations `state.iter .. cfg.total_iters`. After each completed
/// iteration, `on_iter` receives the updated state and the loss row (use it
/// for CSV streaming and periodic checkpoints). A non-finite loss aborts
/// before the parameter update, reporting the per-clip seeds of the
/// offending batch.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    sequences: &[SequenceRecord],
    mut on_iter: impl FnMut(&TrainState, LossRow) -> Result<()>,
) -> Result<Vec<LossRow>> {
    let mut scratch = Scratch::new();
    let mut grads = ModelGrads::zeros_like(&state.model);
    let mut history = Vec::new();
    while state.iter < cfg.total_iters {
        let iter = state.iter;
        let lr = learning_rate(cfg, iter);
        let (clips, seeds) = sample_training_batch(cfg, sequences, iter)?;
        let (exemplars, searches, labels) = assemble_batch(&clips, DEFAULT_ALPHA)?;
        grads.zero();
        let outcome = clip_grads(
            &mut state.model,
            &exemplars,
            &searches,
            &labels,
            cfg.balanced_loss,
            true,
            &mut grads,
            &mut scratch,
        )?;
        if !outcome.mean.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at iteration {iter}; batch clip seeds {seeds:?}",
                outcome.mean
            )));
        }
        {
            let mut flat = grads.flat_mut();
            if cfg.global_norm_clip {
                clip_global_norm(&mut flat, cfg.grad_clip);
            } else {
                clip_elementwise(&mut flat, cfg.grad_clip);
            }
        }
        {
            let mut params = state.model.trainable_mut();
            state.adam.step(&mut params, &grads.flat(), lr);
        }
        state.iter = iter + 1;
        let row = LossRow {
            iter,
            loss: outcome.mean,
            lr,
        };
        history.push(row);
        on_iter(state, row)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
