//! Deliberate overfitting: fixed epoch budget, AdamW, optional flip
//! augmentation, deterministic down to the bit.
//!
//! Every random draw is keyed on `(seed, absolute epoch, sample index)`,
//! never on RNG continuation, so a run resumed from a checkpoint replays
//! the exact same draws as an uninterrupted run.

use std::fmt::Write as _;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::WEIGHT_DECAY;
use crate::loss::{
    drawing_mask, loss_indices_patch_layout, restrict_to_policy, LossError, PixelSetPolicy,
};
use crate::mae::{
    init_params, patchify, register_params, sample_mask, MAEConfig, MAEParams, MaeError,
};
use crate::rng::derive_seed;
use crate::sketch::RasterImage;
use crate::tensor::{AdamWConfig, AdamWState, Tape, TensorError};

/// Seed-stream tag for the per-epoch shuffle order.
const TAG_EPOCH: u64 = 0xe0;
/// Seed-stream tag for per-sample augmentation coin flips.
const TAG_AUG: u64 = 0x41;
/// Seed-stream tag for per-sample training-time patch masks.
const TAG_TRAIN_MASK: u64 = 0x7a;
/// Seed-stream tag for model weight initialization.
const TAG_WEIGHTS: u64 = 0x17e;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (max |param| = {max_param_abs:.6e}); lower the learning rate"
    )]
    NonFiniteLoss { epoch: usize, batch: usize, max_param_abs: f64 },
    #[error("checkpoint fingerprint {found} does not match run config {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint was trained past the requested budget: {completed} epochs >= {requested}")]
    NothingToResume { completed: u64, requested: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mae(#[from] MaeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
}

/// Runtime training settings. `p_mask`, `white_threshold`, and
/// `pixel_set` are merged in from the model/scoring config sections.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay_enabled: bool,
    pub augmentation_enabled: bool,
    pub p_mask: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub white_threshold: f64,
    pub pixel_set: PixelSetPolicy,
}

impl TrainConfig {
    pub fn weight_decay(&self) -> f64 {
        if self.weight_decay_enabled { WEIGHT_DECAY } else { 0.0 }
    }
}

/// Mean training loss per completed epoch, 1-based epoch numbering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub entries: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn push(&mut self, epoch: u64, mean_loss: f64) {
        self.entries.push((epoch, mean_loss));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for &(epoch, loss) in &self.entries {
            let _ = writeln!(out, "{epoch},{loss}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<LossCurve, TrainError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let (epoch, loss) = line.split_once(',').ok_or_else(|| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("loss curve line {}: missing comma", i + 1),
                )
            })?;
            let parse_err = |what: &str| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("loss curve line {}: bad {what}", i + 1),
                )
            };
            entries.push((
                epoch.parse::<u64>().map_err(|_| parse_err("epoch"))?,
                loss.parse::<f64>().map_err(|_| parse_err("loss"))?,
            ));
        }
        Ok(LossCurve { entries })
    }
}

/// Result of a training run: weights, optimizer state, and the loss
/// curve for the epochs this call executed.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: MAEParams,
    pub optimizer: AdamWState,
    pub curve: LossCurve,
    /// Total epochs completed, including any resumed prefix.
    pub epochs_completed: u64,
}

/// Applies the seeded flip augmentation: an independent fair coin each
/// for horizontal and vertical flip. Pixel values are only permuted.
pub fn augment(img: &RasterImage, seed: u64) -> RasterImage {
    let mut rng = crate::rng::stream_rng(seed, &[TAG_AUG]);
    let flip_h: bool = rand::Rng::random(&mut rng);
    let flip_v: bool = rand::Rng::random(&mut rng);
    apply_flips(img, flip_h, flip_v)
}

fn apply_flips(img: &RasterImage, flip_h: bool, flip_v: bool) -> RasterImage {
    let (w, h) = (img.width, img.height);
    let mut pixels = vec![0.0; w * h];
    for y in 0..h {
        let sy = if flip_v { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flip_h { w - 1 - x } else { x };
            pixels[y * w + x] = img.pixels[sy * w + sx];
        }
    }
    RasterImage { width: w, height: h, pixels }
}

/// Trains (or resumes) the MAE on `images` for `config.epochs` TOTAL
/// epochs. `on_checkpoint` fires every `checkpoint_every` epochs and
/// after the final epoch, with the number of epochs completed so far.
pub fn train(
    images: &[RasterImage],
    model: &MAEConfig,
    config: &TrainConfig,
    fingerprint: &str,
    resume: Option<Checkpoint>,
    mut on_checkpoint: impl FnMut(u64, &MAEParams, &AdamWState) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    model.validate()?;

    let (mut params, mut optimizer, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.fingerprint != fingerprint {
                return Err(TrainError::FingerprintMismatch {
                    expected: fingerprint.to_string(),
                    found: ckpt.fingerprint,
                });
            }
            if ckpt.epoch > config.epochs as u64 {
                return Err(TrainError::NothingToResume {
                    completed: ckpt.epoch,
                    requested: config.epochs,
                });
            }
            (ckpt.params, ckpt.optimizer, ckpt.epoch)
        }
        None => {
            let params = init_params(model, derive_seed(config.seed, &[TAG_WEIGHTS]))?;
            let adam = AdamWConfig::new(config.learning_rate, config.weight_decay());
            let optimizer = AdamWState::new(adam, &params.trainable_sizes());
            (params, optimizer, 0)
        }
    };

    // Zero buffers stand in for parameters absent from a batch's graph
    // (the mask token when no patch happens to be masked).
    let zero_grads: Vec<Vec<f64>> = params.trainable_sizes().iter().map(|&n| vec![0.0; n]).collect();

    let mut curve = LossCurve::default();
    let total_epochs = config.epochs as u64;
    let mut epoch = start_epoch;
    if epoch == total_epochs {
        // Resume from a finished run: nothing to do, weights unchanged.
        on_checkpoint(epoch, &params, &optimizer)?;
        return Ok(TrainOutcome { params, optimizer, curve, epochs_completed: epoch });
    }

    while epoch < total_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng = crate::rng::stream_rng(config.seed, &[TAG_EPOCH, epoch]);
        crate::rng::shuffle(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let mut batch_loss = None;
            for &sample_idx in batch {
                let img = if config.augmentation_enabled {
                    augment(
                        &images[sample_idx],
                        derive_seed(config.seed, &[TAG_AUG, epoch, sample_idx as u64]),
                    )
                } else {
                    images[sample_idx].clone()
                };
                let mask = sample_mask(
                    model.num_patches(),
                    config.p_mask,
                    derive_seed(config.seed, &[TAG_TRAIN_MASK, epoch, sample_idx as u64]),
                );
                // The drawing mask tracks the augmented image: flips move
                // ink, and the loss must normalize over the pixels the
                // model is actually asked to reconstruct.
                let dmask = drawing_mask(&img, config.white_threshold);
                let scoped =
                    restrict_to_policy(&dmask, config.pixel_set, &mask, model.patch_size);
                if scoped.n_drawing == 0 {
                    return Err(TrainError::Loss(LossError::NoDrawingPixels));
                }
                let indices = loss_indices_patch_layout(&scoped, model.patch_size);
                let target = patchify(&img, model.patch_size)?;
                let pred = crate::mae::reconstruct_on_tape(&mut tape, &ids, model, &target, &mask)?;
                let sample_loss = tape.masked_sq_err_mean(pred, &target, &indices)?;
                loss_sum += tape.data(sample_loss)[0];
                batch_loss = Some(match batch_loss {
                    None => sample_loss,
                    Some(acc) => tape.add(acc, sample_loss)?,
                });
            }
            let total = tape.scale(batch_loss.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let loss_value = tape.data(total)[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch as usize + 1,
                    batch: batch_idx,
                    max_param_abs: params.max_abs_weight(),
                });
            }
            let grads = tape.backward(total)?;
            let ordered_ids = ids.trainable();
            let grad_refs: Vec<&[f64]> = ordered_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| grads.get(id).unwrap_or(&zero_grads[i]))
                .collect();
            let mut slots = params.trainable_mut();
            optimizer.step(&mut slots, &grad_refs)?;
        }

        epoch += 1;
        let mean_loss = loss_sum / images.len() as f64;
        curve.push(epoch, mean_loss);
        if epoch % config.checkpoint_every as u64 == 0 || epoch == total_epochs {
            on_checkpoint(epoch, &params, &optimizer)?;
        }
    }

    Ok(TrainOutcome { params, optimizer, curve, epochs_completed: epoch })
}
