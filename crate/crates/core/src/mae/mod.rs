//! Masked-autoencoder vision transformer.
//!
//! Patchify → embed visible patches → transformer encoder → project to the
//! decoder width → interleave mask tokens → transformer decoder → per-patch
//! pixel prediction. The encoder never receives masked patches; masking
//! blindness holds by construction because gathering happens on raw patch
//! vectors before any embedding.

mod model;
mod params;

pub use model::{reconstruct, reconstruct_on_tape};
pub use params::{init_params, register_params, Block, MAEParams, ParamIds};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;
use crate::sketch::RasterImage;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MaeError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("patch mask covers {mask} patches but the model has {patches}")]
    MaskMismatch { mask: usize, patches: usize },
    #[error("image is {got_w}x{got_h} but the model expects {want_w}x{want_h}")]
    ImageMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
///
/// `p_mask` lives here so the masking ratio is single-sourced; the trainer
/// and scorer both read it from the model section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MAEConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub decoder_embed_dim: usize,
    pub decoder_depth: usize,
    pub p_mask: f64,
}

impl MAEConfig {
    /// Small configuration that trains in minutes on one core:
    /// 56×56 input, patch 7 (64 patches), embed 64, depth 2, 4 heads,
    /// MLP ratio 4, decoder matching the encoder width and depth. The
    /// full-width decoder is what reconstructs masked patches, so it
    /// carries most of the memorization; a narrower one plateaus well
    /// short of the per-image floor.
    pub fn desk() -> Self {
        MAEConfig {
            image_width: 56,
            image_height: 56,
            patch_size: 7,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            decoder_embed_dim: 64,
            decoder_depth: 2,
            p_mask: 0.75,
        }
    }

    /// Full-scale preset: ViT-Huge encoder (patch 14, embed 1280, depth
    /// 32, 16 heads, MLP ratio 4) with a standard 512×8 decoder on a
    /// 224×224 input grid. Valid to construct; far too slow to train here.
    pub fn paper() -> Self {
        MAEConfig {
            image_width: 224,
            image_height: 224,
            patch_size: 14,
            embed_dim: 1280,
            depth: 32,
            num_heads: 16,
            mlp_ratio: 4.0,
            decoder_embed_dim: 512,
            decoder_depth: 8,
            p_mask: 0.75,
        }
    }

    pub fn validate(&self) -> Result<(), MaeError> {
        let err = |msg: String| Err(MaeError::Config(msg));
        if self.patch_size == 0 || self.image_width == 0 || self.image_height == 0 {
            return err("image and patch dimensions must be positive".into());
        }
        if self.image_width % self.patch_size != 0 || self.image_height % self.patch_size != 0 {
            return err(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_width, self.image_height, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.decoder_embed_dim % self.num_heads != 0 || self.decoder_embed_dim == 0 {
            return err(format!(
                "decoder embed dim {} must be a positive multiple of {} heads (the decoder reuses num_heads)",
                self.decoder_embed_dim, self.num_heads
            ));
        }
        // the 2D sinusoidal table splits each width into sin/cos per axis
        if self.embed_dim % 4 != 0 || self.decoder_embed_dim % 4 != 0 {
            return err(format!(
                "embed dims {} / {} must be multiples of 4 for 2D sinusoidal positions",
                self.embed_dim, self.decoder_embed_dim
            ));
        }
        if self.depth == 0 || self.decoder_depth == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return err(format!("mlp ratio {} must be positive", self.mlp_ratio));
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return err(format!("p_mask {} outside [0, 1]", self.p_mask));
        }
        if self.mlp_hidden() == 0 {
            return err("mlp ratio rounds the hidden width to zero".into());
        }
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn grid_h(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn decoder_mlp_hidden(&self) -> usize {
        (self.decoder_embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Which patches are hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub masked: Vec<bool>,
    pub seed: u64,
}

impl PatchMask {
    pub fn num_patches(&self) -> usize {
        self.masked.len()
    }

    pub fn count_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    /// For each patch slot, the row of the visible-token matrix that fills
    /// it, or `None` where a mask token goes.
    pub fn placement(&self) -> Vec<Option<usize>> {
        let mut rank = 0;
        self.masked
            .iter()
            .map(|&m| {
                if m {
                    None
                } else {
                    rank += 1;
                    Some(rank - 1)
                }
            })
            .collect()
    }
}

/// Seed-stream tag for mask draws.
const TAG_MASK: u64 = 0x3a;

/// Draws a uniform random subset of exactly `round(p_mask × num_patches)`
/// patches (round half away from zero). Deterministic in `seed`.
pub fn sample_mask(num_patches: usize, p_mask: f64, seed: u64) -> PatchMask {
    assert!((0.0..=1.0).contains(&p_mask), "p_mask {p_mask} outside [0, 1]");
    let count = (p_mask * num_patches as f64).round() as usize;
    let mut indices: Vec<usize> = (0..num_patches).collect();
    let mut rng = stream_rng(seed, &[TAG_MASK]);
    crate::rng::shuffle(&mut indices, &mut rng);
    let mut masked = vec![false; num_patches];
    for &i in &indices[..count] {
        masked[i] = true;
    }
    PatchMask { masked, seed }
}

/// Splits an image into flattened `patch_size²` vectors, row-major over
/// the patch grid and row-major within each patch. Output is one flat
/// buffer of shape `[num_patches, patch_size²]`.
pub fn patchify(img: &RasterImage, patch_size: usize) -> Result<Vec<f64>, MaeError> {
    if patch_size == 0 || img.width % patch_size != 0 || img.height % patch_size != 0 {
        return Err(MaeError::Config(format!(
            "image {}x{} is not divisible by patch size {patch_size}",
            img.width, img.height
        )));
    }
    let (gw, gh) = (img.width / patch_size, img.height / patch_size);
    let mut out = Vec::with_capacity(gw * gh * patch_size * patch_size);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let x0 = px * patch_size;
                out.extend_from_slice(&img.pixels[y * img.width + x0..y * img.width + x0 + patch_size]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; bit-exact round trip.
pub fn unpatchify(patches: &[f64], width: usize, height: usize, patch_size: usize) -> RasterImage {
    assert_eq!(patches.len(), width * height);
    let (gw, gh) = (width / patch_size, height / patch_size);
    let pd = patch_size * patch_size;
    let mut pixels = vec![0.0; width * height];
    for py in 0..gh {
        for px in 0..gw {
            let patch = &patches[(py * gw + px) * pd..(py * gw + px + 1) * pd];
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let x0 = px * patch_size;
                pixels[y * width + x0..y * width + x0 + patch_size]
                    .copy_from_slice(&patch[dy * patch_size..(dy + 1) * patch_size]);
            }
        }
    }
    RasterImage { width, height, pixels }
}

/// Flat index of pixel `(x, y)` inside the patchified layout.
pub fn pixel_to_patch_index(x: usize, y: usize, width: usize, patch_size: usize) -> usize {
    let gw = width / patch_size;
    let patch = (y / patch_size) * gw + x / patch_size;
    patch * patch_size * patch_size + (y % patch_size) * patch_size + (x % patch_size)
}

/// Fixed 2D sine/cosine positional table of shape `[grid_h × grid_w, dim]`.
/// The first half of each row encodes the patch row, the second half the
/// patch column, each as interleaved sin/cos banks.
pub fn sinusoidal_positions(grid_w: usize, grid_h: usize, dim: usize) -> Vec<f64> {
    assert_eq!(dim % 4, 0, "positional dim {dim} must be a multiple of 4");
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid_w * grid_h * dim);
    let band = |pos: f64, out: &mut Vec<f64>| {
        for i in 0..quarter {
            let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
            out.push((pos * omega).sin());
        }
        for i in 0..quarter {
            let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
            out.push((pos * omega).cos());
        }
    };
    for y in 0..grid_h {
        for x in 0..grid_w {
            band(y as f64, &mut out);
            band(x as f64, &mut out);
        }
    }
    out
}
