//! The MAE forward pass expressed as tape operations.

use crate::sketch::RasterImage;
use crate::tensor::{Tape, TensorId};

use super::params::{BlockIds, MAEParams, ParamIds};
use super::{patchify, register_params, unpatchify, MAEConfig, MaeError, PatchMask};

const LN_EPS: f64 = 1e-6;

/// One pre-norm transformer block: multi-head self-attention and a GELU
/// MLP, each with a residual connection.
fn transformer_block(
    tape: &mut Tape,
    x: TensorId,
    b: &BlockIds,
    num_heads: usize,
) -> Result<TensorId, MaeError> {
    let dim = tape.shape(x)[1];
    let head_dim = dim / num_heads;

    let normed = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let q = tape.matmul(normed, b.wq)?;
    let q = tape.add_bias(q, b.bq)?;
    let k = tape.matmul(normed, b.wk)?;
    let k = tape.add_bias(k, b.bk)?;
    let v = tape.matmul(normed, b.wv)?;
    let v = tape.add_bias(v, b.bv)?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let proj = tape.matmul(merged, b.wo)?;
    let proj = tape.add_bias(proj, b.bo)?;
    let x = tape.add(x, proj)?;

    let normed = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let hidden = tape.matmul(normed, b.w_mlp_in)?;
    let hidden = tape.add_bias(hidden, b.b_mlp_in)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, b.w_mlp_out)?;
    let out = tape.add_bias(out, b.b_mlp_out)?;
    Ok(tape.add(x, out)?)
}

/// Runs the full masked forward pass on an existing tape and returns the
/// predicted patch matrix `[num_patches, patch_size²]` (unclamped).
///
/// `patches` is the patchified input image. Only the visible rows of it
/// ever reach the encoder: the gather happens before patch embedding, so
/// masked-patch pixels cannot influence any encoder activation.
pub fn reconstruct_on_tape(
    tape: &mut Tape,
    ids: &ParamIds,
    config: &MAEConfig,
    patches: &[f64],
    mask: &PatchMask,
) -> Result<TensorId, MaeError> {
    let n = config.num_patches();
    if mask.num_patches() != n {
        return Err(MaeError::MaskMismatch { mask: mask.num_patches(), patches: n });
    }
    if patches.len() != n * config.patch_dim() {
        return Err(MaeError::Config(format!(
            "patch buffer has {} values, expected {}",
            patches.len(),
            n * config.patch_dim()
        )));
    }

    let patches_id = tape.constant(patches.to_vec(), vec![n, config.patch_dim()])?;
    let visible = mask.visible_indices();
    let placement = mask.placement();

    // decoder input: encoded visible tokens where present, mask token
    // elsewhere; with nothing visible the sequence is all mask tokens
    let full = if visible.is_empty() {
        tape.assemble_rows(ids.mask_token, ids.mask_token, &placement)?
    } else {
        let raw = tape.gather_rows(patches_id, &visible)?;
        let tokens = tape.matmul(raw, ids.patch_embed_w)?;
        let tokens = tape.add_bias(tokens, ids.patch_embed_b)?;
        let pos = tape.gather_rows(ids.enc_pos, &visible)?;
        let mut x = tape.add(tokens, pos)?;
        for b in &ids.enc_blocks {
            x = transformer_block(tape, x, b, config.num_heads)?;
        }
        let encoded = tape.layer_norm(x, ids.enc_norm_gain, ids.enc_norm_bias, LN_EPS)?;
        let narrowed = tape.matmul(encoded, ids.dec_embed_w)?;
        let narrowed = tape.add_bias(narrowed, ids.dec_embed_b)?;
        tape.assemble_rows(narrowed, ids.mask_token, &placement)?
    };

    let mut x = tape.add(full, ids.dec_pos)?;
    for b in &ids.dec_blocks {
        x = transformer_block(tape, x, b, config.num_heads)?;
    }
    let normed = tape.layer_norm(x, ids.dec_norm_gain, ids.dec_norm_bias, LN_EPS)?;
    let pred = tape.matmul(normed, ids.dec_pred_w)?;
    Ok(tape.add_bias(pred, ids.dec_pred_b)?)
}

/// Reconstructs `img` under `mask` and returns the predicted image with
/// values clamped to [0, 1], ready for scoring.
pub fn reconstruct(
    params: &MAEParams,
    img: &RasterImage,
    mask: &PatchMask,
) -> Result<RasterImage, MaeError> {
    let config = &params.config;
    if img.width != config.image_width || img.height != config.image_height {
        return Err(MaeError::ImageMismatch {
            got_w: img.width,
            got_h: img.height,
            want_w: config.image_width,
            want_h: config.image_height,
        });
    }
    let patches = patchify(img, config.patch_size)?;
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params);
    let pred = reconstruct_on_tape(&mut tape, &ids, config, &patches, mask)?;
    let mut out = unpatchify(
        tape.data(pred),
        config.image_width,
        config.image_height,
        config.patch_size,
    );
    for v in &mut out.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}
