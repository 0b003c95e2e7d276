//! Parameter container, initialization, and tape registration.

use crate::rng::{sample_trunc_normal, stream_rng};
use crate::tensor::{Tape, Tensor, TensorId};

use super::{sinusoidal_positions, MAEConfig, MaeError};

/// Seed-stream tag for parameter initialization.
const TAG_INIT: u64 = 0x17;

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_mlp_in: Tensor,
    pub b_mlp_in: Tensor,
    pub w_mlp_out: Tensor,
    pub b_mlp_out: Tensor,
}

/// All model weights plus the fixed positional tables.
///
/// The positional tables are derived from the config and are not
/// trainable; they are rebuilt on load rather than checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct MAEParams {
    pub config: MAEConfig,
    pub patch_embed_w: Tensor,
    pub patch_embed_b: Tensor,
    pub enc_blocks: Vec<Block>,
    pub enc_norm_gain: Tensor,
    pub enc_norm_bias: Tensor,
    pub dec_embed_w: Tensor,
    pub dec_embed_b: Tensor,
    pub mask_token: Tensor,
    pub dec_blocks: Vec<Block>,
    pub dec_norm_gain: Tensor,
    pub dec_norm_bias: Tensor,
    pub dec_pred_w: Tensor,
    pub dec_pred_b: Tensor,
    pub enc_pos: Tensor,
    pub dec_pos: Tensor,
}

fn block_names<'a>(prefix: &str, i: usize, b: &'a Block) -> Vec<(String, &'a Tensor)> {
    vec![
        (format!("{prefix}.{i}.ln1_gain"), &b.ln1_gain),
        (format!("{prefix}.{i}.ln1_bias"), &b.ln1_bias),
        (format!("{prefix}.{i}.wq"), &b.wq),
        (format!("{prefix}.{i}.bq"), &b.bq),
        (format!("{prefix}.{i}.wk"), &b.wk),
        (format!("{prefix}.{i}.bk"), &b.bk),
        (format!("{prefix}.{i}.wv"), &b.wv),
        (format!("{prefix}.{i}.bv"), &b.bv),
        (format!("{prefix}.{i}.wo"), &b.wo),
        (format!("{prefix}.{i}.bo"), &b.bo),
        (format!("{prefix}.{i}.ln2_gain"), &b.ln2_gain),
        (format!("{prefix}.{i}.ln2_bias"), &b.ln2_bias),
        (format!("{prefix}.{i}.w_mlp_in"), &b.w_mlp_in),
        (format!("{prefix}.{i}.b_mlp_in"), &b.b_mlp_in),
        (format!("{prefix}.{i}.w_mlp_out"), &b.w_mlp_out),
        (format!("{prefix}.{i}.b_mlp_out"), &b.b_mlp_out),
    ]
}

impl MAEParams {
    /// Trainable tensors with stable names, in the canonical order shared
    /// by the optimizer state and the checkpoint format.
    pub fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed_w".into(), &self.patch_embed_w),
            ("patch_embed_b".into(), &self.patch_embed_b),
        ];
        for (i, b) in self.enc_blocks.iter().enumerate() {
            out.extend(block_names("enc", i, b));
        }
        out.push(("enc_norm_gain".into(), &self.enc_norm_gain));
        out.push(("enc_norm_bias".into(), &self.enc_norm_bias));
        out.push(("dec_embed_w".into(), &self.dec_embed_w));
        out.push(("dec_embed_b".into(), &self.dec_embed_b));
        out.push(("mask_token".into(), &self.mask_token));
        for (i, b) in self.dec_blocks.iter().enumerate() {
            out.extend(block_names("dec", i, b));
        }
        out.push(("dec_norm_gain".into(), &self.dec_norm_gain));
        out.push(("dec_norm_bias".into(), &self.dec_norm_bias));
        out.push(("dec_pred_w".into(), &self.dec_pred_w));
        out.push(("dec_pred_b".into(), &self.dec_pred_b));
        out
    }

    /// Mutable view in the same canonical order as [`named_trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_embed_w, &mut self.patch_embed_b];
        for b in &mut self.enc_blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_mlp_in,
                &mut b.b_mlp_in,
                &mut b.w_mlp_out,
                &mut b.b_mlp_out,
            ]);
        }
        out.push(&mut self.enc_norm_gain);
        out.push(&mut self.enc_norm_bias);
        out.push(&mut self.dec_embed_w);
        out.push(&mut self.dec_embed_b);
        out.push(&mut self.mask_token);
        for b in &mut self.dec_blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_mlp_in,
                &mut b.b_mlp_in,
                &mut b.w_mlp_out,
                &mut b.b_mlp_out,
            ]);
        }
        out.push(&mut self.dec_norm_gain);
        out.push(&mut self.dec_norm_bias);
        out.push(&mut self.dec_pred_w);
        out.push(&mut self.dec_pred_b);
        out
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.named_trainable().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Largest absolute weight value, for non-finite-loss diagnostics.
    pub fn max_abs_weight(&self) -> f64 {
        self.named_trainable()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.named_trainable().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Truncated-normal (σ = 0.02, cut at 2σ) weights, zero biases, unit
/// layer-norm gains, and precomputed sinusoidal position tables.
/// Deterministic in `seed`.
pub fn init_params(config: &MAEConfig, seed: u64) -> Result<MAEParams, MaeError> {
    config.validate()?;
    let mut rng = stream_rng(seed, &[TAG_INIT]);
    fn weight(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| sample_trunc_normal(rng, 0.02)).collect();
        Tensor { shape: vec![rows, cols], data, requires_grad: true }
    }
    let zeros = |n: usize| Tensor { shape: vec![n], data: vec![0.0; n], requires_grad: true };
    let ones = |n: usize| Tensor { shape: vec![n], data: vec![1.0; n], requires_grad: true };
    fn block(rng: &mut rand_chacha::ChaCha8Rng, dim: usize, hidden: usize) -> Block {
        let zeros = |n: usize| Tensor { shape: vec![n], data: vec![0.0; n], requires_grad: true };
        let ones = |n: usize| Tensor { shape: vec![n], data: vec![1.0; n], requires_grad: true };
        Block {
            ln1_gain: ones(dim),
            ln1_bias: zeros(dim),
            wq: weight(rng, dim, dim),
            bq: zeros(dim),
            wk: weight(rng, dim, dim),
            bk: zeros(dim),
            wv: weight(rng, dim, dim),
            bv: zeros(dim),
            wo: weight(rng, dim, dim),
            bo: zeros(dim),
            ln2_gain: ones(dim),
            ln2_bias: zeros(dim),
            w_mlp_in: weight(rng, dim, hidden),
            b_mlp_in: zeros(hidden),
            w_mlp_out: weight(rng, hidden, dim),
            b_mlp_out: zeros(dim),
        }
    }

    let e = config.embed_dim;
    let de = config.decoder_embed_dim;
    let pd = config.patch_dim();

    let patch_embed_w = weight(&mut rng, pd, e);
    let patch_embed_b = zeros(e);
    let enc_blocks: Vec<Block> =
        (0..config.depth).map(|_| block(&mut rng, e, config.mlp_hidden())).collect();
    let enc_norm_gain = ones(e);
    let enc_norm_bias = zeros(e);
    let dec_embed_w = weight(&mut rng, e, de);
    let dec_embed_b = zeros(de);
    let mask_token = {
        let data = (0..de).map(|_| sample_trunc_normal(&mut rng, 0.02)).collect();
        Tensor { shape: vec![1, de], data, requires_grad: true }
    };
    let dec_blocks: Vec<Block> = (0..config.decoder_depth)
        .map(|_| block(&mut rng, de, config.decoder_mlp_hidden()))
        .collect();
    let dec_norm_gain = ones(de);
    let dec_norm_bias = zeros(de);
    let dec_pred_w = weight(&mut rng, de, pd);
    let dec_pred_b = zeros(pd);

    let n = config.num_patches();
    let enc_pos = Tensor {
        shape: vec![n, e],
        data: sinusoidal_positions(config.grid_w(), config.grid_h(), e),
        requires_grad: false,
    };
    let dec_pos = Tensor {
        shape: vec![n, de],
        data: sinusoidal_positions(config.grid_w(), config.grid_h(), de),
        requires_grad: false,
    };

    Ok(MAEParams {
        config: config.clone(),
        patch_embed_w,
        patch_embed_b,
        enc_blocks,
        enc_norm_gain,
        enc_norm_bias,
        dec_embed_w,
        dec_embed_b,
        mask_token,
        dec_blocks,
        dec_norm_gain,
        dec_norm_bias,
        dec_pred_w,
        dec_pred_b,
        enc_pos,
        dec_pos,
    })
}

/// Tape handles for one registration of the parameters, in the same
/// structure as [`MAEParams`].
pub struct ParamIds {
    pub patch_embed_w: TensorId,
    pub patch_embed_b: TensorId,
    pub enc_blocks: Vec<BlockIds>,
    pub enc_norm_gain: TensorId,
    pub enc_norm_bias: TensorId,
    pub dec_embed_w: TensorId,
    pub dec_embed_b: TensorId,
    pub mask_token: TensorId,
    pub dec_blocks: Vec<BlockIds>,
    pub dec_norm_gain: TensorId,
    pub dec_norm_bias: TensorId,
    pub dec_pred_w: TensorId,
    pub dec_pred_b: TensorId,
    pub enc_pos: TensorId,
    pub dec_pos: TensorId,
}

pub struct BlockIds {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub w_mlp_in: TensorId,
    pub b_mlp_in: TensorId,
    pub w_mlp_out: TensorId,
    pub b_mlp_out: TensorId,
}

impl ParamIds {
    /// Ids of the trainable tensors in canonical order, matching
    /// [`MAEParams::named_trainable`]. Gradient extraction indexes by this.
    pub fn trainable(&self) -> Vec<TensorId> {
        let block = |b: &BlockIds| {
            vec![
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gain, b.ln2_bias, b.w_mlp_in, b.b_mlp_in, b.w_mlp_out, b.b_mlp_out,
            ]
        };
        let mut out = vec![self.patch_embed_w, self.patch_embed_b];
        for b in &self.enc_blocks {
            out.extend(block(b));
        }
        out.push(self.enc_norm_gain);
        out.push(self.enc_norm_bias);
        out.push(self.dec_embed_w);
        out.push(self.dec_embed_b);
        out.push(self.mask_token);
        for b in &self.dec_blocks {
            out.extend(block(b));
        }
        out.push(self.dec_norm_gain);
        out.push(self.dec_norm_bias);
        out.push(self.dec_pred_w);
        out.push(self.dec_pred_b);
        out
    }
}

/// Copies every parameter onto the tape as leaves. Position tables go on
/// as non-gradient leaves.
pub fn register_params(tape: &mut Tape, p: &MAEParams) -> ParamIds {
    let block = |tape: &mut Tape, b: &Block| BlockIds {
        ln1_gain: tape.leaf(b.ln1_gain.clone()),
        ln1_bias: tape.leaf(b.ln1_bias.clone()),
        wq: tape.leaf(b.wq.clone()),
        bq: tape.leaf(b.bq.clone()),
        wk: tape.leaf(b.wk.clone()),
        bk: tape.leaf(b.bk.clone()),
        wv: tape.leaf(b.wv.clone()),
        bv: tape.leaf(b.bv.clone()),
        wo: tape.leaf(b.wo.clone()),
        bo: tape.leaf(b.bo.clone()),
        ln2_gain: tape.leaf(b.ln2_gain.clone()),
        ln2_bias: tape.leaf(b.ln2_bias.clone()),
        w_mlp_in: tape.leaf(b.w_mlp_in.clone()),
        b_mlp_in: tape.leaf(b.b_mlp_in.clone()),
        w_mlp_out: tape.leaf(b.w_mlp_out.clone()),
        b_mlp_out: tape.leaf(b.b_mlp_out.clone()),
    };
    let patch_embed_w = tape.leaf(p.patch_embed_w.clone());
    let patch_embed_b = tape.leaf(p.patch_embed_b.clone());
    let enc_blocks: Vec<BlockIds> = p.enc_blocks.iter().map(|b| block(tape, b)).collect();
    let enc_norm_gain = tape.leaf(p.enc_norm_gain.clone());
    let enc_norm_bias = tape.leaf(p.enc_norm_bias.clone());
    let dec_embed_w = tape.leaf(p.dec_embed_w.clone());
    let dec_embed_b = tape.leaf(p.dec_embed_b.clone());
    let mask_token = tape.leaf(p.mask_token.clone());
    let dec_blocks: Vec<BlockIds> = p.dec_blocks.iter().map(|b| block(tape, b)).collect();
    let dec_norm_gain = tape.leaf(p.dec_norm_gain.clone());
    let dec_norm_bias = tape.leaf(p.dec_norm_bias.clone());
    let dec_pred_w = tape.leaf(p.dec_pred_w.clone());
    let dec_pred_b = tape.leaf(p.dec_pred_b.clone());
    let enc_pos = tape.leaf(p.enc_pos.clone());
    let dec_pos = tape.leaf(p.dec_pos.clone());
    ParamIds {
        patch_embed_w,
        patch_embed_b,
        enc_blocks,
        enc_norm_gain,
        enc_norm_bias,
        dec_embed_w,
        dec_embed_b,
        mask_token,
        dec_blocks,
        dec_norm_gain,
        dec_norm_bias,
        dec_pred_w,
        dec_pred_b,
        enc_pos,
        dec_pos,
    }
}
