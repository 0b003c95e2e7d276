//! Drawing-pixel reconstruction loss, stochastic per-sample scoring, and
//! threshold calibration.
//!
//! The loss averages squared error over the *drawing* pixels of the
//! original image only: pixels at or above `white_threshold` never
//! contribute, so reconstruction quality on blank paper is free. The
//! detection threshold is the plain arithmetic mean of the training
//! scores.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mae::{pixel_to_patch_index, reconstruct, sample_mask, MAEParams, MaeError, PatchMask};
use crate::rng::derive_seed;
use crate::sketch::RasterImage;

/// A pixel counts as fully white at or above this value. 254/255 of an
/// 8-bit PNG is ~0.996, so anti-aliased stroke edges stay in the loss.
pub const WHITE_THRESHOLD: f64 = 0.999;

/// Default number of mask draws averaged per sample score.
pub const DEFAULT_SCORE_REPEATS: usize = 8;

/// Seed-stream tag for per-repeat scoring masks.
const TAG_SCORE: u64 = 0x9c;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    /// The drawing mask is empty; the per-pixel mean is undefined.
    #[error("no drawing pixels: every pixel in scope is fully white")]
    NoDrawingPixels,
    #[error("image shapes differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    ShapeMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("cannot calibrate a threshold from zero scores")]
    EmptyScores,
    #[error("scoring repeats must be >= 1")]
    ZeroRepeats,
    #[error(transparent)]
    Mae(#[from] MaeError),
    #[error("threshold io: {0}")]
    Io(#[from] std::io::Error),
    #[error("threshold encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Boolean stencil over an image: true where the ORIGINAL pixel is
/// non-fully-white. Always derived from the target image, never from a
/// reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawingMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
    pub n_drawing: usize,
}

/// Marks every pixel of `x` strictly below `white_threshold`.
pub fn drawing_mask(x: &RasterImage, white_threshold: f64) -> DrawingMask {
    let pixels: Vec<bool> = x.pixels.iter().map(|&v| v < white_threshold).collect();
    let n_drawing = pixels.iter().filter(|&&b| b).count();
    DrawingMask { width: x.width, height: x.height, pixels, n_drawing }
}

/// Mean squared error over the pixels marked in `dmask`.
///
/// Pixels outside the mask are never read, so the result is bit-identical
/// under any change to `xhat` at excluded positions. Errors instead of
/// returning 0 when the mask is empty: the mean is undefined there.
pub fn masked_mse(
    x: &RasterImage,
    xhat: &RasterImage,
    dmask: &DrawingMask,
) -> Result<f64, LossError> {
    if x.width != xhat.width || x.height != xhat.height {
        return Err(LossError::ShapeMismatch {
            a_w: x.width,
            a_h: x.height,
            b_w: xhat.width,
            b_h: xhat.height,
        });
    }
    if dmask.n_drawing == 0 {
        return Err(LossError::NoDrawingPixels);
    }
    debug_assert_eq!(dmask.pixels.len(), x.pixels.len());
    let mut sum = 0.0;
    for (i, &keep) in dmask.pixels.iter().enumerate() {
        if keep {
            let d = x.pixels[i] - xhat.pixels[i];
            sum += d * d;
        }
    }
    Ok(sum / dmask.n_drawing as f64)
}

/// Which pixels enter the loss, relative to the patch mask in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PixelSetPolicy {
    /// Every drawing pixel, regardless of patch membership.
    #[default]
    AllDrawing,
    /// Drawing pixels inside masked (hidden) patches only.
    DrawingMaskedPatches,
    /// Drawing pixels inside visible patches only.
    DrawingVisiblePatches,
}

impl PixelSetPolicy {
    pub fn name(self) -> &'static str {
        match self {
            PixelSetPolicy::AllDrawing => "all-drawing",
            PixelSetPolicy::DrawingMaskedPatches => "drawing-masked-patches",
            PixelSetPolicy::DrawingVisiblePatches => "drawing-visible-patches",
        }
    }
}

/// Restricts a drawing mask to the patches selected by `policy`. The
/// all-drawing policy returns the mask unchanged.
pub fn restrict_to_policy(
    dmask: &DrawingMask,
    policy: PixelSetPolicy,
    mask: &PatchMask,
    patch_size: usize,
) -> DrawingMask {
    if policy == PixelSetPolicy::AllDrawing {
        return dmask.clone();
    }
    let keep_masked = policy == PixelSetPolicy::DrawingMaskedPatches;
    let grid_w = dmask.width / patch_size;
    let mut pixels = vec![false; dmask.pixels.len()];
    let mut n_drawing = 0;
    for y in 0..dmask.height {
        for x in 0..dmask.width {
            let i = y * dmask.width + x;
            if !dmask.pixels[i] {
                continue;
            }
            let patch = (y / patch_size) * grid_w + x / patch_size;
            if mask.masked[patch] == keep_masked {
                pixels[i] = true;
                n_drawing += 1;
            }
        }
    }
    DrawingMask { width: dmask.width, height: dmask.height, pixels, n_drawing }
}

/// Flat indices of the marked pixels in `[num_patches, patch_size²]`
/// layout, for computing the same loss on a patch-layout prediction
/// tensor. Ascending image-pixel order.
pub fn loss_indices_patch_layout(dmask: &DrawingMask, patch_size: usize) -> Vec<usize> {
    let mut indices = Vec::with_capacity(dmask.n_drawing);
    for y in 0..dmask.height {
        for x in 0..dmask.width {
            if dmask.pixels[y * dmask.width + x] {
                indices.push(pixel_to_patch_index(x, y, dmask.width, patch_size));
            }
        }
    }
    indices
}

/// Knobs for [`score_sample`]; one place so calibration and detection
/// cannot drift apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub p_mask: f64,
    /// Number of independent mask draws averaged per sample.
    pub repeats: usize,
    pub white_threshold: f64,
    pub pixel_set: PixelSetPolicy,
}

impl ScoreOptions {
    pub fn new(p_mask: f64) -> Self {
        ScoreOptions {
            p_mask,
            repeats: DEFAULT_SCORE_REPEATS,
            white_threshold: WHITE_THRESHOLD,
            pixel_set: PixelSetPolicy::AllDrawing,
        }
    }
}

/// One sample's stochastic loss score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScore {
    pub sample_id: usize,
    /// One loss per independent mask draw.
    pub repeats: Vec<f64>,
    /// Mean of the repeats.
    pub aggregate: f64,
}

/// Scores one image: draws `repeats` independent patch masks from a
/// stream derived off `seed`, reconstructs under each, and averages the
/// drawing-pixel loss. Deterministic in (params, x, opts, seed).
pub fn score_sample(
    params: &MAEParams,
    x: &RasterImage,
    opts: &ScoreOptions,
    sample_id: usize,
    seed: u64,
) -> Result<LossScore, LossError> {
    if opts.repeats == 0 {
        return Err(LossError::ZeroRepeats);
    }
    let config = &params.config;
    let dmask = drawing_mask(x, opts.white_threshold);
    if dmask.n_drawing == 0 {
        return Err(LossError::NoDrawingPixels);
    }
    let mut repeats = Vec::with_capacity(opts.repeats);
    for r in 0..opts.repeats {
        let mask_seed = derive_seed(seed, &[TAG_SCORE, r as u64]);
        let mask = sample_mask(config.num_patches(), opts.p_mask, mask_seed);
        let xhat = reconstruct(params, x, &mask)?;
        let scoped = restrict_to_policy(&dmask, opts.pixel_set, &mask, config.patch_size);
        repeats.push(masked_mse(x, &xhat, &scoped)?);
    }
    let aggregate = repeats.iter().sum::<f64>() / repeats.len() as f64;
    Ok(LossScore { sample_id, repeats, aggregate })
}

/// Calibrated detection threshold with the context needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub tau: f64,
    pub n_samples: usize,
    pub config_fingerprint: String,
    pub white_threshold: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Threshold {
    pub fn save(&self, path: &Path) -> Result<(), LossError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Threshold, LossError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Threshold rule: tau is the exact arithmetic mean of the training
/// aggregates. No trimming, no robust estimators.
pub fn calibrate_tau(
    train_scores: &[f64],
    config_fingerprint: &str,
    white_threshold: f64,
    k: usize,
) -> Result<Threshold, LossError> {
    if train_scores.is_empty() {
        return Err(LossError::EmptyScores);
    }
    let tau = train_scores.iter().sum::<f64>() / train_scores.len() as f64;
    Ok(Threshold {
        tau,
        n_samples: train_scores.len(),
        config_fingerprint: config_fingerprint.to_string(),
        white_threshold,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::{init_params, patchify, MAEConfig};
    use crate::tensor::Tape;
    use rand::Rng;

    fn img_from(width: usize, height: usize, pixels: &[f64]) -> RasterImage {
        assert_eq!(pixels.len(), width * height);
        RasterImage { width, height, pixels: pixels.to_vec() }
    }

    fn random_img(width: usize, height: usize, rng: &mut impl Rng) -> RasterImage {
        let pixels = (0..width * height).map(|_| rng.random::<f64>()).collect();
        RasterImage { width, height, pixels }
    }

    fn tiny_config() -> MAEConfig {
        MAEConfig {
            image_width: 16,
            image_height: 16,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            decoder_embed_dim: 8,
            decoder_depth: 1,
            p_mask: 0.5,
        }
    }

    #[test]
    fn drawing_mask_counts_non_white_pixels() {
        let all_white = RasterImage::white(4, 4);
        assert_eq!(drawing_mask(&all_white, WHITE_THRESHOLD).n_drawing, 0);

        let mut one_dark = RasterImage::white(4, 4);
        one_dark.pixels[5] = 0.0;
        let dm = drawing_mask(&one_dark, WHITE_THRESHOLD);
        assert_eq!(dm.n_drawing, 1);
        assert!(dm.pixels[5]);

        // Anti-aliased edge value just under the cut still counts.
        let mut edge = RasterImage::white(4, 4);
        edge.pixels[0] = 0.998;
        assert_eq!(drawing_mask(&edge, WHITE_THRESHOLD).n_drawing, 1);
        assert_eq!(drawing_mask(&edge, 0.99).n_drawing, 0);
    }

    #[test]
    fn masked_mse_matches_hand_example() {
        // X = [0.0, 1.0], Xhat = [0.5, 0.3]: only the first pixel is a
        // drawing pixel, so the loss is 0.5² = 0.25 and the white
        // pixel's 0.49 error is invisible.
        let x = img_from(2, 1, &[0.0, 1.0]);
        let xhat = img_from(2, 1, &[0.5, 0.3]);
        let dm = drawing_mask(&x, WHITE_THRESHOLD);
        assert_eq!(dm.n_drawing, 1);
        let loss = masked_mse(&x, &xhat, &dm).unwrap();
        assert!((loss - 0.25).abs() < 1e-15, "loss {loss}");
    }

    #[test]
    fn masked_mse_identity_is_zero() {
        let mut rng = crate::rng::stream_rng(7, &[1]);
        let x = random_img(8, 8, &mut rng);
        let dm = drawing_mask(&x, WHITE_THRESHOLD);
        assert_eq!(masked_mse(&x, &x, &dm).unwrap(), 0.0);
    }

    #[test]
    fn masked_mse_matches_brute_force_on_random_pairs() {
        // Independent oracle: per-pixel double loop in column-major
        // order with its own comparison against the threshold.
        fn brute(x: &RasterImage, xhat: &RasterImage, wt: f64) -> Option<f64> {
            let mut sum = 0.0;
            let mut n = 0u64;
            for col in 0..x.width {
                for row in 0..x.height {
                    let v = x.get(col, row);
                    if v < wt {
                        let d = v - xhat.get(col, row);
                        sum += d * d;
                        n += 1;
                    }
                }
            }
            if n == 0 { None } else { Some(sum / n as f64) }
        }

        let mut rng = crate::rng::stream_rng(11, &[2]);
        for case in 0..100 {
            let w = 3 + (case % 9);
            let h = 2 + (case % 7);
            let mut x = random_img(w, h, &mut rng);
            // Plant some exactly-white pixels so the mask is non-trivial.
            for i in (0..x.pixels.len()).step_by(3) {
                x.pixels[i] = 1.0;
            }
            let xhat = random_img(w, h, &mut rng);
            let dm = drawing_mask(&x, WHITE_THRESHOLD);
            match brute(&x, &xhat, WHITE_THRESHOLD) {
                Some(want) => {
                    let got = masked_mse(&x, &xhat, &dm).unwrap();
                    assert!((got - want).abs() < 1e-10, "case {case}: {got} vs {want}");
                }
                None => {
                    assert!(matches!(
                        masked_mse(&x, &xhat, &dm),
                        Err(LossError::NoDrawingPixels)
                    ));
                }
            }
        }
    }

    #[test]
    fn masked_mse_ignores_changes_at_white_pixels() {
        let mut rng = crate::rng::stream_rng(13, &[3]);
        let mut x = random_img(10, 6, &mut rng);
        for i in (0..x.pixels.len()).step_by(2) {
            x.pixels[i] = 1.0;
        }
        let xhat = random_img(10, 6, &mut rng);
        let dm = drawing_mask(&x, WHITE_THRESHOLD);
        let base = masked_mse(&x, &xhat, &dm).unwrap();

        let mut tampered = xhat.clone();
        for (i, &keep) in dm.pixels.iter().enumerate() {
            if !keep {
                tampered.pixels[i] = rng.random::<f64>() * 100.0 - 50.0;
            }
        }
        let after = masked_mse(&x, &tampered, &dm).unwrap();
        assert_eq!(base.to_bits(), after.to_bits());
    }

    #[test]
    fn masked_mse_bounded_by_one_on_unit_images() {
        let mut rng = crate::rng::stream_rng(17, &[4]);
        for _ in 0..20 {
            let x = random_img(9, 9, &mut rng);
            let xhat = random_img(9, 9, &mut rng);
            let dm = drawing_mask(&x, WHITE_THRESHOLD);
            assert!(masked_mse(&x, &xhat, &dm).unwrap() <= 1.0);
        }
    }

    #[test]
    fn masked_mse_rejects_empty_mask_and_shape_mismatch() {
        let white = RasterImage::white(4, 4);
        let dm = drawing_mask(&white, WHITE_THRESHOLD);
        assert!(matches!(masked_mse(&white, &white, &dm), Err(LossError::NoDrawingPixels)));

        let mut x = RasterImage::white(4, 4);
        x.pixels[0] = 0.0;
        let dm = drawing_mask(&x, WHITE_THRESHOLD);
        let other = RasterImage::white(4, 5);
        assert!(matches!(masked_mse(&x, &other, &dm), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn policy_restriction_partitions_the_drawing_mask() {
        let mut rng = crate::rng::stream_rng(19, &[5]);
        let mut x = random_img(16, 16, &mut rng);
        for i in (0..x.pixels.len()).step_by(4) {
            x.pixels[i] = 1.0;
        }
        let dm = drawing_mask(&x, WHITE_THRESHOLD);
        let mask = sample_mask(16, 0.5, 99);
        let on_masked = restrict_to_policy(&dm, PixelSetPolicy::DrawingMaskedPatches, &mask, 4);
        let on_visible = restrict_to_policy(&dm, PixelSetPolicy::DrawingVisiblePatches, &mask, 4);
        let all = restrict_to_policy(&dm, PixelSetPolicy::AllDrawing, &mask, 4);
        assert_eq!(all, dm);
        assert_eq!(on_masked.n_drawing + on_visible.n_drawing, dm.n_drawing);
        for i in 0..dm.pixels.len() {
            assert_eq!(dm.pixels[i], on_masked.pixels[i] | on_visible.pixels[i]);
            assert!(!(on_masked.pixels[i] && on_visible.pixels[i]));
        }
    }

    #[test]
    fn patch_layout_indices_reproduce_the_image_space_loss() {
        // The tape-side loss sees predictions in [num_patches, p²]
        // layout; the index mapping must make it agree exactly with the
        // image-space formula.
        let mut rng = crate::rng::stream_rng(23, &[6]);
        let mut x = random_img(16, 16, &mut rng);
        for i in (0..x.pixels.len()).step_by(5) {
            x.pixels[i] = 1.0;
        }
        let xhat = random_img(16, 16, &mut rng);
        let dm = drawing_mask(&x, WHITE_THRESHOLD);
        let want = masked_mse(&x, &xhat, &dm).unwrap();

        let target = patchify(&x, 4).unwrap();
        let pred = patchify(&xhat, 4).unwrap();
        let indices = loss_indices_patch_layout(&dm, 4);
        assert_eq!(indices.len(), dm.n_drawing);
        let mut tape = Tape::new();
        let pred_id =
            tape.leaf(crate::tensor::Tensor::new(pred, vec![16, 16], false).unwrap());
        let loss_id = tape.masked_sq_err_mean(pred_id, &target, &indices).unwrap();
        let got = tape.data(loss_id)[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn calibrate_tau_is_the_exact_mean() {
        let t = calibrate_tau(&[0.2, 0.4], "fp", WHITE_THRESHOLD, 8).unwrap();
        assert_eq!(t.tau, (0.2 + 0.4) / 2.0);
        assert!((t.tau - 0.3).abs() < 1e-12);
        assert_eq!(t.n_samples, 2);

        let single = calibrate_tau(&[0.7125], "fp", WHITE_THRESHOLD, 1).unwrap();
        assert_eq!(single.tau, 0.7125);

        // Independent summation oracle.
        let scores = [0.1, 0.2, 0.3, 0.4];
        let mut acc = 0.0;
        for &s in scores.iter().rev() {
            acc += s;
        }
        let oracle = acc / 4.0;
        let t = calibrate_tau(&scores, "fp", WHITE_THRESHOLD, 8).unwrap();
        assert!((t.tau - 0.25).abs() < 1e-12);
        assert!((t.tau - oracle).abs() < 1e-12);
    }

    #[test]
    fn calibrate_tau_sits_between_min_and_max() {
        let mut rng = crate::rng::stream_rng(29, &[7]);
        for _ in 0..50 {
            let n = 1 + rng.random_range(0..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t = calibrate_tau(&scores, "fp", WHITE_THRESHOLD, 8).unwrap();
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(min <= t.tau && t.tau <= max);
        }
    }

    #[test]
    fn calibrate_tau_rejects_empty_input() {
        assert!(matches!(
            calibrate_tau(&[], "fp", WHITE_THRESHOLD, 8),
            Err(LossError::EmptyScores)
        ));
    }

    #[test]
    fn threshold_json_round_trips_with_uppercase_k() {
        let t = Threshold {
            tau: 0.0123,
            n_samples: 64,
            config_fingerprint: "abc123".into(),
            white_threshold: WHITE_THRESHOLD,
            k: 8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("threshold.json");
        t.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"K\": 8"), "{text}");
        assert!(text.contains("\"tau\""));
        assert_eq!(Threshold::load(&path).unwrap(), t);
    }

    #[test]
    fn score_sample_is_deterministic_and_aggregates_by_mean() {
        let config = tiny_config();
        let params = init_params(&config, 41).unwrap();
        let mut rng = crate::rng::stream_rng(31, &[8]);
        let mut x = random_img(16, 16, &mut rng);
        for i in (0..x.pixels.len()).step_by(2) {
            x.pixels[i] = 1.0;
        }
        let opts = ScoreOptions { repeats: 3, ..ScoreOptions::new(0.5) };
        let a = score_sample(&params, &x, &opts, 5, 1234).unwrap();
        let b = score_sample(&params, &x, &opts, 5, 1234).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample_id, 5);
        assert_eq!(a.repeats.len(), 3);
        let mean = a.repeats.iter().sum::<f64>() / 3.0;
        assert_eq!(a.aggregate.to_bits(), mean.to_bits());
        assert!(a.aggregate.is_finite() && a.aggregate >= 0.0);

        let c = score_sample(&params, &x, &opts, 5, 1235).unwrap();
        assert_ne!(a.repeats, c.repeats, "different seed should vary the masks");
    }

    #[test]
    fn score_sample_with_one_repeat_equals_that_repeat() {
        let config = tiny_config();
        let params = init_params(&config, 43).unwrap();
        let mut rng = crate::rng::stream_rng(37, &[9]);
        let x = random_img(16, 16, &mut rng);
        let opts = ScoreOptions { repeats: 1, ..ScoreOptions::new(0.75) };
        let s = score_sample(&params, &x, &opts, 0, 77).unwrap();
        assert_eq!(s.repeats.len(), 1);
        assert_eq!(s.aggregate.to_bits(), s.repeats[0].to_bits());
    }

    #[test]
    fn score_sample_propagates_empty_drawing_and_zero_repeats() {
        let config = tiny_config();
        let params = init_params(&config, 47).unwrap();
        let white = RasterImage::white(16, 16);
        let opts = ScoreOptions::new(0.5);
        assert!(matches!(
            score_sample(&params, &white, &opts, 0, 1),
            Err(LossError::NoDrawingPixels)
        ));
        let mut x = RasterImage::white(16, 16);
        x.pixels[0] = 0.0;
        let zero = ScoreOptions { repeats: 0, ..opts };
        assert!(matches!(score_sample(&params, &x, &zero, 0, 1), Err(LossError::ZeroRepeats)));
    }

    #[test]
    fn pixel_set_policy_serdes_as_kebab_case() {
        let s = serde_json::to_string(&PixelSetPolicy::DrawingMaskedPatches).unwrap();
        assert_eq!(s, "\"drawing-masked-patches\"");
        let p: PixelSetPolicy = serde_json::from_str("\"all-drawing\"").unwrap();
        assert_eq!(p, PixelSetPolicy::AllDrawing);
        let v: PixelSetPolicy = serde_json::from_str("\"drawing-visible-patches\"").unwrap();
        assert_eq!(v, PixelSetPolicy::DrawingVisiblePatches);
    }
}
