//! Threshold detection over the four dataset splits and Table-style
//! reporting.
//!
//! Calibration and evaluation share one scoring protocol: the same
//! seed derivation, mask draws, and repeat count. A training image
//! therefore evaluates to exactly the score that went into the mean,
//! making the at-or-below-tau comparison reproducible rather than a
//! re-roll of the masking dice.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::loss::{score_sample, LossError, LossScore, ScoreOptions, Threshold};
use crate::mae::MAEParams;
use crate::rng::derive_seed;
use crate::sketch::RasterImage;

/// Seed-stream tag for per-sample scoring seeds.
const TAG_EVAL: u64 = 0xea;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("threshold fingerprint {found} does not match run config {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("split {0} is empty; nothing to evaluate")]
    EmptySplit(String),
    #[error("no splits requested")]
    NoSplits,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// The four dataset roles. The numeric tag keys each split's scoring
/// seeds, so adding a split never perturbs another's draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Mod1,
    Mod2,
    Novel,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Mod1, Split::Mod2, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Mod1 => "mod1",
            Split::Mod2 => "mod2",
            Split::Novel => "novel",
        }
    }

    pub fn from_name(name: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| s.name() == name)
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Mod1 => 1,
            Split::Mod2 => 2,
            Split::Novel => 3,
        }
    }
}

/// Inclusive threshold rule: parroted iff `loss <= tau`.
///
/// Both inputs must be finite and non-negative; anything else is a
/// caller bug, not a data condition, and panics.
pub fn detect(loss: f64, tau: f64) -> bool {
    assert!(loss.is_finite() && loss >= 0.0, "loss {loss} must be finite and non-negative");
    assert!(tau.is_finite() && tau >= 0.0, "tau {tau} must be finite and non-negative");
    loss <= tau
}

/// One sample's detection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: usize,
    pub aggregate: f64,
    pub tau: f64,
    pub parroted: bool,
}

/// Scores and verdicts for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub n: usize,
    /// Percent of samples flagged as parroted.
    pub detection_rate: f64,
    pub verdicts: Vec<Verdict>,
}

/// One Table-style result row plus its per-sample evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub weight_decay_enabled: bool,
    pub augmentation_enabled: bool,
    pub p_mask: f64,
    pub epochs: usize,
    pub tau: f64,
    pub config_fingerprint: String,
    pub splits: Vec<SplitReport>,
    /// Percent of novel samples NOT flagged; present when the novel
    /// split was evaluated. Always exactly `100 - detection_rate(novel)`.
    pub nov_pass_rate: Option<f64>,
}

impl DetectionReport {
    pub fn split(&self, split: Split) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == split)
    }

    pub fn detection_rate(&self, split: Split) -> Option<f64> {
        self.split(split).map(|s| s.detection_rate)
    }
}

/// Run-identity fields echoed into reports.
#[derive(Debug, Clone, Copy)]
pub struct RunSummary<'a> {
    pub weight_decay_enabled: bool,
    pub augmentation_enabled: bool,
    pub p_mask: f64,
    pub epochs: usize,
    pub fingerprint: &'a str,
}

/// Scores every image of one split with per-sample seeds derived from
/// `(scoring_seed, split, index)`. Identical inputs give identical
/// scores, whether called for calibration or evaluation.
pub fn score_split(
    params: &MAEParams,
    images: &[RasterImage],
    split: Split,
    opts: &ScoreOptions,
    scoring_seed: u64,
) -> Result<Vec<LossScore>, LossError> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let seed = derive_seed(scoring_seed, &[TAG_EVAL, split.tag(), i as u64]);
            score_sample(params, img, opts, i, seed)
        })
        .collect()
}

/// Applies the threshold rule to every requested split.
pub fn evaluate(
    params: &MAEParams,
    threshold: &Threshold,
    splits: &[(Split, &[RasterImage])],
    opts: &ScoreOptions,
    scoring_seed: u64,
    summary: RunSummary<'_>,
) -> Result<(DetectionReport, Vec<(Split, Vec<LossScore>)>), EvalError> {
    if threshold.config_fingerprint != summary.fingerprint {
        return Err(EvalError::FingerprintMismatch {
            expected: summary.fingerprint.to_string(),
            found: threshold.config_fingerprint.clone(),
        });
    }
    if splits.is_empty() {
        return Err(EvalError::NoSplits);
    }
    let mut split_reports = Vec::with_capacity(splits.len());
    let mut all_scores = Vec::with_capacity(splits.len());
    let mut nov_pass_rate = None;
    for &(split, images) in splits {
        if images.is_empty() {
            return Err(EvalError::EmptySplit(split.name().to_string()));
        }
        let scores = score_split(params, images, split, opts, scoring_seed)?;
        let verdicts: Vec<Verdict> = scores
            .iter()
            .map(|s| Verdict {
                sample_id: s.sample_id,
                aggregate: s.aggregate,
                tau: threshold.tau,
                parroted: detect(s.aggregate, threshold.tau),
            })
            .collect();
        let flagged = verdicts.iter().filter(|v| v.parroted).count();
        let detection_rate = 100.0 * flagged as f64 / verdicts.len() as f64;
        if split == Split::Novel {
            nov_pass_rate = Some(100.0 - detection_rate);
        }
        split_reports.push(SplitReport { split, n: verdicts.len(), detection_rate, verdicts });
        all_scores.push((split, scores));
    }
    let report = DetectionReport {
        weight_decay_enabled: summary.weight_decay_enabled,
        augmentation_enabled: summary.augmentation_enabled,
        p_mask: summary.p_mask,
        epochs: summary.epochs,
        tau: threshold.tau,
        config_fingerprint: summary.fingerprint.to_string(),
        splits: split_reports,
        nov_pass_rate,
    };
    Ok((report, all_scores))
}

pub fn render_json(report: &DetectionReport) -> Result<String, EvalError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Per-sample verdicts as flat CSV, one row per scored image.
pub fn render_csv(report: &DetectionReport) -> String {
    let mut out = String::from("split,sample_id,aggregate,tau,parroted\n");
    for sr in &report.splits {
        for v in &sr.verdicts {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                sr.split.name(),
                v.sample_id,
                v.aggregate,
                v.tau,
                v.parroted
            );
        }
    }
    out
}

fn rate_cell(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{r:.2}"),
        None => "-".to_string(),
    }
}

/// One markdown table in the familiar layout: WD, AUG, masking ratio,
/// epochs, per-split detection rates, and the novel pass rate, with
/// percentages at two decimals.
pub fn render_markdown(reports: &[DetectionReport]) -> String {
    let mut out = String::new();
    out.push_str("| WD | AUG | p_mask | Epochs | D_train | D_mod1 | D_mod2 | D_nov pass |\n");
    out.push_str("|----|-----|--------|--------|---------|--------|--------|------------|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            if r.weight_decay_enabled { "yes" } else { "no" },
            if r.augmentation_enabled { "yes" } else { "no" },
            r.p_mask,
            r.epochs,
            rate_cell(r.detection_rate(Split::Train)),
            rate_cell(r.detection_rate(Split::Mod1)),
            rate_cell(r.detection_rate(Split::Mod2)),
            rate_cell(r.nov_pass_rate),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::calibrate_tau;
    use crate::mae::{init_params, MAEConfig};
    use crate::rng::stream_rng;
    use rand::Rng;

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

    fn random_images(n: usize, tag: u64) -> Vec<RasterImage> {
        let mut rng = stream_rng(drum(tag), &[tag]);
        (0..n)
            .map(|_| RasterImage {
                width: 16,
                height: 16,
                pixels: (0..256).map(|_| rng.random::<f64>() * 0.9).collect(),
            })
            .collect()
    }

    fn drum(tag: u64) -> u64 {
        0xD00D ^ tag
    }

    #[test]
    fn detect_boundary_is_inclusive() {
        let tau = 0.5;
        assert!(detect(tau, tau));
        assert!(!detect(tau + 1e-12, tau));
        assert!(detect(0.0, tau));
        assert!(detect(0.0, 0.0));
    }

    #[test]
    #[should_panic(expected = "finite")]
    fn detect_rejects_non_finite_loss() {
        detect(f64::NAN, 0.5);
    }

    #[test]
    #[should_panic(expected = "finite")]
    fn detect_rejects_non_finite_tau() {
        detect(0.5, f64::INFINITY);
    }

    #[test]
    fn split_names_round_trip() {
        for split in Split::ALL {
            assert_eq!(Split::from_name(split.name()), Some(split));
        }
        assert_eq!(Split::from_name("bogus"), None);
    }

    fn summary(fingerprint: &str) -> RunSummary<'_> {
        RunSummary {
            weight_decay_enabled: false,
            augmentation_enabled: false,
            p_mask: 0.5,
            epochs: 10,
            fingerprint,
        }
    }

    #[test]
    fn evaluate_is_consistent_with_detect_and_the_complement_identity() {
        let params = init_params(&tiny_config(), 3).unwrap();
        let train = random_images(4, 1);
        let novel = random_images(3, 2);
        let opts = ScoreOptions { repeats: 2, ..ScoreOptions::new(0.5) };

        let cal = score_split(&params, &train, Split::Train, &opts, 7).unwrap();
        let aggregates: Vec<f64> = cal.iter().map(|s| s.aggregate).collect();
        let threshold = calibrate_tau(&aggregates, "fp", opts.white_threshold, 2).unwrap();

        let (report, scores) = evaluate(
            &params,
            &threshold,
            &[(Split::Train, &train), (Split::Novel, &novel)],
            &opts,
            7,
            summary("fp"),
        )
        .unwrap();

        // Calibration and evaluation must see the same train scores.
        let (_, eval_train_scores) = &scores[0];
        assert_eq!(eval_train_scores, &cal);

        for sr in &report.splits {
            let flagged = sr.verdicts.iter().filter(|v| v.parroted).count();
            assert_eq!(sr.detection_rate, 100.0 * flagged as f64 / sr.n as f64);
            for v in &sr.verdicts {
                assert_eq!(v.parroted, detect(v.aggregate, threshold.tau));
                assert_eq!(v.tau, threshold.tau);
            }
        }

        // At least one train sample sits at or below its own mean.
        let train_report = report.split(Split::Train).unwrap();
        assert!(train_report.verdicts.iter().any(|v| v.parroted));

        // Complement identity, exact.
        let novel_rate = report.detection_rate(Split::Novel).unwrap();
        assert_eq!(report.nov_pass_rate, Some(100.0 - novel_rate));
    }

    #[test]
    fn evaluate_rejects_mismatched_fingerprint_and_empty_splits() {
        let params = init_params(&tiny_config(), 5).unwrap();
        let imgs = random_images(2, 3);
        let opts = ScoreOptions { repeats: 1, ..ScoreOptions::new(0.5) };
        let threshold = calibrate_tau(&[0.1], "fp-a", opts.white_threshold, 1).unwrap();

        let err = evaluate(
            &params,
            &threshold,
            &[(Split::Train, imgs.as_slice())],
            &opts,
            1,
            summary("fp-b"),
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::FingerprintMismatch { .. }));

        let err = evaluate(
            &params,
            &threshold,
            &[(Split::Train, &[] as &[RasterImage])],
            &opts,
            1,
            summary("fp-a"),
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::EmptySplit(_)));

        let err =
            evaluate(&params, &threshold, &[], &opts, 1, summary("fp-a")).unwrap_err();
        assert!(matches!(err, EvalError::NoSplits));
    }

    #[test]
    fn identical_samples_give_all_or_nothing_rates() {
        let params = init_params(&tiny_config(), 7).unwrap();
        let one = random_images(1, 4).remove(0);
        let same: Vec<RasterImage> = (0..5).map(|_| one.clone()).collect();
        let opts = ScoreOptions { repeats: 2, ..ScoreOptions::new(0.5) };

        let cal = score_split(&params, &same, Split::Train, &opts, 9).unwrap();
        let aggregates: Vec<f64> = cal.iter().map(|s| s.aggregate).collect();
        let threshold = calibrate_tau(&aggregates, "fp", opts.white_threshold, 2).unwrap();
        let (report, _) = evaluate(
            &params,
            &threshold,
            &[(Split::Train, &same)],
            &opts,
            9,
            summary("fp"),
        )
        .unwrap();
        let rate = report.detection_rate(Split::Train).unwrap();
        // Identical images score differently only through their
        // per-sample seeds; with identical seeds they would be equal.
        // Here the rate must still be a multiple of 20 (n = 5).
        assert_eq!(rate % 20.0, 0.0);
        assert!(rate > 0.0);
    }

    #[test]
    fn json_report_round_trips() {
        let report = DetectionReport {
            weight_decay_enabled: true,
            augmentation_enabled: true,
            p_mask: 0.75,
            epochs: 1000,
            tau: 0.0123,
            config_fingerprint: "fp".into(),
            splits: vec![SplitReport {
                split: Split::Train,
                n: 2,
                detection_rate: 50.0,
                verdicts: vec![
                    Verdict { sample_id: 0, aggregate: 0.01, tau: 0.0123, parroted: true },
                    Verdict { sample_id: 1, aggregate: 0.10, tau: 0.0123, parroted: false },
                ],
            }],
            nov_pass_rate: None,
        };
        let text = render_json(&report).unwrap();
        let back: DetectionReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn markdown_renders_table_one_layout() {
        let mk_split = |split: Split, rate: f64| SplitReport {
            split,
            n: 0,
            detection_rate: rate,
            verdicts: Vec::new(),
        };
        let report = DetectionReport {
            weight_decay_enabled: false,
            augmentation_enabled: false,
            p_mask: 0.75,
            epochs: 1000,
            tau: 0.01,
            config_fingerprint: "fp".into(),
            splits: vec![
                mk_split(Split::Train, 95.56),
                mk_split(Split::Mod1, 70.55),
                mk_split(Split::Mod2, 67.35),
                mk_split(Split::Novel, 61.42),
            ],
            nov_pass_rate: Some(38.58),
        };
        let md = render_markdown(&[report]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("| WD | AUG | p_mask | Epochs | D_train"));
        let row = lines[2];
        let cells: Vec<&str> = row.trim_matches('|').split('|').map(str::trim).collect();
        assert_eq!(cells, vec!["no", "no", "0.75", "1000", "95.56", "70.55", "67.35", "38.58"]);

        let positions: Vec<usize> = ["95.56", "70.55", "67.35", "38.58"]
            .iter()
            .map(|v| row.find(v).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn csv_has_one_row_per_verdict() {
        let report = DetectionReport {
            weight_decay_enabled: false,
            augmentation_enabled: false,
            p_mask: 0.5,
            epochs: 1,
            tau: 0.5,
            config_fingerprint: "fp".into(),
            splits: vec![SplitReport {
                split: Split::Mod1,
                n: 2,
                detection_rate: 100.0,
                verdicts: vec![
                    Verdict { sample_id: 0, aggregate: 0.25, tau: 0.5, parroted: true },
                    Verdict { sample_id: 1, aggregate: 0.5, tau: 0.5, parroted: true },
                ],
            }],
            nov_pass_rate: None,
        };
        let csv = render_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "split,sample_id,aggregate,tau,parroted");
        assert_eq!(lines[1], "mod1,0,0.25,0.5,true");
        assert_eq!(lines[2], "mod1,1,0.5,0.5,true");
    }

    #[test]
    fn score_split_seeds_differ_across_splits_and_indices() {
        let params = init_params(&tiny_config(), 9).unwrap();
        let imgs = random_images(2, 5);
        let opts = ScoreOptions { repeats: 1, ..ScoreOptions::new(0.5) };
        let a = score_split(&params, &imgs, Split::Train, &opts, 3).unwrap();
        let b = score_split(&params, &imgs, Split::Mod1, &opts, 3).unwrap();
        // Same images under different split tags draw different masks.
        assert_ne!(a[0].repeats, b[0].repeats);
        // Determinism within a split.
        let c = score_split(&params, &imgs, Split::Train, &opts, 3).unwrap();
        assert_eq!(a, c);
    }
}
