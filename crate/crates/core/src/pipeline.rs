//! Stage orchestration over a run directory. Each stage reads the run
//! config, checks artifact fingerprints, and leaves its outputs under
//! `output_dir` in a fixed layout:
//!
//! ```text
//! output_dir/
//!   data/{train,mod1,mod2,novel}/*.png + manifest.json
//!   checkpoints/epoch_NNNNNN.ckpt, final.ckpt
//!   loss_curve.csv
//!   threshold.json
//!   scores/{calibration,train,mod1,mod2,novel}.csv
//!   report.{json,csv,md}
//!   plots/{split}.svg            (eval --plot)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    evaluate, render_csv, render_json, render_markdown, DetectionReport, EvalError, RunSummary,
    Split,
};
use crate::loss::{calibrate_tau, LossError, LossScore, Threshold};
use crate::sketch::{gen_dataset, load_split, Manifest, RasterImage, SketchError};
use crate::train::{train, LossCurve, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{artifact} fingerprint {found} does not match run config {expected}")]
    Fingerprint { artifact: &'static str, expected: String, found: String },
    #[error("pipeline io: {0}")]
    Io(#[from] std::io::Error),
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("epoch_{epoch:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("final.ckpt")
    }

    pub fn loss_curve(&self) -> PathBuf {
        self.root.join("loss_curve.csv")
    }

    pub fn threshold(&self) -> PathBuf {
        self.root.join("threshold.json")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn score_file(&self, name: &str) -> PathBuf {
        self.scores_dir().join(format!("{name}.csv"))
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
}

pub fn paths(config: &RunConfig) -> RunPaths {
    RunPaths::new(&config.output_dir)
}

/// Renders all four splits into `output_dir/data`.
pub fn stage_gen_data(config: &RunConfig) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let dir = paths(config).data_dir();
    fs::create_dir_all(&dir)?;
    Ok(gen_dataset(&config.dataset, &dir)?)
}

/// The generated splits, loaded back from disk in manifest order.
#[derive(Debug)]
pub struct Datasets {
    pub train: Vec<RasterImage>,
    pub mod1: Vec<RasterImage>,
    pub mod2: Vec<RasterImage>,
    pub novel: Vec<RasterImage>,
}

impl Datasets {
    pub fn split(&self, split: Split) -> &[RasterImage] {
        match split {
            Split::Train => &self.train,
            Split::Mod1 => &self.mod1,
            Split::Mod2 => &self.mod2,
            Split::Novel => &self.novel,
        }
    }
}

pub fn load_datasets(config: &RunConfig) -> Result<Datasets, PipelineError> {
    let dir = paths(config).data_dir();
    Ok(Datasets {
        train: load_split(&dir, "train")?,
        mod1: load_split(&dir, "mod1")?,
        mod2: load_split(&dir, "mod2")?,
        novel: load_split(&dir, "novel")?,
    })
}

/// Trains on the generated train split, writing periodic checkpoints,
/// `final.ckpt`, and the loss curve. `resume_from` continues an earlier
/// run whose fingerprint must match.
pub fn stage_train(
    config: &RunConfig,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    let run = paths(config);
    let fingerprint = config.fingerprint();
    let images = load_split(&run.data_dir(), "train")?;
    fs::create_dir_all(run.checkpoints_dir())?;

    let resume = match resume_from {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    // Keep the loss-curve prefix when resuming so the CSV always covers
    // epoch 1 through the latest.
    let mut prefix = LossCurve::default();
    if let Some(ckpt) = &resume {
        if run.loss_curve().exists() {
            let existing = LossCurve::from_csv(&fs::read_to_string(run.loss_curve())?)?;
            prefix.entries =
                existing.entries.into_iter().filter(|&(e, _)| e <= ckpt.epoch).collect();
        }
    }

    let train_config = config.train_config();
    let outcome = train(
        &images,
        &config.model,
        &train_config,
        &fingerprint,
        resume,
        |epoch, params, optimizer| {
            save_checkpoint(&run.epoch_checkpoint(epoch), &fingerprint, epoch, params, optimizer)?;
            Ok(())
        },
    )?;

    save_checkpoint(
        &run.final_checkpoint(),
        &fingerprint,
        outcome.epochs_completed,
        &outcome.params,
        &outcome.optimizer,
    )?;

    let mut curve = prefix;
    curve.entries.extend(outcome.curve.entries.iter().cloned());
    fs::write(run.loss_curve(), curve.to_csv())?;
    Ok(outcome)
}

fn check_fingerprint(
    artifact: &'static str,
    expected: &str,
    found: &str,
) -> Result<(), PipelineError> {
    if expected != found {
        return Err(PipelineError::Fingerprint {
            artifact,
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn scores_csv(scores: &[LossScore]) -> String {
    let repeats = scores.first().map_or(0, |s| s.repeats.len());
    let mut out = String::from("sample_id,aggregate");
    for r in 0..repeats {
        out.push_str(&format!(",repeat_{r}"));
    }
    out.push('\n');
    for s in scores {
        out.push_str(&format!("{},{}", s.sample_id, s.aggregate));
        for r in &s.repeats {
            out.push_str(&format!(",{r}"));
        }
        out.push('\n');
    }
    out
}

/// Scores the train split under the run's scoring protocol and writes
/// `threshold.json` plus the per-sample calibration scores.
pub fn stage_calibrate(
    config: &RunConfig,
    checkpoint_path: &Path,
) -> Result<Threshold, PipelineError> {
    config.validate()?;
    let run = paths(config);
    let fingerprint = config.fingerprint();
    let ckpt = load_checkpoint(checkpoint_path)?;
    check_fingerprint("checkpoint", &fingerprint, &ckpt.fingerprint)?;

    let images = load_split(&run.data_dir(), "train")?;
    let opts = config.score_options();
    let scores =
        crate::eval::score_split(&ckpt.params, &images, Split::Train, &opts, config.scoring.seed)?;
    fs::create_dir_all(run.scores_dir())?;
    fs::write(run.score_file("calibration"), scores_csv(&scores))?;

    let aggregates: Vec<f64> = scores.iter().map(|s| s.aggregate).collect();
    let threshold =
        calibrate_tau(&aggregates, &fingerprint, opts.white_threshold, opts.repeats)?;
    threshold.save(&run.threshold())?;
    Ok(threshold)
}

/// Applies the threshold to the requested splits and writes score CSVs
/// and `report.{json,csv,md}`; optionally also SVG histograms.
pub fn stage_eval(
    config: &RunConfig,
    checkpoint_path: &Path,
    splits: &[Split],
    plot: bool,
) -> Result<DetectionReport, PipelineError> {
    config.validate()?;
    let run = paths(config);
    let fingerprint = config.fingerprint();
    let ckpt = load_checkpoint(checkpoint_path)?;
    check_fingerprint("checkpoint", &fingerprint, &ckpt.fingerprint)?;
    let threshold = Threshold::load(&run.threshold())?;
    check_fingerprint("threshold", &fingerprint, &threshold.config_fingerprint)?;

    let datasets = load_datasets(config)?;
    let selected: Vec<(Split, &[RasterImage])> =
        splits.iter().map(|&s| (s, datasets.split(s))).collect();
    let summary = RunSummary {
        weight_decay_enabled: config.train.weight_decay_enabled,
        augmentation_enabled: config.train.augmentation_enabled,
        p_mask: config.model.p_mask,
        epochs: config.train.epochs,
        fingerprint: &fingerprint,
    };
    let opts = config.score_options();
    let (report, all_scores) =
        evaluate(&ckpt.params, &threshold, &selected, &opts, config.scoring.seed, summary)?;

    fs::create_dir_all(run.scores_dir())?;
    for (split, scores) in &all_scores {
        fs::write(run.score_file(split.name()), scores_csv(scores))?;
    }
    fs::write(run.report("json"), render_json(&report)?)?;
    fs::write(run.report("csv"), render_csv(&report))?;
    fs::write(run.report("md"), render_markdown(std::slice::from_ref(&report)))?;

    if plot {
        fs::create_dir_all(run.plots_dir())?;
        for (split, scores) in &all_scores {
            let aggregates: Vec<f64> = scores.iter().map(|s| s.aggregate).collect();
            let svg = histogram_svg(split.name(), &aggregates, threshold.tau);
            fs::write(run.plots_dir().join(format!("{}.svg", split.name())), svg)?;
        }
    }
    Ok(report)
}

/// gen-data → train → calibrate → eval over all four splits, from a
/// fresh model. The one-call path used for reproducibility checks.
pub fn run_full_pipeline(config: &RunConfig) -> Result<DetectionReport, PipelineError> {
    stage_gen_data(config)?;
    stage_train(config, None)?;
    let run = paths(config);
    stage_calibrate(config, &run.final_checkpoint())?;
    stage_eval(config, &run.final_checkpoint(), &Split::ALL, false)
}

/// Value lists for [`sweep`]; empty lists keep the base config's value.
#[derive(Debug, Clone, Default)]
pub struct SweepGrid {
    pub p_mask: Vec<f64>,
    pub weight_decay: Vec<bool>,
    pub augmentation: Vec<bool>,
    pub epochs: Vec<usize>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() { vec![base] } else { values.to_vec() }
}

/// Runs the full pipeline once per grid cell, each in its own
/// subdirectory with a fresh seed-derived initialization, and writes a
/// combined multi-row report at the base output directory.
pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<DetectionReport>, PipelineError> {
    base.validate()?;
    let p_masks = axis(&grid.p_mask, base.model.p_mask);
    let decays = axis(&grid.weight_decay, base.train.weight_decay_enabled);
    let augs = axis(&grid.augmentation, base.train.augmentation_enabled);
    let epoch_counts = axis(&grid.epochs, base.train.epochs);

    let mut reports = Vec::new();
    let mut cell = 0usize;
    for &p_mask in &p_masks {
        for &wd in &decays {
            for &aug in &augs {
                for &epochs in &epoch_counts {
                    let mut config = base.clone();
                    config.model.p_mask = p_mask;
                    config.train.weight_decay_enabled = wd;
                    config.train.augmentation_enabled = aug;
                    config.train.epochs = epochs;
                    config.output_dir =
                        base.output_dir.join("sweep").join(format!("cell_{cell:03}"));
                    fs::create_dir_all(&config.output_dir)?;
                    config.validate()?;
                    reports.push(run_full_pipeline(&config)?);
                    cell += 1;
                }
            }
        }
    }

    let run = RunPaths::new(&base.output_dir);
    fs::create_dir_all(&run.root)?;
    fs::write(run.report("md"), render_markdown(&reports))?;
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| PipelineError::Io(std::io::Error::other(e)))?;
    fs::write(run.report("json"), json + "\n")?;
    Ok(reports)
}

/// Minimal histogram: score frequencies in fixed-width bins with the
/// threshold drawn as a vertical line.
pub fn histogram_svg(title: &str, values: &[f64], tau: f64) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const MARGIN: f64 = 48.0;
    let bins = 24usize;
    let max_v = values.iter().cloned().fold(tau, f64::max) * 1.05 + f64::MIN_POSITIVE;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / max_v) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let max_count = counts.iter().copied().max().unwrap_or(1).max(1) as f64;

    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title} scores (n={})</text>\n",
        W / 2.0,
        values.len()
    ));
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let bar_h = plot_h * count as f64 / max_count;
        let x = MARGIN + plot_w * i as f64 / bins as f64;
        let y = MARGIN + plot_h - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bar_h:.2}\" \
             fill=\"#4878a8\"/>\n",
            plot_w / bins as f64 - 1.0
        ));
    }
    let tau_x = MARGIN + plot_w * (tau / max_v).min(1.0);
    svg.push_str(&format!(
        "<line x1=\"{tau_x:.2}\" y1=\"{MARGIN}\" x2=\"{tau_x:.2}\" y2=\"{:.2}\" \
         stroke=\"#c03030\" stroke-width=\"2\" stroke-dasharray=\"6 3\"/>\n",
        MARGIN + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
         fill=\"#c03030\">tau = {tau:.4e}</text>\n",
        tau_x + 6.0,
        MARGIN + 14.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#202020\"/>\n",
        MARGIN + plot_h,
        MARGIN + plot_w,
        MARGIN + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">0</text>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"end\">{max_v:.4e}</text>\n",
        MARGIN + plot_h + 16.0,
        MARGIN + plot_w,
        MARGIN + plot_h + 16.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Convenience for tests and the CLI: the checkpoint a run would leave
/// behind, loaded and fingerprint-checked.
pub fn load_run_checkpoint(config: &RunConfig) -> Result<Checkpoint, PipelineError> {
    let run = paths(config);
    let ckpt = load_checkpoint(&run.final_checkpoint())?;
    check_fingerprint("checkpoint", &config.fingerprint(), &ckpt.fingerprint)?;
    Ok(ckpt)
}
