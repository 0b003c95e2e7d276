//! Temporary tuning probe. Not part of the suite; run explicitly.

use std::time::Instant;

use parrotgate_core::checkpoint::load_checkpoint;
use parrotgate_core::config::{RunConfig, ScoringSection, TrainSection};
use parrotgate_core::eval::{score_split, Split};
use parrotgate_core::loss::{score_sample, PixelSetPolicy, ScoreOptions, WHITE_THRESHOLD};
use parrotgate_core::mae::MAEConfig;
use parrotgate_core::pipeline::{paths, stage_gen_data, stage_train};
use parrotgate_core::rng::derive_seed;
use parrotgate_core::sketch::{load_split, rasterize, sample_sketch, RasterImage};
use parrotgate_core::train::{train, TrainConfig};

#[test]
#[ignore = "manual tuning probe"]
fn a_probe_eight_image_engineered_mix() {
    // Mostly-simple corpus with one deliberately complex straggler.
    let complexities = [2usize, 2, 2, 3, 3, 3, 4, 7];
    let model = MAEConfig::desk();
    let images: Vec<RasterImage> = complexities
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = sample_sketch(i as u64 * 31 + 5, c, c);
            rasterize(&s, 56, 56, 1.5).unwrap().quantize()
        })
        .collect();
    let config = TrainConfig {
        epochs: 2000,
        batch_size: 1,
        learning_rate: 5e-4,
        weight_decay_enabled: false,
        augmentation_enabled: false,
        p_mask: 0.75,
        seed: 11,
        checkpoint_every: 1_000_000,
        white_threshold: WHITE_THRESHOLD,
        pixel_set: PixelSetPolicy::AllDrawing,
    };
    let out = train(&images, &model, &config, "fp", None, |_, _, _| Ok(())).unwrap();
    let opts = ScoreOptions { repeats: 8, ..ScoreOptions::new(0.75) };
    let scores: Vec<f64> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            score_sample(&out.params, img, &opts, i, derive_seed(99, &[i as u64]))
                .unwrap()
                .aggregate
        })
        .collect();
    let tau = scores.iter().sum::<f64>() / scores.len() as f64;
    let flagged = scores.iter().filter(|&&s| s <= tau).count();
    println!(
        "eight-mix: final_loss={:.3e} flagged={flagged}/8 tau={tau:.3e} scores={scores:?}",
        out.curve.entries.last().unwrap().1
    );
}

#[test]
#[ignore = "manual tuning probe"]
fn b_probe_sixty_four_image_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        dataset: parrotgate_core::sketch::DatasetConfig {
            n_train: 64,
            n_novel: 64,
            complexity_min: 2,
            complexity_max: 6,
            width: 56,
            height: 56,
            stroke_width: 1.5,
            train_seed_start: 0,
            novel_seed_start: 1_000_000,
        },
        model: MAEConfig {
            decoder_embed_dim: 96,
            decoder_depth: 2,
            p_mask: 0.75,
            ..MAEConfig::desk()
        },
        train: TrainSection {
            epochs: 2500,
            batch_size: 1,
            learning_rate: 5e-4,
            weight_decay_enabled: false,
            augmentation_enabled: false,
            seed: 0,
            checkpoint_every: 500,
        },
        scoring: ScoringSection {
            k: 8,
            white_threshold: WHITE_THRESHOLD,
            pixel_set: PixelSetPolicy::AllDrawing,
            seed: 0xA11CE,
        },
        output_dir: dir.path().to_path_buf(),
    };

    let t0 = Instant::now();
    stage_gen_data(&config).unwrap();
    stage_train(&config, None).unwrap();
    println!("train elapsed={:.0}s", t0.elapsed().as_secs_f64());

    let run = paths(&config);
    let data = run.data_dir();
    let train_imgs = load_split(&data, "train").unwrap();
    let splits = [
        ("mod1", load_split(&data, "mod1").unwrap()),
        ("mod2", load_split(&data, "mod2").unwrap()),
        ("novel", load_split(&data, "novel").unwrap()),
    ];

    for (label, epoch_file) in [("e2000", Some(2000u64)), ("e2500", None)] {
        let path = match epoch_file {
            Some(e) => run.epoch_checkpoint(e),
            None => run.final_checkpoint(),
        };
        let ckpt = load_checkpoint(&path).unwrap();
        for k in [8usize, 16] {
            let opts = ScoreOptions { repeats: k, ..config.score_options() };
            let scores =
                score_split(&ckpt.params, &train_imgs, Split::Train, &opts, config.scoring.seed)
                    .unwrap();
            let mut aggs: Vec<f64> = scores.iter().map(|s| s.aggregate).collect();
            let tau = aggs.iter().sum::<f64>() / aggs.len() as f64;
            let flagged = aggs.iter().filter(|&&s| s <= tau).count();
            aggs.sort_by(f64::total_cmp);
            let q = |f: f64| aggs[((aggs.len() - 1) as f64 * f) as usize];
            println!(
                "{label} K={k}: train detection {flagged}/64 tau={tau:.3e} \
                 q10={:.2e} q50={:.2e} q75={:.2e} q90={:.2e} max={:.2e}",
                q(0.1),
                q(0.5),
                q(0.75),
                q(0.9),
                aggs[aggs.len() - 1]
            );
        }
        for (name, imgs) in &splits {
            let split = Split::from_name(name).unwrap();
            let opts = config.score_options();
            let scores =
                score_split(&ckpt.params, imgs, split, &opts, config.scoring.seed).unwrap();
            let mean =
                scores.iter().map(|s| s.aggregate).sum::<f64>() / scores.len() as f64;
            println!("{label} {name}: mean={mean:.3e}");
        }
    }
    println!("total elapsed={:.0}s", t0.elapsed().as_secs_f64());
}
