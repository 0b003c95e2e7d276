//! Four-split dataset assembly: train, two modification strengths, novel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{perturb, rasterize, sample_sketch, PerturbationLevel, RasterImage, SketchError};

/// Generation settings for one dataset.
///
/// Train sketches use seeds `train_seed_start..+n_train`; novel sketches
/// use `novel_seed_start..+n_novel`, which must not overlap so the novel
/// split is genuinely unseen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_novel: usize,
    pub complexity_min: usize,
    pub complexity_max: usize,
    pub width: usize,
    pub height: usize,
    pub stroke_width: f64,
    pub train_seed_start: u64,
    pub novel_seed_start: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 64,
            n_novel: 64,
            complexity_min: 2,
            complexity_max: 6,
            width: 56,
            height: 56,
            stroke_width: 1.5,
            train_seed_start: 0,
            novel_seed_start: 1_000_000,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SketchError> {
        if self.n_train == 0 {
            return Err(SketchError::Config("n_train must be at least 1".into()));
        }
        if self.n_novel == 0 {
            return Err(SketchError::Config("n_novel must be at least 1".into()));
        }
        if self.complexity_min == 0 || self.complexity_min > self.complexity_max {
            return Err(SketchError::Config(format!(
                "complexity range [{}, {}] is invalid",
                self.complexity_min, self.complexity_max
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(SketchError::Config(format!(
                "raster {}x{} is below the 16x16 minimum",
                self.width, self.height
            )));
        }
        if self.stroke_width <= 0.0 {
            return Err(SketchError::Config("stroke width must be positive".into()));
        }
        let train_end = self.train_seed_start + self.n_train as u64;
        let novel_end = self.novel_seed_start + self.n_novel as u64;
        if self.train_seed_start < novel_end && self.novel_seed_start < train_end {
            return Err(SketchError::Config(format!(
                "train seeds [{}, {train_end}) overlap novel seeds [{}, {novel_end})",
                self.train_seed_start, self.novel_seed_start
            )));
        }
        Ok(())
    }
}

/// All four splits rendered in memory. Pixels are quantized to the 8-bit
/// grid so they match what a PNG round trip yields.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub train: Vec<RasterImage>,
    pub mod1: Vec<RasterImage>,
    pub mod2: Vec<RasterImage>,
    pub novel: Vec<RasterImage>,
}

/// Renders every split. `mod1[i]` and `mod2[i]` are perturbations of the
/// sketch behind `train[i]`; novel images come from disjoint seeds.
pub fn generate_images(config: &DatasetConfig) -> Result<GeneratedDataset, SketchError> {
    config.validate()?;
    let mut out = GeneratedDataset {
        train: Vec::with_capacity(config.n_train),
        mod1: Vec::with_capacity(config.n_train),
        mod2: Vec::with_capacity(config.n_train),
        novel: Vec::with_capacity(config.n_novel),
    };
    let render = |s: &super::Sketch| -> Result<RasterImage, SketchError> {
        Ok(rasterize(s, config.width, config.height, config.stroke_width)?.quantize())
    };
    for i in 0..config.n_train {
        let seed = config.train_seed_start + i as u64;
        let s = sample_sketch(seed, config.complexity_min, config.complexity_max);
        out.train.push(render(&s)?);
        out.mod1.push(render(&perturb(&s, PerturbationLevel::Mod1, seed)?)?);
        out.mod2.push(render(&perturb(&s, PerturbationLevel::Mod2, seed)?)?);
    }
    for j in 0..config.n_novel {
        let seed = config.novel_seed_start + j as u64;
        let s = sample_sketch(seed, config.complexity_min, config.complexity_max);
        out.novel.push(render(&s)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub filename: String,
    pub seed: u64,
    pub source_index: usize,
    pub perturbation_level: String,
}

/// Index of every image written by [`gen_dataset`], stored as
/// `manifest.json` in the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest, SketchError> {
        let text = fs::read_to_string(root.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entries_for<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestEntry> {
        self.images.iter().filter(move |e| e.split == split)
    }
}

/// Generates all splits and writes PNGs plus the manifest under `root`.
pub fn gen_dataset(config: &DatasetConfig, root: &Path) -> Result<Manifest, SketchError> {
    let images = generate_images(config)?;
    let mut manifest = Manifest { images: Vec::new() };

    let splits: [(&str, &Vec<RasterImage>); 4] = [
        ("train", &images.train),
        ("mod1", &images.mod1),
        ("mod2", &images.mod2),
        ("novel", &images.novel),
    ];
    for (split, imgs) in splits {
        let dir = root.join(split);
        fs::create_dir_all(&dir)?;
        for (i, img) in imgs.iter().enumerate() {
            let filename = format!("{split}/{i:05}.png");
            img.save_png(&root.join(&filename))?;
            let (seed, level) = match split {
                "novel" => (config.novel_seed_start + i as u64, "none"),
                "train" => (config.train_seed_start + i as u64, "none"),
                other => (config.train_seed_start + i as u64, other),
            };
            manifest.images.push(ManifestEntry {
                split: split.to_string(),
                filename,
                seed,
                source_index: i,
                perturbation_level: level.to_string(),
            });
        }
    }
    let file = fs::File::create(root.join("manifest.json"))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(manifest)
}

/// Loads one split's images in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<RasterImage>, SketchError> {
    let manifest = Manifest::load(root)?;
    let mut images = Vec::new();
    for entry in manifest.entries_for(split) {
        images.push(RasterImage::load_png(&root.join(&entry.filename))?);
    }
    if images.is_empty() {
        return Err(SketchError::Config(format!("split {split} has no images in manifest")));
    }
    Ok(images)
}
