//! Import of user-supplied PNG image sets into a dataset bundle.
//!
//! Layout under the source directory (every subdirectory optional):
//! `backgrounds/` background-only images, `composites/` images with objects
//! (ground truth in `masks/` and paired backgrounds in `paired/` under the
//! same file name), and `objects/` grayscale object crops whose masks are
//! estimated by Otsu thresholding and which are blended onto the imported
//! backgrounds. Files whose stem contains `_right` are mirrored left-right.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

use super::assign_splits;
use crate::compositor::alpha_blend;
use crate::dataset::{Dataset, ImageRecord, Kind};
use crate::error::{Error, Result};
use crate::image::{read_png, resize_bilinear};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportConfig {
    /// Side length every image is resized to.
    pub size: usize,
    /// Average colour channels down to one.
    pub grayscale: bool,
}

impl Default for ImportConfig {
    fn default() -> Self {
        Self { size: 32, grayscale: true }
    }
}

/// Otsu threshold of values in [0, 1] over a 256-bin histogram: the bin edge
/// maximizing the between-class variance.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    let mut hist = [0f64; 256];
    for &v in values {
        hist[((v.clamp(0.0, 1.0) * 255.0).round()) as usize] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0usize);
    for (t, &h) in hist.iter().enumerate() {
        w0 += h;
        sum0 += t as f64 * h;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (sum0 / w0 - (sum_all - sum0) / w1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / 255.0
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let w = img.shape()[2];
    Tensor::from_fn(img.shape().to_vec(), |i| {
        let x = i % w;
        img.data()[i - x + (w - 1 - x)]
    })
}

fn to_gray(img: Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c == 1 {
        return img;
    }
    Tensor::from_fn(vec![1, h, w], |p| (0..c).map(|ch| img.data()[ch * h * w + p]).sum::<f32>() / c as f32)
}

fn load(path: &Path, cfg: &ImportConfig) -> Result<Tensor<f32>> {
    let mut img = read_png(path)?;
    if cfg.grayscale {
        img = to_gray(img);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if stem.contains("_right") {
        img = flip_horizontal(&img);
    }
    resize_bilinear(&img, cfg.size, cfg.size)
}

fn load_mask(path: &Path, cfg: &ImportConfig) -> Result<Tensor<f32>> {
    let m = load(path, &ImportConfig { grayscale: true, ..cfg.clone() })?;
    Ok(m.map(|v| (v >= 0.5) as u8 as f32))
}

/// Build a dataset from the PNG layout described in the module docs.
pub fn import_directory(src: &Path, cfg: &ImportConfig, seed_value: u64) -> Result<Dataset> {
    let mut records = Vec::new();
    let backgrounds: Vec<Tensor<f32>> = png_files(&src.join("backgrounds"))?.iter().map(|p| load(p, cfg)).collect::<Result<_>>()?;
    let splits = assign_splits(backgrounds.len(), &mut seed::rng(seed_value, &[seed::tag("split-bg")]));
    for (image, split) in backgrounds.iter().zip(splits) {
        records.push(ImageRecord {
            id: records.len(),
            kind: Kind::Background,
            split,
            family: None,
            object_kind: None,
            image: image.clone(),
            mask: None,
            background: None,
            cluster: None,
        });
    }

    let mut composites = Vec::new();
    for path in png_files(&src.join("composites"))? {
        let name = path.file_name().expect("listed file");
        let side = |sub: &str| Some(src.join(sub).join(name)).filter(|p| p.is_file());
        let mask = side("masks").map(|p| load_mask(&p, cfg)).transpose()?;
        let background = side("paired").map(|p| load(&p, cfg)).transpose()?;
        composites.push((load(&path, cfg)?, mask, background));
    }
    let objects = png_files(&src.join("objects"))?;
    if !objects.is_empty() && backgrounds.is_empty() {
        return Err(Error::Dataset("objects/ needs backgrounds/ to blend onto".into()));
    }
    for (i, path) in objects.iter().enumerate() {
        let obj = to_gray(load(path, cfg)?);
        let t = otsu_threshold(obj.data());
        let mask = obj.map(|v| (v > t) as u8 as f32);
        let mut rng = seed::rng(seed_value, &[seed::tag("object"), i as u64]);
        let mut bg = backgrounds[rng.random_range(0..backgrounds.len())].clone();
        if bg.shape()[0] != 1 {
            bg = to_gray(bg);
        }
        let image = alpha_blend(&obj, &mask, &bg)?;
        composites.push((image, Some(mask), Some(bg)));
    }
    let splits = assign_splits(composites.len(), &mut seed::rng(seed_value, &[seed::tag("split-comp")]));
    for ((image, mask, background), split) in composites.into_iter().zip(splits) {
        records.push(ImageRecord {
            id: records.len(),
            kind: Kind::Composite,
            split,
            family: None,
            object_kind: None,
            image,
            mask,
            background,
            cluster: None,
        });
    }
    let channels = records.first().map(|r| r.image.shape()[0]).ok_or_else(|| Error::Dataset(format!("no PNG images under {}", src.display())))?;
    let ds = Dataset { channels, height: cfg.size, width: cfg.size, family_names: vec![], object_names: vec![], records };
    ds.validate()?;
    Ok(ds)
}
