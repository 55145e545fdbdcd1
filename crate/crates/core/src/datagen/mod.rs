//! Procedural datasets: textured backgrounds from a few families, parametric
//! shape objects with controlled intensities, alpha-blended composites with
//! exact masks, and stratified 70/20/10 splits.

mod import;
mod intensity;
mod shape;
mod texture;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use tensorcore::{Float, Tensor};

pub use import::{import_directory, otsu_threshold, ImportConfig};
pub use intensity::{apply_gaussian_sq_intensity, apply_intensity_gradient, gaussian_sq_samples, percentile, Ramp};
pub use shape::{gen_shape, ShapeKind, ShapeSpec};
pub use texture::{TextureFamily, TextureSpec};

use crate::compositor::alpha_blend;
use crate::dataset::{Dataset, ImageRecord, Kind, Split};
use crate::error::{contract, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// Clean textures, bright objects with squared-Gaussian intensities.
    #[default]
    Toy,
    /// Speckled textures, objects carrying a 45° ramp taken from the
    /// background's upper percentiles.
    Sas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub recipe: Recipe,
    pub size: usize,
    /// Number of texture families (at most 4).
    pub families: usize,
    pub composites_per_family: usize,
    pub backgrounds_per_family: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Toy,
            size: 32,
            families: 4,
            composites_per_family: 200,
            backgrounds_per_family: 200,
            min_scale: 0.3,
            max_scale: 0.5,
        }
    }
}

/// Family-typical texture parameters; samples jitter around them.
fn base_spec(family: TextureFamily) -> TextureSpec {
    let (frequency, orientation, contrast) = match family {
        TextureFamily::Grating => (1.0 / 8.0, 0.0, 0.4),
        TextureFamily::Checkerboard => (1.0 / 10.0, PI / 4.0, 0.4),
        TextureFamily::FilteredNoise => (1.0 / 4.0, 0.0, 0.5),
        TextureFamily::Stripes => (1.0 / 6.0, PI / 2.0, 0.3),
    };
    TextureSpec { family, frequency, orientation, phase: 0.0, contrast, mean: 0.3 }
}

/// A random member of `family`: fresh phase, small frequency and
/// orientation jitter.
pub fn sample_texture(family: TextureFamily, rng: &mut impl Rng) -> TextureSpec {
    let base = base_spec(family);
    TextureSpec {
        frequency: base.frequency * rng.random_range(0.9..1.1),
        orientation: base.orientation + rng.random_range(-0.1..0.1),
        phase: rng.random_range(0.0..2.0 * PI),
        ..base
    }
}

/// Deterministic background patch of `spec` for `seed` (the seed picks the
/// window offset into the infinite texture).
pub fn gen_background(spec: &TextureSpec, m: usize, n: usize, seed_value: u64) -> Tensor<f32> {
    let mut rng = seed::rng(seed_value, &[seed::tag("offset")]);
    let offset = (rng.random_range(0.0..512.0f64).floor(), rng.random_range(0.0..512.0f64).floor());
    spec.patch(m, n, offset)
}

fn speckle(img: Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let gamma = Gamma::new(4.0, 0.25).expect("valid gamma");
    let data = img.data().iter().map(|&v| (v as f64 * gamma.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

/// A random shape whose circumscribed circle stays inside the central half
/// of the canvas.
pub fn sample_shape(min_scale: f64, max_scale: f64, rng: &mut impl Rng) -> ShapeSpec {
    let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
    let scale = if max_scale > min_scale { rng.random_range(min_scale..=max_scale) } else { max_scale };
    let slack = (0.25 - scale / 2.0).max(0.0);
    let mut centre = || 0.5 + if slack > 0.0 { rng.random_range(-slack..=slack) } else { 0.0 };
    let position = (centre(), centre());
    let vertices = (0..rng.random_range(3..=6)).map(|_| rng.random_range(0.6..=1.0)).collect();
    ShapeSpec { kind, scale, aspect: rng.random_range(0.5..=1.0), rotation: rng.random_range(0.0..PI), position, vertices }
}

/// Stratified split of `n` items: rounded 70% / 20% / rest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

fn assign_splits(count: usize, rng: &mut impl Rng) -> Vec<Split> {
    let (train, val, _) = split_counts(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut splits = vec![Split::Test; count];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Generate the whole dataset. A pure function of `(cfg, seed)`.
pub fn compose_dataset(cfg: &DataConfig, seed_value: u64) -> Result<Dataset> {
    if cfg.families == 0 || cfg.families > TextureFamily::ALL.len() {
        return Err(contract(format!("families must be in 1..=4, got {}", cfg.families)));
    }
    if !(cfg.min_scale > 0.0 && cfg.min_scale <= cfg.max_scale && cfg.max_scale <= 0.5) {
        return Err(contract(format!("object scales must satisfy 0 < min <= max <= 0.5, got {}..{}", cfg.min_scale, cfg.max_scale)));
    }
    if cfg.size < 8 {
        return Err(contract(format!("image size {} is too small", cfg.size)));
    }
    let s = cfg.size;
    let mut records = Vec::new();
    let background = |family: TextureFamily, rng: &mut rand_chacha::ChaCha8Rng| -> Tensor<f32> {
        let spec = sample_texture(family, rng);
        let img = gen_background(&spec, s, s, rng.random());
        match cfg.recipe {
            Recipe::Toy => img,
            Recipe::Sas => speckle(img, rng),
        }
    };
    for (f, &family) in TextureFamily::ALL.iter().take(cfg.families).enumerate() {
        let splits = assign_splits(cfg.backgrounds_per_family, &mut seed::rng(seed_value, &[seed::tag("split-bg"), f as u64]));
        for (i, split) in splits.into_iter().enumerate() {
            let mut rng = seed::rng(seed_value, &[seed::tag("background"), f as u64, i as u64]);
            records.push(ImageRecord {
                id: records.len(),
                kind: Kind::Background,
                split,
                family: Some(f),
                object_kind: None,
                image: background(family, &mut rng),
                mask: None,
                background: None,
                cluster: None,
            });
        }
        let splits = assign_splits(cfg.composites_per_family, &mut seed::rng(seed_value, &[seed::tag("split-comp"), f as u64]));
        for (i, split) in splits.into_iter().enumerate() {
            let mut rng = seed::rng(seed_value, &[seed::tag("composite"), f as u64, i as u64]);
            let bg = background(family, &mut rng);
            // Object drawn independently of the background family.
            let shape = sample_shape(cfg.min_scale, cfg.max_scale, &mut rng);
            let (_, mask) = gen_shape(&shape, s, s)?;
            let object = match cfg.recipe {
                Recipe::Toy => apply_gaussian_sq_intensity(&mask, &mut rng)?,
                Recipe::Sas => apply_intensity_gradient(&mask, &bg, &mut rng)?.0,
            };
            let image = alpha_blend(&object, &mask, &bg)?;
            records.push(ImageRecord {
                id: records.len(),
                kind: Kind::Composite,
                split,
                family: Some(f),
                object_kind: ShapeKind::ALL.iter().position(|&k| k == shape.kind),
                image,
                mask: Some(mask),
                background: Some(bg),
                cluster: None,
            });
        }
    }
    Ok(Dataset {
        channels: 1,
        height: s,
        width: s,
        family_names: TextureFamily::ALL.iter().take(cfg.families).map(|f| f.name().to_string()).collect(),
        object_names: ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        records,
    })
}

/// Divide by the crop mean, clip at 16, then rescale by 1/16 into [0, 1].
pub fn normalize_crop<T: Float>(crop: &Tensor<T>) -> Result<Tensor<T>> {
    let mean = crop.data().iter().map(|v| v.as_f64()).sum::<f64>() / crop.numel().max(1) as f64;
    if !(mean > 0.0) {
        return Err(contract(format!("crop mean must be positive, got {mean}")));
    }
    Ok(crop.map(|v| T::lit((v.as_f64() / mean).min(16.0) / 16.0)))
}
