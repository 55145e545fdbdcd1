//! Background representation learning and balanced clustering. The cluster
//! label of an image stands in for its (unobserved) background class.

mod encoder;
mod transport;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{io as tsr, Tensor};

pub use encoder::{
    nt_xent, random_resized_crop, train_autoencoder, train_contrastive_encoder, EncoderConfig, EncoderKind, EncoderModel,
    EpochLosses, NormChoice,
};
pub use transport::{sinkhorn, sinkhorn_kmeans, ClusterModel, KMeansConfig, KMeansFit, TransportPlan};

use crate::checkpoint::{load_meta, load_params, params_hash, save_params};
use crate::dataset::{Dataset, ImageRecord, Kind, Split};
use crate::error::{contract, Error, Result};
use crate::image::{crop, resize_bilinear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchStrategy {
    /// Border crop of a quarter of the side length, resized to full size.
    CornerCrop,
    /// The background stored alongside the composite.
    #[default]
    PairedFile,
}

/// Background image used to place `record` in a cluster. Background-only
/// records are their own patch.
pub fn background_patch_for(record: &ImageRecord, strategy: PatchStrategy, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if record.kind == Kind::Background {
        return Ok(record.image.clone());
    }
    match strategy {
        PatchStrategy::PairedFile => record
            .background
            .clone()
            .ok_or_else(|| Error::Dataset(format!("composite {} has no paired background", record.id))),
        PatchStrategy::CornerCrop => {
            let (_, h, w) = crate::image::dims(&record.image)?;
            let (ch, cw) = ((h / 4).max(1), (w / 4).max(1));
            // Four corners and four edge midpoints.
            let spot = rng.random_range(0..8usize);
            let rows = [0, (h - ch) / 2, h - ch];
            let cols = [0, (w - cw) / 2, w - cw];
            let (r, c) = match spot {
                0..=2 => (0, spot),
                3 => (1, 0),
                4 => (1, 2),
                _ => (2, spot - 5),
            };
            resize_bilinear(&crop(&record.image, rows[r], cols[c], ch, cw)?, h, w)
        }
    }
}

/// Trained encoder plus centroids in its embedding space.
#[derive(Debug, Clone)]
pub struct BackgroundClusterer {
    pub encoder: EncoderModel,
    pub encoder_config: EncoderConfig,
    pub clusters: ClusterModel,
}

impl BackgroundClusterer {
    /// Embeddings as used for clustering: unit rows for contrastive encoders.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Tensor<f64>> {
        embed(&self.encoder, self.encoder_config.kind, images)
    }

    /// Zero-based label of the nearest centroid; the patch is resized to the
    /// encoder input first.
    pub fn assign(&self, patch: &Tensor<f32>) -> Result<usize> {
        assign_cluster(patch, self)
    }

    pub fn k(&self) -> usize {
        self.clusters.k()
    }
}

fn embed(encoder: &EncoderModel, kind: EncoderKind, images: &Tensor<f32>) -> Result<Tensor<f64>> {
    match kind {
        EncoderKind::Autoencoder => encoder.encode(images),
        EncoderKind::Contrastive => encoder::normalized_embeddings(encoder, images),
    }
}

pub fn assign_cluster(patch: &Tensor<f32>, clusterer: &BackgroundClusterer) -> Result<usize> {
    let s = clusterer.encoder.size;
    let resized = resize_bilinear(patch, s, s)?;
    let shape = [1, resized.shape()[0], s, s];
    let z = clusterer.embed(&resized.reshape(shape.to_vec())?)?;
    Ok(clusterer.clusters.nearest(z.data()))
}

/// Train the configured encoder on `backgrounds`.
pub fn train_encoder(backgrounds: &[Tensor<f32>], cfg: &EncoderConfig, seed: u64) -> Result<(EncoderModel, EpochLosses)> {
    match cfg.kind {
        EncoderKind::Autoencoder => train_autoencoder(backgrounds, cfg, seed),
        EncoderKind::Contrastive => train_contrastive_encoder(backgrounds, cfg, seed),
    }
}

/// Cluster the training backgrounds' embeddings into `k` balanced groups.
pub fn fit_clusters(
    encoder: EncoderModel,
    encoder_config: EncoderConfig,
    backgrounds: &[Tensor<f32>],
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<(BackgroundClusterer, KMeansFit)> {
    if backgrounds.is_empty() {
        return Err(contract("no backgrounds to cluster"));
    }
    let z = embed(&encoder, encoder_config.kind, &Tensor::stack(backgrounds)?)?;
    let fit = sinkhorn_kmeans(&z, k, cfg, seed)?;
    Ok((BackgroundClusterer { encoder, encoder_config, clusters: fit.model.clone() }, fit))
}

/// Set `cluster` on every record: backgrounds from their own pixels,
/// composites from their background patch.
pub fn label_dataset(dataset: &mut Dataset, clusterer: &BackgroundClusterer, strategy: PatchStrategy, seed: u64) -> Result<()> {
    for rec in dataset.records.iter_mut() {
        let mut rng = crate::seed::rng(seed, &[crate::seed::tag("patch"), rec.id as u64]);
        let patch = background_patch_for(rec, strategy, &mut rng)?;
        rec.cluster = Some(clusterer.assign(&patch)?);
    }
    Ok(())
}

/// Training backgrounds of a dataset, in record order.
pub fn training_backgrounds(dataset: &Dataset) -> Vec<Tensor<f32>> {
    dataset.select(Kind::Background, Split::Train).map(|r| r.image.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterHeader {
    k: usize,
    eps: f64,
    encoder_hash: String,
    in_channels: usize,
    size: usize,
    encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    config: EncoderConfig,
    in_channels: usize,
    size: usize,
}

/// Persist a trained encoder (weights plus the geometry and config it was built with).
pub fn save_encoder(dir: &Path, encoder: &EncoderModel, cfg: &EncoderConfig) -> Result<()> {
    let meta = EncoderMeta { config: cfg.clone(), in_channels: encoder.in_channels, size: encoder.size };
    save_params(dir, &encoder.params, serde_json::to_value(meta)?)
}

pub fn load_encoder(dir: &Path) -> Result<(EncoderModel, EncoderConfig)> {
    let meta: EncoderMeta = serde_json::from_value(load_meta(dir)?)?;
    let mut encoder = EncoderModel::new(&meta.config, meta.in_channels, meta.size, 0)?;
    load_params(dir, &mut encoder.params)?;
    Ok((encoder, meta.config))
}

/// Persist encoder weights, centroids and a small JSON header under `dir`.
pub fn save_clusterer(dir: &Path, c: &BackgroundClusterer) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_params(&dir.join("encoder"), &c.encoder.params, serde_json::to_value(&c.encoder_config)?)?;
    tsr::save(dir.join("centroids.tsr"), &c.clusters.centroids)?;
    let header = ClusterHeader {
        k: c.k(),
        eps: c.clusters.sinkhorn_eps,
        encoder_hash: params_hash(&c.encoder.params)?,
        in_channels: c.encoder.in_channels,
        size: c.encoder.size,
        encoder: c.encoder_config.clone(),
    };
    fs::write(dir.join("clusters.json"), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn load_clusterer(dir: &Path) -> Result<BackgroundClusterer> {
    let header: ClusterHeader = serde_json::from_str(&fs::read_to_string(dir.join("clusters.json"))?)?;
    let mut encoder = EncoderModel::new(&header.encoder, header.in_channels, header.size, 0)?;
    load_params(&dir.join("encoder"), &mut encoder.params)?;
    if params_hash(&encoder.params)? != header.encoder_hash {
        return Err(Error::Format("cluster header refers to a different encoder".into()));
    }
    let centroids: Tensor<f64> = tsr::load(dir.join("centroids.tsr"))?;
    if centroids.shape() != [header.k, header.encoder.latent] {
        return Err(Error::Format(format!("centroids have shape {:?}", centroids.shape())));
    }
    Ok(BackgroundClusterer {
        encoder,
        encoder_config: header.encoder,
        clusters: ClusterModel { centroids, sinkhorn_eps: header.eps },
    })
}
