//! Masking network training. Each iteration draws, for every background
//! cluster, composites from the other clusters, backgrounds of the cluster
//! and composites of the cluster; sums the per-cluster divergence and
//! background (and optionally quantile) losses; and takes one optimizer step.

mod losses;
mod unet;

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{Adam, Bound, Float, Tape, Tensor, Var};

pub use losses::{loss_background, loss_conditional_divergence, loss_quantile, quantile_selection, DivergenceSpec};
pub use unet::{MaskingNetwork, NetConfig, UNet};

use crate::checkpoint::{load_meta, load_params, save_params};
use crate::compositor::alpha_blend_var;
use crate::dataset::{Dataset, ImageRecord, Kind, Split};
use crate::divergence::{sample_slices, Energy, SliceSet};
use crate::error::{contract, Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of background clusters.
    pub k: usize,
    /// Images per mini-batch, per cluster and batch role.
    pub batch_size: usize,
    /// Random projections per divergence evaluation.
    pub slices: usize,
    /// Transport order.
    pub p: u32,
    pub energy: Energy,
    pub detach_weights: bool,
    pub quantile_loss: bool,
    pub quantile: f64,
    /// Multiplier on the background loss. The divergence of flattened images
    /// scales like a per-pixel mean while the background loss sums over
    /// pixels, so values well below 1 balance the two.
    pub background_weight: f64,
    /// Multiplier on the quantile loss, which also sums over pixels.
    pub quantile_weight: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; by default enough to visit every training
    /// composite about once.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    /// Fixed validation batch draws per evaluation.
    pub val_draws: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 4,
            batch_size: 64,
            slices: 1000,
            p: 2,
            energy: Energy::Exponential,
            detach_weights: false,
            quantile_loss: false,
            quantile: 0.8,
            background_weight: 1.0,
            quantile_weight: 1.0,
            epochs: 30,
            steps_per_epoch: None,
            lr: 1e-3,
            val_draws: 2,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return fail(format!("k must be at least 2, got {}", self.k));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return fail(format!("quantile must lie in (0, 1), got {}", self.quantile));
        }
        if self.p != 1 && self.p != 2 {
            return fail(format!("p must be 1 or 2, got {}", self.p));
        }
        if self.slices == 0 || self.epochs == 0 || self.val_draws == 0 || self.steps_per_epoch == Some(0) {
            return fail("slices, epochs, val_draws and steps_per_epoch must be positive".into());
        }
        if !(self.background_weight >= 0.0 && self.background_weight.is_finite() && self.quantile_weight >= 0.0 && self.quantile_weight.is_finite()) {
            return fail(format!("loss weights must be finite and non-negative, got {} and {}", self.background_weight, self.quantile_weight));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    fn divergence(&self) -> DivergenceSpec {
        DivergenceSpec { p: self.p, energy: self.energy, detach_weights: self.detach_weights }
    }
}

/// The three mini-batches of one cluster term, `[B, C, H, W]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBatch<T> {
    pub cluster: usize,
    /// Composites whose background belongs to another cluster.
    pub x_notc: Tensor<T>,
    /// Background-only images of this cluster.
    pub r_c: Tensor<T>,
    /// Composites of this cluster.
    pub x_c: Tensor<T>,
    /// Ground-truth masks of `x_notc`, when every record has one.
    pub gt_notc: Option<Tensor<T>>,
}

impl ClusterBatch<f32> {
    pub fn cast<U: Float>(&self) -> ClusterBatch<U> {
        ClusterBatch {
            cluster: self.cluster,
            x_notc: self.x_notc.cast(),
            r_c: self.r_c.cast(),
            x_c: self.x_c.cast(),
            gt_notc: self.gt_notc.as_ref().map(|m| m.cast()),
        }
    }
}

/// Records of one split grouped by cluster.
struct Pools<'a> {
    composites: Vec<Vec<&'a ImageRecord>>,
    backgrounds: Vec<Vec<&'a ImageRecord>>,
}

impl<'a> Pools<'a> {
    fn new(ds: &'a Dataset, split: Split, k: usize) -> Result<Self> {
        let mut composites = vec![Vec::new(); k];
        let mut backgrounds = vec![Vec::new(); k];
        for r in ds.records.iter().filter(|r| r.split == split) {
            let c = r.cluster.ok_or_else(|| Error::Dataset(format!("record {} has no cluster label", r.id)))?;
            if c >= k {
                return Err(Error::Dataset(format!("record {} has cluster {c} but k = {k}", r.id)));
            }
            match r.kind {
                Kind::Composite => composites[c].push(r),
                Kind::Background => backgrounds[c].push(r),
            }
        }
        Ok(Self { composites, backgrounds })
    }

    fn others(&self, c: usize) -> Vec<&'a ImageRecord> {
        self.composites.iter().enumerate().filter(|&(j, _)| j != c).flat_map(|(_, v)| v.iter().copied()).collect()
    }
}

/// Draw `b` items: without replacement from a large enough pool, with
/// replacement from a pool of at least `max(4, b/8)`, otherwise nothing.
fn draw<'a>(pool: &[&'a ImageRecord], b: usize, rng: &mut impl Rng) -> Option<Vec<&'a ImageRecord>> {
    if pool.len() >= b {
        Some(sample_indices(rng, pool.len(), b).into_iter().map(|i| pool[i]).collect())
    } else if pool.len() >= (b / 8).max(4) {
        Some((0..b).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    } else {
        None
    }
}

fn stack(records: &[&ImageRecord], pick: impl Fn(&ImageRecord) -> Option<&Tensor<f32>>) -> Result<Option<Tensor<f32>>> {
    let items: Option<Vec<Tensor<f32>>> = records.iter().map(|r| pick(r).cloned()).collect();
    items.map(|v| Tensor::stack(&v)).transpose().map_err(Error::from)
}

/// Mini-batches for every cluster with enough data in `split`. Clusters
/// that fall short are skipped with a warning.
pub fn sample_cluster_batches(ds: &Dataset, split: Split, k: usize, b: usize, seed_value: u64) -> Result<Vec<ClusterBatch<f32>>> {
    let pools = Pools::new(ds, split, k)?;
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut rng = seed::rng(seed_value, &[seed::tag("cluster-batch"), c as u64]);
        let others = pools.others(c);
        let picks = (
            draw(&others, b, &mut rng),
            draw(&pools.backgrounds[c], b, &mut rng),
            draw(&pools.composites[c], b, &mut rng),
        );
        let (Some(notc), Some(bg), Some(comp)) = picks else {
            log::warn!(
                "cluster {c}: too few {split:?} items for a batch of {b} (other composites {}, backgrounds {}, composites {}); term skipped",
                others.len(),
                pools.backgrounds[c].len(),
                pools.composites[c].len()
            );
            continue;
        };
        out.push(ClusterBatch {
            cluster: c,
            x_notc: stack(&notc, |r| Some(&r.image))?.expect("images present"),
            r_c: stack(&bg, |r| Some(&r.image))?.expect("images present"),
            x_c: stack(&comp, |r| Some(&r.image))?.expect("images present"),
            gt_notc: stack(&notc, |r| r.mask.as_ref())?,
        });
    }
    Ok(out)
}

/// Scalar loss components of one evaluation, each as it enters the total
/// (weights applied).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub divergence: f64,
    pub background: f64,
    pub quantile: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.divergence + self.background + self.quantile
    }

    fn add(&mut self, o: &LossTerms) {
        self.divergence += o.divergence;
        self.background += o.background;
        self.quantile += o.quantile;
    }

    fn scale(&self, s: f64) -> LossTerms {
        LossTerms { divergence: self.divergence * s, background: self.background * s, quantile: self.quantile * s }
    }
}

/// Loss of one cluster term for the masks `m_x` (of `x_notc`) and `m_r`
/// (of `r_c`), returned as a tape scalar plus its components.
pub fn cluster_loss<'t, T: Float>(
    tape: &'t Tape<T>,
    batch: &ClusterBatch<T>,
    m_x: Var<'t, T>,
    m_r: Var<'t, T>,
    slices: &SliceSet<T>,
    cfg: &TrainConfig,
) -> Result<(Var<'t, T>, LossTerms)> {
    let x_notc = tape.constant(batch.x_notc.clone());
    let r_c = tape.constant(batch.r_c.clone());
    let x_c = tape.constant(batch.x_c.clone());
    let ld = loss_conditional_divergence(x_notc, m_x, r_c, x_c, slices, cfg.divergence())?;
    let lbg = loss_background(m_r)?.mul_scalar(T::lit(cfg.background_weight));
    let mut terms = LossTerms { divergence: ld.item().as_f64(), background: lbg.item().as_f64(), quantile: 0.0 };
    let mut total = ld.add(lbg)?;
    if cfg.quantile_loss {
        let cf = alpha_blend_var(x_notc, m_x, r_c)?;
        let lq = loss_quantile(cf, r_c, m_x, cfg.quantile)?.mul_scalar(T::lit(cfg.quantile_weight));
        terms.quantile = lq.item().as_f64();
        total = total.add(lq)?;
    }
    Ok((total, terms))
}

/// Masks of `x_notc` and `r_c` from one network pass over both.
pub fn network_masks<'t, T: Float>(
    unet: &UNet,
    p: &Bound<'t, T>,
    tape: &'t Tape<T>,
    batch: &ClusterBatch<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let b = batch.x_notc.shape()[0];
    let both = Var::concat(&[tape.constant(batch.x_notc.clone()), tape.constant(batch.r_c.clone())], 0)?;
    let masks = unet.forward(p, both)?;
    Ok((masks.narrow(0, 0, b)?, masks.narrow(0, b, batch.r_c.shape()[0])?))
}

fn slice_dim(ds: &Dataset) -> usize {
    ds.channels * ds.height * ds.width
}

fn slices_for(ds: &Dataset, cfg: &TrainConfig, seed_value: u64) -> Result<SliceSet<f32>> {
    sample_slices(slice_dim(ds), cfg.slices, seed_value)
}

/// Validation loss components: the full objective on the validation split,
/// averaged over `val_draws` fixed batch draws with fixed slices.
pub fn validation_terms(net: &MaskingNetwork, ds: &Dataset, cfg: &TrainConfig, seed_value: u64) -> Result<LossTerms> {
    let mut sum = LossTerms::default();
    let mut evaluated = 0;
    for draw in 0..cfg.val_draws {
        let batches = sample_cluster_batches(ds, Split::Val, cfg.k, cfg.batch_size, seed::derive(seed_value, &[seed::tag("val"), draw as u64]))?;
        for batch in &batches {
            let slices = slices_for(ds, cfg, seed::derive(seed_value, &[seed::tag("val-slices"), batch.cluster as u64]))?;
            let tape = Tape::new();
            let p = net.params.bind(&tape, false);
            let (m_x, m_r) = network_masks(&net.unet, &p, &tape, batch)?;
            let (_, terms) = cluster_loss(&tape, batch, m_x, m_r, &slices, cfg)?;
            sum.add(&terms);
        }
        evaluated += !batches.is_empty() as usize;
    }
    if evaluated == 0 {
        return Err(Error::Dataset("no cluster has enough validation data".into()));
    }
    Ok(sum.scale(1.0 / cfg.val_draws as f64))
}

/// Total validation loss (see [`validation_terms`]).
pub fn validate(net: &MaskingNetwork, ds: &Dataset, cfg: &TrainConfig, seed_value: u64) -> Result<f64> {
    Ok(validation_terms(net, ds, cfg, seed_value)?.total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub batch_seed: u64,
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub terms: LossTerms,
    pub total: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub epochs: Vec<EpochLoss>,
    pub steps: Vec<StepLoss>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Steps per epoch when not configured: one pass over the training
/// composites at `k · batch_size` per step.
pub fn default_steps_per_epoch(ds: &Dataset, cfg: &TrainConfig) -> usize {
    ds.count(Kind::Composite, Split::Train).div_ceil(cfg.k * cfg.batch_size).max(1)
}

/// One optimizer step: per-cluster gradients are accumulated in cluster
/// order, then applied once.
fn train_step(net: &mut MaskingNetwork, opt: &mut Adam<f32>, ds: &Dataset, cfg: &TrainConfig, batch_seed: u64) -> Result<LossTerms> {
    let batches = sample_cluster_batches(ds, Split::Train, cfg.k, cfg.batch_size, batch_seed)?;
    if batches.is_empty() {
        return Err(Error::Dataset("no cluster has enough training data for a batch".into()));
    }
    let mut grads: Option<Vec<Tensor<f32>>> = None;
    let mut terms = LossTerms::default();
    for batch in &batches {
        let slices = slices_for(ds, cfg, seed::derive(batch_seed, &[seed::tag("slices"), batch.cluster as u64]))?;
        let tape = Tape::new();
        let p = net.params.bind(&tape, true);
        let (m_x, m_r) = network_masks(&net.unet, &p, &tape, batch)?;
        let (loss, t) = cluster_loss(&tape, batch, m_x, m_r, &slices, cfg)?;
        if !t.total().is_finite() {
            log::error!("non-finite loss {t:?} in cluster {} (batch seed {batch_seed:#018x})", batch.cluster);
            return Err(Error::Numeric(format!(
                "non-finite training loss in cluster {} (batch seed {batch_seed:#018x})",
                batch.cluster
            )));
        }
        terms.add(&t);
        let g = p.grads(&tape.backward(loss)?);
        grads = Some(match grads {
            None => g,
            Some(acc) => acc.into_iter().zip(g).map(|(a, b)| a.zip_map(&b, |x, y| x + y)).collect::<tensorcore::Result<_>>()?,
        });
    }
    opt.step(&mut net.params, &grads.expect("at least one batch"))?;
    Ok(terms)
}

/// [`train`] starting from `net`, calling `on_epoch` after every epoch.
pub fn train_from(
    mut net: MaskingNetwork,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed_value: u64,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(MaskingNetwork, LossReport)> {
    cfg.validate()?;
    ds.validate()?;
    if net.in_channels != ds.channels {
        return Err(contract(format!("network takes {} channels, dataset has {}", net.in_channels, ds.channels)));
    }
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| default_steps_per_epoch(ds, cfg));
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut report = LossReport { best_val: f64::INFINITY, ..Default::default() };
    let mut best = net.params.clone();
    for epoch in 0..cfg.epochs {
        let mut sum = LossTerms::default();
        for step in 0..steps {
            let batch_seed = seed::derive(seed_value, &[seed::tag("batch"), epoch as u64, step as u64]);
            let terms = train_step(&mut net, &mut opt, ds, cfg, batch_seed)?;
            log::debug!("epoch {epoch} step {step}: {terms:?}");
            report.steps.push(StepLoss { epoch, step, batch_seed, terms, total: terms.total() });
            sum.add(&terms);
        }
        let terms = sum.scale(1.0 / steps as f64);
        let val_total = validate(&net, ds, cfg, seed_value)?;
        let record = EpochLoss { epoch, terms, total: terms.total(), val_total };
        log::info!(
            "epoch {epoch}: divergence {:.5} background {:.5} quantile {:.5} val {:.5}",
            terms.divergence,
            terms.background,
            terms.quantile,
            val_total
        );
        on_epoch(&record);
        if val_total < report.best_val {
            report.best_val = val_total;
            report.best_epoch = epoch;
            best = net.params.clone();
        }
        report.epochs.push(record);
    }
    net.params = best;
    Ok((net, report))
}

/// Train a fresh masking network on the labelled dataset and return the
/// weights with the lowest validation loss.
pub fn train(ds: &Dataset, cfg: &TrainConfig, seed_value: u64) -> Result<(MaskingNetwork, LossReport)> {
    let net = MaskingNetwork::new(&cfg.net, ds.channels, seed::derive(seed_value, &[seed::tag("masknet")]))?;
    train_from(net, ds, cfg, seed_value, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetMeta {
    net: NetConfig,
    in_channels: usize,
}

pub fn save_network(dir: &Path, net: &MaskingNetwork) -> Result<()> {
    let meta = NetMeta { net: net.config.clone(), in_channels: net.in_channels };
    save_params(dir, &net.params, serde_json::to_value(meta)?)
}

pub fn load_network(dir: &Path) -> Result<MaskingNetwork> {
    let meta: NetMeta = serde_json::from_value(load_meta(dir)?)?;
    let mut net = MaskingNetwork::new(&meta.net, meta.in_channels, 0)?;
    load_params(dir, &mut net.params)?;
    Ok(net)
}
