//! One function per subcommand. Each reads its inputs, records them in the
//! run manifest and writes artifacts under the run directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use counterseg::clustering::{
    fit_clusters, label_dataset, load_clusterer, load_encoder, save_clusterer, save_encoder, train_encoder, training_backgrounds,
};
use counterseg::compositor::alpha_blend;
use counterseg::datagen::{compose_dataset, import_directory};
use counterseg::dataset::{load_bundle, save_bundle, Dataset, Kind};
use counterseg::divergence::{brute_force_wasserstein, ebsw, sample_slices, sliced_wasserstein, wasserstein_1d, Energy};
use counterseg::evalinfer::{evaluate, sliding_window_infer, MetricsReport};
use counterseg::image::{montage, read_png, write_png};
use counterseg::trainer::{load_network, save_network, train_from, MaskingNetwork};
use counterseg::{seed, Error, Result};
use tensorcore::{io as tsr, Tape, Tensor};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub seed: u64,
    pub out: &'a Path,
    pub manifest: Manifest,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_dataset(ctx: &mut Ctx, dir: &Path) -> Result<Dataset> {
    ctx.manifest.input(dir)?;
    load_bundle(dir)
}

pub fn datagen(ctx: &mut Ctx) -> Result<()> {
    let ds = compose_dataset(&ctx.cfg.data, ctx.seed)?;
    save_bundle(&ds, &ctx.out.join("dataset"))?;
    log::info!("wrote {} records", ds.records.len());
    Ok(())
}

pub fn import(ctx: &mut Ctx, src: &Path) -> Result<()> {
    ctx.manifest.input(src)?;
    let ds = import_directory(src, &ctx.cfg.import, ctx.seed)?;
    save_bundle(&ds, &ctx.out.join("dataset"))?;
    log::info!("imported {} records", ds.records.len());
    Ok(())
}

pub fn train_encoder_cmd(ctx: &mut Ctx, data: &Path) -> Result<()> {
    let ds = load_dataset(ctx, data)?;
    let bgs = training_backgrounds(&ds);
    if bgs.is_empty() {
        return Err(Error::Dataset("no training backgrounds".into()));
    }
    let (enc, losses) = train_encoder(&bgs, &ctx.cfg.encoder, ctx.seed)?;
    save_encoder(&ctx.out.join("encoder"), &enc, &ctx.cfg.encoder)?;
    write_json(&ctx.out.join("encoder_losses.json"), &losses)?;
    Ok(())
}

#[derive(Serialize)]
struct ClusterSummary {
    k: usize,
    sizes: Vec<usize>,
    rounds: usize,
}

/// Fit one clustering per `k` and write a montage of training backgrounds
/// per cluster (one row per cluster) for visual comparison.
pub fn cluster(ctx: &mut Ctx, data: &Path, encoder_dir: &Path, ks: &[usize]) -> Result<()> {
    let ds = load_dataset(ctx, data)?;
    ctx.manifest.input(encoder_dir)?;
    let (enc, enc_cfg) = load_encoder(encoder_dir)?;
    let bgs = training_backgrounds(&ds);
    if bgs.is_empty() {
        return Err(Error::Dataset("no training backgrounds".into()));
    }
    let per = ctx.cfg.cluster.montage_per_cluster.max(1);
    let mut summaries = Vec::new();
    for &k in ks {
        let (clusterer, fit) = fit_clusters(enc.clone(), enc_cfg.clone(), &bgs, k, &ctx.cfg.cluster.kmeans, ctx.seed)?;
        let dir = ctx.out.join(format!("k{k}"));
        save_clusterer(&dir, &clusterer)?;
        let blank = Tensor::zeros(bgs[0].shape().to_vec());
        let mut tiles = Vec::with_capacity(k * per);
        for c in 0..k {
            let members: Vec<&Tensor<f32>> = bgs.iter().zip(&fit.assignments).filter(|(_, &a)| a == c).map(|(b, _)| b).take(per).collect();
            tiles.extend((0..per).map(|i| members.get(i).map_or(blank.clone(), |m| (*m).clone())));
        }
        write_png(dir.join("montage.png"), &montage(&tiles, per)?)?;
        log::info!("k={k}: cluster sizes {:?}", fit.sizes());
        summaries.push(ClusterSummary { k, sizes: fit.sizes(), rounds: fit.rounds });
    }
    write_json(&ctx.out.join("clusters.json"), &summaries)?;
    Ok(())
}

fn labeled_dataset(ctx: &mut Ctx, data: &Path, clusters: &Path) -> Result<Dataset> {
    let mut ds = load_dataset(ctx, data)?;
    ctx.manifest.input(clusters)?;
    let clusterer = load_clusterer(clusters)?;
    if clusterer.k() != ctx.cfg.train.k {
        return Err(Error::Config(format!("train.k is {} but the clustering in {} has k = {}", ctx.cfg.train.k, clusters.display(), clusterer.k())));
    }
    label_dataset(&mut ds, &clusterer, ctx.cfg.cluster.patch, ctx.seed)?;
    Ok(ds)
}

#[derive(Serialize)]
struct LogLine<'a> {
    seed: u64,
    #[serde(flatten)]
    epoch: &'a counterseg::trainer::EpochLoss,
}

pub fn train(ctx: &mut Ctx, data: &Path, clusters: &Path) -> Result<()> {
    let ds = labeled_dataset(ctx, data, clusters)?;
    let net = MaskingNetwork::new(&ctx.cfg.train.net, ds.channels, seed::derive(ctx.seed, &[seed::tag("masknet")]))?;
    let log_path = ctx.out.join("train_log.jsonl");
    let mut log_file = OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?;
    let mut write_err = None;
    let seed_value = ctx.seed;
    let (net, report) = train_from(net, &ds, &ctx.cfg.train, ctx.seed, |e| {
        log::info!("epoch {}: train {:.6} val {:.6}", e.epoch, e.total, e.val_total);
        let line = serde_json::to_string(&LogLine { seed: seed_value, epoch: e }).expect("log line serializes");
        if let Err(err) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err.into());
    }
    save_network(&ctx.out.join("model"), &net)?;
    let checkpoint = serde_json::json!({
        "config_hash": ctx.cfg.hash()?,
        "seed": ctx.seed,
        "epoch": report.best_epoch,
        "val_loss": report.best_val,
    });
    write_json(&ctx.out.join("model").join("checkpoint.json"), &checkpoint)?;
    write_json(&ctx.out.join("loss_report.json"), &report)?;
    log::info!("best epoch {} with validation loss {:.6}", report.best_epoch, report.best_val);
    Ok(())
}

fn load_model(ctx: &mut Ctx, model: &Path) -> Result<MaskingNetwork> {
    ctx.manifest.input(model)?;
    load_network(model)
}

/// Masks for a scene image (`.png` or `.tsr`, sliding window) or for every
/// record of a dataset bundle directory.
pub fn infer(ctx: &mut Ctx, model: &Path, input: &Path) -> Result<()> {
    let net = load_model(ctx, model)?;
    let masker = |x: &Tensor<f32>| net.predict(x);
    let thr = ctx.cfg.infer.threshold;
    if input.is_dir() {
        let ds = load_dataset(ctx, input)?;
        let images: Vec<Tensor<f32>> = ds.records.iter().map(|r| r.image.clone()).collect();
        let mut masks = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let m = net.predict(&Tensor::stack(chunk)?)?;
            let per = m.numel() / chunk.len();
            for k in 0..chunk.len() {
                masks.push(Tensor::new(vec![1, ds.height, ds.width], m.data()[k * per..(k + 1) * per].to_vec())?);
            }
        }
        tsr::save(ctx.out.join("masks.tsr"), &Tensor::stack(&masks)?)?;
        let ids: Vec<usize> = ds.records.iter().map(|r| r.id).collect();
        write_json(&ctx.out.join("mask_ids.json"), &ids)?;
        write_png(ctx.out.join("masks.png"), &montage(&masks, 16)?)?;
        return Ok(());
    }
    ctx.manifest.input(input)?;
    let scene = match input.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(input)?,
        Some("tsr") => tsr::load(input)?,
        _ => return Err(Error::Format(format!("{}: expected a .png or .tsr scene, or a dataset directory", input.display()))),
    };
    let soft = sliding_window_infer(&scene, &masker, &ctx.cfg.infer.window)?;
    tsr::save(ctx.out.join("mask.tsr"), &soft)?;
    write_png(ctx.out.join("mask.png"), &soft)?;
    write_png(ctx.out.join("mask_binary.png"), &soft.map(|v| if v >= thr { 1.0 } else { 0.0 }))?;
    Ok(())
}

fn group_table(metrics: &MetricsReport) -> String {
    let width = metrics.per_group_iou.iter().map(|(g, _)| g.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  IoU\n", "group");
    for (g, v) in &metrics.per_group_iou {
        s += &format!("{g:<width$}  {:.1}%\n", v * 100.0);
    }
    s += &format!("{:<width$}  {:.1}%\n", "mean", metrics.iou * 100.0);
    s
}

pub fn eval(ctx: &mut Ctx, model: &Path, data: &Path) -> Result<MetricsReport> {
    let net = load_model(ctx, model)?;
    let ds = load_dataset(ctx, data)?;
    let masker = |x: &Tensor<f32>| net.predict(x);
    let metrics = evaluate(&ds, ctx.cfg.eval.split, &masker, ctx.cfg.eval.threshold)?;
    write_json(&ctx.out.join("metrics.json"), &metrics)?;
    fs::write(ctx.out.join("groups.txt"), group_table(&metrics))?;
    Ok(metrics)
}

/// Counterfactual mosaic plus per-group IoU table. For each cluster `c`,
/// three rows: composites from other clusters, their predicted masks, and
/// the objects pasted onto backgrounds of `c`.
pub fn report(ctx: &mut Ctx, model: &Path, data: &Path, clusters: &Path) -> Result<()> {
    let ds = labeled_dataset(ctx, data, clusters)?;
    let net = load_model(ctx, model)?;
    let split = ctx.cfg.eval.split;
    let per = 6;
    let mut rows = Vec::new();
    let mut rng = seed::rng(ctx.seed, &[seed::tag("report")]);
    for c in 0..ctx.cfg.train.k {
        let others: Vec<_> = ds.select(Kind::Composite, split).filter(|r| r.cluster != Some(c)).collect();
        let own: Vec<_> = ds.select(Kind::Background, split).filter(|r| r.cluster == Some(c)).collect();
        if others.is_empty() || own.is_empty() {
            log::warn!("cluster {c} has no {split:?} composites from other clusters or no backgrounds; skipped");
            continue;
        }
        let xs: Vec<Tensor<f32>> = (0..per).map(|_| others[rng.random_range(0..others.len())].image.clone()).collect();
        let rs: Vec<Tensor<f32>> = (0..per).map(|_| own[rng.random_range(0..own.len())].image.clone()).collect();
        let masks = net.predict(&Tensor::stack(&xs)?)?;
        let plane = ds.height * ds.width;
        let masks: Vec<Tensor<f32>> =
            (0..per).map(|i| Tensor::new(vec![1, ds.height, ds.width], masks.data()[i * plane..(i + 1) * plane].to_vec())).collect::<tensorcore::Result<_>>()?;
        let cfs: Vec<Tensor<f32>> = (0..per).map(|i| alpha_blend(&xs[i], &masks[i], &rs[i])).collect::<Result<_>>()?;
        rows.extend(xs);
        rows.extend(masks.iter().map(|m| Tensor::from_fn(vec![ds.channels, ds.height, ds.width], |i| m.data()[i % plane])));
        rows.extend(cfs);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no cluster has {split:?} data for a counterfactual mosaic")));
    }
    write_png(ctx.out.join("counterfactuals.png"), &montage(&rows, per)?)?;
    let masker = |x: &Tensor<f32>| net.predict(x);
    let metrics = evaluate(&ds, split, &masker, ctx.cfg.eval.threshold)?;
    let table = group_table(&metrics);
    print!("{table}");
    fs::write(ctx.out.join("groups.txt"), table)?;
    write_json(&ctx.out.join("metrics.json"), &metrics)?;
    Ok(())
}

/// Closed-form 1-D transport against brute-force enumeration on random
/// instances; returns the largest absolute difference.
pub fn divcheck_oracle(seed_value: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=2);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::<f64>::new();
        let fast = wasserstein_1d(tape.constant(Tensor::from_vec(xs.clone())), tape.constant(Tensor::from_vec(ys.clone())), p)?.item();
        let slow = brute_force_wasserstein(&Tensor::from_vec(xs), &Tensor::from_vec(ys), p)?;
        worst = worst.max((fast - slow).abs());
    }
    Ok(worst)
}

/// Point cloud from CSV: one point per row, one coordinate per column.
pub fn read_points(path: &Path) -> Result<Tensor<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let values: Vec<f64> = row
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("{}: row {} has non-numeric value {v:?}", path.display(), i + 1))))
            .collect::<Result<_>>()?;
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(Error::Format(format!("{}: row {} has {} columns, expected {}", path.display(), i + 1, values.len(), width.unwrap_or(0))));
        }
        data.extend(values);
    }
    let d = width.ok_or_else(|| Error::Format(format!("{}: no points", path.display())))?;
    Ok(Tensor::new(vec![data.len() / d, d], data)?)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct DivReport {
    pub n: usize,
    pub d: usize,
    pub p: u32,
    pub slices: usize,
    /// Exact `W_p^p` (closed form in 1-D, enumeration for up to 8 points).
    pub exact: Option<f64>,
    pub sliced: f64,
    pub ebsw: f64,
}

pub fn divcheck_points(x: &Tensor<f64>, y: &Tensor<f64>, p: u32, slices: usize, seed_value: u64) -> Result<DivReport> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if y.shape() != x.shape() {
        return Err(Error::Contract(format!("point clouds differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let tape = Tape::<f64>::new();
    let exact = if d == 1 {
        Some(wasserstein_1d(tape.constant(x.clone().reshape(vec![n])?), tape.constant(y.clone().reshape(vec![n])?), p)?.item())
    } else if n <= 8 {
        Some(brute_force_wasserstein(x, y, p)?)
    } else {
        None
    };
    let set = sample_slices::<f64>(d, slices, seed_value)?;
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    Ok(DivReport {
        n,
        d,
        p,
        slices,
        exact,
        sliced: sliced_wasserstein(xv, yv, p, &set)?.item(),
        ebsw: ebsw(xv, yv, p, &set, Energy::Exponential, false)?.item(),
    })
}
