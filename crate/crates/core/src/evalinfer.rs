//! Pixel-level segmentation metrics and overlapping sliding-window inference
//! over scenes larger than the network input.

use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

use crate::datagen::normalize_crop;
use crate::dataset::{Dataset, Kind, Split};
use crate::error::{contract, Result};
use crate::image::{crop, dims, resize_bilinear};

/// Masks for a `[N, C, H, W]` batch, returned as `[N, 1, H, W]`.
pub type Masker<'a> = dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>> + 'a;

fn binarize(values: &[f32], threshold: f32) -> impl Iterator<Item = bool> + '_ {
    values.iter().map(move |&v| v >= threshold)
}

fn check_same(pred: &[f32], gt: &[f32]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(contract(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// Intersection over union of `pred >= threshold` and the binary `gt`.
/// Two empty masks score 1.
pub fn iou(pred: &[f32], gt: &[f32], threshold: f32) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in binarize(pred, threshold).zip(binarize(gt, 0.5)) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// 1-based midranks of `scores`, ties sharing the average rank.
fn midranks(scores: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann-Whitney statistic. NaN when `gt`
/// holds a single class.
pub fn aucroc(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_same(pred, gt)?;
    let ranks = midranks(pred);
    let pos: Vec<bool> = binarize(gt, 0.5).collect();
    let n_pos = pos.iter().filter(|&&p| p).count() as f64;
    let n_neg = pos.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Ok(f64::NAN);
    }
    let rank_sum: f64 = ranks.iter().zip(&pos).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Average precision `Σ (R_k − R_{k−1}) P_k` over the distinct score
/// thresholds, highest first. NaN when `gt` has no positives.
pub fn average_precision(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_same(pred, gt)?;
    let pos: Vec<bool> = binarize(gt, 0.5).collect();
    let n_pos = pos.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(f64::NAN);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let (mut tp, mut ap, mut prev_recall) = (0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        // Everything tied with the current score crosses the threshold together.
        let score = pred[order[i]];
        while i < order.len() && pred[order[i]] == score {
            tp += pos[order[i]] as usize;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / i as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of background pixels whose mask is `>= threshold`, averaged
/// over `backgrounds` (`[C, H, W]` each).
pub fn background_fpr(masker: &Masker, backgrounds: &[Tensor<f32>], threshold: f32) -> Result<f64> {
    if backgrounds.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in backgrounds.chunks(64) {
        let masks = masker(&Tensor::stack(chunk)?)?;
        let per = masks.numel() / chunk.len();
        for m in masks.data().chunks(per) {
            total += binarize(m, threshold).filter(|&b| b).count() as f64 / per as f64;
        }
    }
    Ok(total / backgrounds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Crop side in scene pixels.
    pub crop: usize,
    /// Fractional overlap between neighbouring crops, in [0, 1).
    pub overlap: f64,
    /// Network input side the crops are resized to.
    pub input: usize,
    /// Mean-divide and clip each crop before prediction.
    pub normalize: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { crop: 128, overlap: 0.9, input: 64, normalize: true }
    }
}

/// Crop offsets along an axis of length `len`: a regular grid with the last
/// crop flush with the far edge.
fn offsets(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - crop).step_by(stride).collect();
    if *v.last().expect("non-empty") != len - crop {
        v.push(len - crop);
    }
    v
}

/// Full-scene soft mask `[1, H, W]` for a `[C, H, W]` scene: every pixel is
/// the mean of the predictions of the crops covering it.
pub fn sliding_window_infer(scene: &Tensor<f32>, masker: &Masker, cfg: &WindowConfig) -> Result<Tensor<f32>> {
    let (_, h, w) = dims(scene)?;
    if cfg.crop == 0 || cfg.input == 0 || !(0.0..1.0).contains(&cfg.overlap) {
        return Err(contract(format!("invalid window config {cfg:?}")));
    }
    if h < cfg.crop || w < cfg.crop {
        return Err(contract(format!("scene {h}x{w} is smaller than the {0}x{0} crop", cfg.crop)));
    }
    let stride = ((cfg.crop as f64 * (1.0 - cfg.overlap)).round() as usize).max(1);
    let mut windows = Vec::new();
    for &top in &offsets(h, cfg.crop, stride) {
        for &left in &offsets(w, cfg.crop, stride) {
            windows.push((top, left));
        }
    }
    let mut sum = vec![0f64; h * w];
    let mut count = vec![0u32; h * w];
    for group in windows.chunks(64) {
        let mut inputs = Vec::with_capacity(group.len());
        for &(top, left) in group {
            let mut c = crop(scene, top, left, cfg.crop, cfg.crop)?;
            if cfg.normalize {
                c = normalize_crop(&c)?;
            }
            inputs.push(resize_bilinear(&c, cfg.input, cfg.input)?);
        }
        let masks = masker(&Tensor::stack(&inputs)?)?;
        if masks.shape() != [group.len(), 1, cfg.input, cfg.input] {
            return Err(contract(format!("masker returned {:?} for {} crops", masks.shape(), group.len())));
        }
        let per = cfg.input * cfg.input;
        for (k, &(top, left)) in group.iter().enumerate() {
            let m = Tensor::new(vec![1, cfg.input, cfg.input], masks.data()[k * per..(k + 1) * per].to_vec())?;
            let m = resize_bilinear(&m, cfg.crop, cfg.crop)?;
            for y in 0..cfg.crop {
                for x in 0..cfg.crop {
                    let i = (top + y) * w + left + x;
                    sum[i] += m.data()[y * cfg.crop + x] as f64;
                    count[i] += 1;
                }
            }
        }
    }
    Ok(Tensor::new(vec![1, h, w], sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect())?)
}

/// Metrics on one split. IoU is the mean over composite images; AUCROC and
/// AP pool all composite pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub aucroc: f64,
    pub average_precision: f64,
    pub background_fpr: f64,
    pub composites: usize,
    pub backgrounds: usize,
    /// Mean IoU per background family (or cluster when families are unknown).
    pub per_group_iou: Vec<(String, f64)>,
}

pub fn evaluate(ds: &Dataset, split: Split, masker: &Masker, threshold: f32) -> Result<MetricsReport> {
    let comps: Vec<_> = ds.select(Kind::Composite, split).filter(|r| r.mask.is_some()).collect();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut ious = Vec::with_capacity(comps.len());
    let mut groups: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for chunk in comps.chunks(64) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|r| r.image.clone()).collect();
        let masks = masker(&Tensor::stack(&images)?)?;
        let per = masks.numel() / chunk.len();
        for (r, m) in chunk.iter().zip(masks.data().chunks(per)) {
            let gt = r.mask.as_ref().expect("filtered").data();
            let v = iou(m, gt, threshold)?;
            ious.push(v);
            let name = match (r.family, r.cluster) {
                (Some(f), _) => ds.family_names.get(f).cloned().unwrap_or_else(|| format!("family {f}")),
                (None, Some(c)) => format!("cluster {c}"),
                _ => "all".into(),
            };
            let g = groups.entry(name).or_default();
            g.0 += v;
            g.1 += 1;
            preds.extend_from_slice(m);
            gts.extend_from_slice(gt);
        }
    }
    let backgrounds: Vec<Tensor<f32>> = ds.select(Kind::Background, split).map(|r| r.image.clone()).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(MetricsReport {
        iou: mean(&ious),
        aucroc: aucroc(&preds, &gts)?,
        average_precision: average_precision(&preds, &gts)?,
        background_fpr: background_fpr(masker, &backgrounds, threshold)?,
        composites: comps.len(),
        backgrounds: backgrounds.len(),
        per_group_iou: groups.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(iou(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &a, 0.5).unwrap(), 0.0);
        assert_eq!(iou(&[0.0; 4], &[0.0; 4], 0.5).unwrap(), 1.0);
        assert_eq!(iou(&[0.0; 4], &a, 0.5).unwrap(), 0.0);
        // 4x4: gt is the top-left 2x2, prediction adds four more pixels.
        let gt: Vec<f32> = (0..16).map(|i| ((i / 4) < 2 && (i % 4) < 2) as u8 as f32).collect();
        let pred: Vec<f32> = (0..16).map(|i| ((i / 4) < 2 && (i % 4) < 4) as u8 as f32 * 0.9).collect();
        assert_eq!(iou(&pred, &gt, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn auc_examples() {
        let gt = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(aucroc(&[0.1, 0.2, 0.8, 0.9], &gt).unwrap(), 1.0);
        assert_eq!(aucroc(&[0.3; 4], &gt).unwrap(), 0.5);
        assert!(aucroc(&[0.1, 0.2], &[1.0, 1.0]).unwrap().is_nan());
    }

    #[test]
    fn ap_examples() {
        let gt = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(average_precision(&[0.1, 0.2, 0.8, 0.9], &gt).unwrap(), 1.0);
        // Reversed: positives found at ranks 3 and 4 -> (1/3 + 2/4) / 2.
        let rev = average_precision(&[0.9, 0.8, 0.2, 0.1], &gt).unwrap();
        assert!((rev - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        assert!(average_precision(&[0.1, 0.2], &[0.0, 0.0]).unwrap().is_nan());
        // All tied: one threshold, precision 1/2 at recall 1.
        assert_eq!(average_precision(&[0.5; 4], &gt).unwrap(), 0.5);
    }

    #[test]
    fn fpr_of_constant_maskers() {
        let bgs = vec![Tensor::<f32>::zeros(vec![1, 4, 4]); 3];
        let zero = |x: &Tensor<f32>| Ok(Tensor::zeros(vec![x.shape()[0], 1, 4, 4]));
        let one = |x: &Tensor<f32>| Ok(Tensor::ones(vec![x.shape()[0], 1, 4, 4]));
        assert_eq!(background_fpr(&zero, &bgs, 0.5).unwrap(), 0.0);
        assert_eq!(background_fpr(&one, &bgs, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn window_offsets_cover_the_scene() {
        assert_eq!(offsets(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(offsets(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(offsets(4, 4, 1), vec![0]);
    }

    #[test]
    fn constant_masker_is_invariant() {
        let scene = Tensor::from_fn(vec![1, 40, 52], |i| 0.1 + (i % 13) as f32 / 20.0);
        let masker = |x: &Tensor<f32>| Ok(Tensor::full(vec![x.shape()[0], 1, x.shape()[2], x.shape()[3]], 0.3));
        for overlap in [0.0, 0.5, 0.9] {
            let cfg = WindowConfig { crop: 16, overlap, input: 8, normalize: true };
            let out = sliding_window_infer(&scene, &masker, &cfg).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.3), "overlap {overlap}");
        }
        let small = WindowConfig { crop: 64, ..Default::default() };
        assert!(sliding_window_infer(&scene, &masker, &small).is_err());
    }

    #[test]
    fn zero_overlap_stitches_blocks() {
        let scene = Tensor::from_fn(vec![1, 8, 8], |i| 0.1 + i as f32 / 100.0);
        let identity = |x: &Tensor<f32>| Ok(x.clone());
        let cfg = WindowConfig { crop: 4, overlap: 0.0, input: 4, normalize: false };
        assert_eq!(sliding_window_infer(&scene, &identity, &cfg).unwrap(), scene);
    }
}
