//! Convolutional background encoders: an autoencoder trained on
//! reconstruction error and a two-view contrastive encoder.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::nn::{Conv2d, ConvTranspose2d, Linear, Norm};
use tensorcore::{Adam, Bound, NormKind, ParamSet, Tape, Tensor, Var};

use crate::error::{contract, Error, Result};
use crate::image::{crop, resize_bilinear};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    #[default]
    Instance,
    Batch,
}

impl From<NormChoice> for NormKind {
    fn from(n: NormChoice) -> Self {
        match n {
            NormChoice::Instance => NormKind::Instance,
            NormChoice::Batch => NormKind::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Autoencoder,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output channels of the four stride-2 convolutions.
    pub channels: Vec<usize>,
    pub latent: usize,
    pub norm: NormChoice,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Contrastive softmax temperature.
    pub temperature: f64,
    /// Smallest crop side, as a fraction of the image side, for contrastive views.
    pub min_crop: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Autoencoder,
            channels: vec![16, 32, 64, 128],
            latent: 20,
            norm: NormChoice::Instance,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            temperature: 0.2,
            min_crop: 0.8,
        }
    }
}

/// Encoder weights and the geometry they were built for.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub params: ParamSet<f32>,
    pub in_channels: usize,
    pub size: usize,
    pub latent: usize,
    convs: Vec<(Conv2d, Norm)>,
    fc: Linear,
}

impl EncoderModel {
    pub fn new(cfg: &EncoderConfig, in_channels: usize, size: usize, seed_value: u64) -> Result<Self> {
        let down = 1usize << cfg.channels.len();
        if cfg.channels.is_empty() || !size.is_multiple_of(down) || size < down {
            return Err(contract(format!("image side {size} must be a positive multiple of {down}")));
        }
        let mut rng = seed::rng(seed_value, &[seed::tag("encoder-init")]);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let conv = Conv2d::new(&mut params, &format!("enc.conv{i}"), c_in, c, 4, 2, 1, false, &mut rng);
            let norm = Norm::new(&mut params, &format!("enc.norm{i}"), cfg.norm.into(), c);
            convs.push((conv, norm));
            c_in = c;
        }
        let side = size / down;
        let fc = Linear::new(&mut params, "enc.fc", c_in * side * side, cfg.latent, &mut rng);
        Ok(Self { params, in_channels, size, latent: cfg.latent, convs, fc })
    }

    pub fn forward<'t>(&self, p: &Bound<'t, f32>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
        let mut h = x;
        for (conv, norm) in &self.convs {
            h = norm.forward(p, conv.forward(p, h)?)?.relu();
        }
        let n = h.shape()[0];
        let flat = h.numel() / n;
        Ok(self.fc.forward(p, h.reshape(&[n, flat])?)?)
    }

    /// Embeddings of `[N, C, S, S]` images as `[N, o]` rows in f64.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f64>> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let per = images.numel() / n.max(1);
        let mut out = Vec::with_capacity(n * self.latent);
        for start in (0..n).step_by(64) {
            let len = (n - start).min(64);
            let mut shape = images.shape().to_vec();
            shape[0] = len;
            let chunk = Tensor::new(shape, images.data()[start * per..(start + len) * per].to_vec())?;
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            let z = self.forward(&p, tape.constant(chunk))?;
            out.extend(z.value().data().iter().map(|&v| v as f64));
        }
        Ok(Tensor::new(vec![n, self.latent], out)?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w] if c == self.in_channels && h == self.size && w == self.size => Ok(()),
            _ => Err(contract(format!(
                "encoder expects [N, {}, {}, {}], got {shape:?}",
                self.in_channels, self.size, self.size
            ))),
        }
    }
}

/// Mirror of the encoder: a fully connected layer back to the coarsest
/// feature map, four stride-2 transposed convolutions, sigmoid output.
#[derive(Debug, Clone)]
struct Decoder {
    params: ParamSet<f32>,
    fc: Linear,
    side: usize,
    top: usize,
    ups: Vec<(ConvTranspose2d, Option<Norm>)>,
}

impl Decoder {
    fn new(cfg: &EncoderConfig, out_channels: usize, size: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, &[seed::tag("decoder-init")]);
        let mut params = ParamSet::new();
        let side = size >> cfg.channels.len();
        let top = *cfg.channels.last().unwrap();
        let fc = Linear::new(&mut params, "dec.fc", cfg.latent, top * side * side, &mut rng);
        let mut chans: Vec<usize> = cfg.channels.iter().rev().copied().collect();
        chans.push(out_channels);
        let last = chans.len() - 2;
        let ups = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let up = ConvTranspose2d::new(&mut params, &format!("dec.up{i}"), w[0], w[1], 4, 2, 1, i == last, &mut rng);
                let norm = (i != last).then(|| Norm::new(&mut params, &format!("dec.norm{i}"), cfg.norm.into(), w[1]));
                (up, norm)
            })
            .collect();
        Self { params, fc, side, top, ups }
    }

    fn forward<'t>(&self, p: &Bound<'t, f32>, z: Var<'t, f32>) -> Result<Var<'t, f32>> {
        let n = z.shape()[0];
        let mut h = self.fc.forward(p, z)?.relu().reshape(&[n, self.top, self.side, self.side])?;
        for (up, norm) in &self.ups {
            h = up.forward(p, h)?;
            h = match norm {
                Some(norm) => norm.forward(p, h)?.relu(),
                None => h.sigmoid(),
            };
        }
        Ok(h)
    }
}

/// Per-epoch mean training loss.
pub type EpochLosses = Vec<f64>;

fn stack_batch(images: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = idx.iter().map(|&i| images[i].clone()).collect();
    Ok(Tensor::stack(&items)?)
}

fn image_geometry(images: &[Tensor<f32>]) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| contract("no background images to train on"))?;
    match *first.shape() {
        [c, h, w] if h == w => {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(contract("background images differ in size"));
            }
            Ok((c, h))
        }
        ref s => Err(contract(format!("expected square [C, S, S] images, got {s:?}"))),
    }
}

fn check_finite(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} loss became {loss} in epoch {epoch}")))
    }
}

/// Fit encoder and decoder on mean squared reconstruction error.
pub fn train_autoencoder(images: &[Tensor<f32>], cfg: &EncoderConfig, seed_value: u64) -> Result<(EncoderModel, EpochLosses)> {
    let (c, s) = image_geometry(images)?;
    let mut enc = EncoderModel::new(cfg, c, s, seed_value)?;
    let mut dec = Decoder::new(cfg, c, s, seed_value);
    let mut opt_e = Adam::new(&enc.params, cfg.lr);
    let mut opt_d = Adam::new(&dec.params, cfg.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed_value, &[seed::tag("ae-epoch"), epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch = stack_batch(images, idx)?;
            let tape = Tape::new();
            let pe = enc.params.bind(&tape, true);
            let pd = dec.params.bind(&tape, true);
            let x = tape.constant(batch);
            let recon = dec.forward(&pd, enc.forward(&pe, x)?)?;
            let loss = recon.sub(x)?.square().mean();
            total += loss.item() as f64 * idx.len() as f64;
            let grads = tape.backward(loss)?;
            opt_e.step(&mut enc.params, &pe.grads(&grads))?;
            opt_d.step(&mut dec.params, &pd.grads(&grads))?;
        }
        let mean = total / images.len() as f64;
        check_finite(mean, "reconstruction", epoch)?;
        log::info!("autoencoder epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok((enc, losses))
}

/// Random crop with side in `[min_frac, 1]` of the image, resized back.
pub fn random_resized_crop(img: &Tensor<f32>, min_frac: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (_, h, w) = crate::image::dims(img)?;
    let frac = rng.random_range(min_frac.clamp(0.0, 1.0)..=1.0);
    let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
    let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    resize_bilinear(&crop(img, top, left, ch, cw)?, h, w)
}

/// Normalized-temperature cross-entropy over `2n` L2-normalized embeddings
/// where rows `i` and `i + n` are the two views of one image.
pub fn nt_xent<'t>(z: Var<'t, f32>, temperature: f64) -> Result<Var<'t, f32>> {
    let shape = z.shape();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) || shape[0] < 4 {
        return Err(contract(format!("nt_xent needs [2n, o] with n >= 2, got {shape:?}")));
    }
    let m = shape[0];
    let n = m / 2;
    let zn = z.l2_normalize_rows(1e-8)?;
    let logits = zn.matmul(zn.transpose()?)?.mul_scalar((1.0 / temperature) as f32);
    // Remove self-similarity from the softmax.
    let self_mask = z.tape().constant(Tensor::from_fn(vec![m, m], |i| if i / m == i % m { -1e9 } else { 0.0 }));
    let log_p = logits.add(self_mask)?.log_softmax_rows()?;
    let positives: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    Ok(log_p.pick_rows(&positives)?.mean().neg())
}

/// Two-view contrastive training with in-batch negatives.
pub fn train_contrastive_encoder(images: &[Tensor<f32>], cfg: &EncoderConfig, seed_value: u64) -> Result<(EncoderModel, EpochLosses)> {
    let (c, s) = image_geometry(images)?;
    if cfg.batch_size < 4 {
        return Err(contract(format!("contrastive batch size must be at least 4, got {}", cfg.batch_size)));
    }
    if images.len() < 4 {
        return Err(contract(format!("contrastive training needs at least 4 images, got {}", images.len())));
    }
    let mut enc = EncoderModel::new(cfg, c, s, seed_value)?;
    let mut opt = Adam::new(&enc.params, cfg.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed_value, &[seed::tag("cl-epoch"), epoch as u64]);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * idx.len());
            for _ in 0..2 {
                for &i in idx {
                    views.push(random_resized_crop(&images[i], cfg.min_crop, &mut rng)?);
                }
            }
            let tape = Tape::new();
            let p = enc.params.bind(&tape, true);
            let z = enc.forward(&p, tape.constant(Tensor::stack(&views)?))?;
            let loss = nt_xent(z, cfg.temperature)?;
            total += loss.item() as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            opt.step(&mut enc.params, &p.grads(&grads))?;
        }
        let mean = total / batches.max(1) as f64;
        check_finite(mean, "contrastive", epoch)?;
        log::info!("contrastive epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok((enc, losses))
}

/// L2-normalized embeddings, the representation the contrastive objective shapes.
pub fn normalized_embeddings(enc: &EncoderModel, images: &Tensor<f32>) -> Result<Tensor<f64>> {
    let z = enc.encode(images)?;
    let o = z.shape()[1];
    let mut data = z.into_data();
    for row in data.chunks_mut(o) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor::new(vec![data.len() / o, o], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_shapes() {
        let cfg = EncoderConfig { channels: vec![4, 8], latent: 3, ..Default::default() };
        let enc = EncoderModel::new(&cfg, 1, 8, 0).unwrap();
        let z = enc.encode(&Tensor::from_fn(vec![5, 1, 8, 8], |i| (i % 9) as f32 / 9.0)).unwrap();
        assert_eq!(z.shape(), &[5, 3]);
        assert!(enc.encode(&Tensor::zeros(vec![1, 1, 16, 16])).is_err());
        assert!(EncoderModel::new(&cfg, 1, 6, 0).is_err());
        let dec = Decoder::new(&cfg, 1, 8, 0);
        let tape = Tape::new();
        let pd = dec.params.bind(&tape, false);
        let r = dec.forward(&pd, tape.constant(Tensor::zeros(vec![2, 3]))).unwrap();
        assert_eq!(r.shape(), vec![2, 1, 8, 8]);
    }

    #[test]
    fn autoencoder_fits_constant_images() {
        let cfg = EncoderConfig { channels: vec![4, 8], latent: 3, epochs: 50, batch_size: 4, lr: 1e-2, ..Default::default() };
        let images = vec![Tensor::full(vec![1, 8, 8], 0.5); 8];
        let (_, losses) = train_autoencoder(&images, &cfg, 1).unwrap();
        assert!(*losses.last().unwrap() < 1e-3, "{losses:?}");
        assert!(train_autoencoder(&[], &cfg, 1).is_err());
    }

    #[test]
    fn nt_xent_prefers_matching_views() {
        let tape = Tape::<f32>::new();
        let aligned = tape.constant(Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let crossed = tape.constant(Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
        assert!(nt_xent(aligned, 0.2).unwrap().item() < nt_xent(crossed, 0.2).unwrap().item());
        assert!(nt_xent(tape.constant(Tensor::zeros(vec![2, 2])), 0.2).is_err());
    }

    #[test]
    fn crops_keep_size_and_stay_constant_on_flat_images() {
        let mut rng = seed::rng(0, &[]);
        let img = Tensor::full(vec![1, 10, 10], 0.4f32);
        for _ in 0..10 {
            let c = random_resized_crop(&img, 0.8, &mut rng).unwrap();
            assert_eq!(c.shape(), &[1, 10, 10]);
            assert!(c.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        }
    }

    #[test]
    fn contrastive_embeddings_are_unit() {
        let cfg = EncoderConfig { kind: EncoderKind::Contrastive, channels: vec![4, 8], latent: 3, epochs: 1, batch_size: 4, ..Default::default() };
        let images: Vec<_> = (0..6).map(|k| Tensor::from_fn(vec![1, 8, 8], move |i| ((i + k) % 5) as f32 / 5.0)).collect();
        let (enc, _) = train_contrastive_encoder(&images, &cfg, 0).unwrap();
        let z = normalized_embeddings(&enc, &Tensor::stack(&images).unwrap()).unwrap();
        for row in z.data().chunks(3) {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
        }
        let small = EncoderConfig { batch_size: 2, ..cfg };
        assert!(train_contrastive_encoder(&images, &small, 0).is_err());
    }
}
