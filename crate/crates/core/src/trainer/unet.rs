//! U-Net masking network: image in, soft foreground mask in (0, 1) out.

use serde::{Deserialize, Serialize};
use tensorcore::nn::{Conv2d, ConvTranspose2d, Norm};
use tensorcore::{Bound, Float, ParamSet, Tape, Tensor, Var};

use crate::clustering::NormChoice;
use crate::error::{contract, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Feature channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub norm: NormChoice,
    /// Initial bias of the output logit; negative values start the network
    /// near an empty mask.
    pub head_bias: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64], norm: NormChoice::Instance, head_bias: -4.0 }
    }
}

/// Two 3×3 convolutions, each followed by normalization and ReLU.
#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
}

impl Block {
    fn new<T: Float>(params: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, norm: NormChoice, rng: &mut impl rand::Rng) -> Self {
        Self {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, false, rng),
            norm1: Norm::new(params, &format!("{name}.norm1"), norm.into(), c_out),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng),
            norm2: Norm::new(params, &format!("{name}.norm2"), norm.into(), c_out),
        }
    }

    fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm1.forward(p, self.conv1.forward(p, x)?)?.relu();
        Ok(self.norm2.forward(p, self.conv2.forward(p, h)?)?.relu())
    }
}

/// Layer layout; weights live in a separate [`ParamSet`] so the same
/// network runs at any float precision.
#[derive(Debug, Clone)]
pub struct UNet {
    down: Vec<Block>,
    ups: Vec<(ConvTranspose2d, Block)>,
    head: Conv2d,
}

impl UNet {
    pub fn new<T: Float>(params: &mut ParamSet<T>, cfg: &NetConfig, in_channels: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) {
            return Err(contract(format!("U-Net channels must be non-empty and positive, got {:?}", cfg.channels)));
        }
        let mut down = Vec::new();
        let mut c_in = in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            down.push(Block::new(params, &format!("down{i}"), c_in, c, cfg.norm, rng));
            c_in = c;
        }
        let mut ups = Vec::new();
        for i in (0..cfg.channels.len() - 1).rev() {
            let (coarse, fine) = (cfg.channels[i + 1], cfg.channels[i]);
            let up = ConvTranspose2d::new(params, &format!("up{i}.deconv"), coarse, fine, 2, 2, 0, true, rng);
            // Upsampled features are concatenated with the skip connection.
            let block = Block::new(params, &format!("up{i}"), 2 * fine, fine, cfg.norm, rng);
            ups.push((up, block));
        }
        let head = Conv2d::new(params, "head", cfg.channels[0], 1, 1, 1, 0, true, rng);
        if let Some(b) = head.bias {
            *params.get_mut(b) = Tensor::full(vec![1], T::lit(cfg.head_bias));
        }
        Ok(Self { down, ups, head })
    }

    /// Side lengths must be divisible by this.
    pub fn granularity(&self) -> usize {
        1 << (self.down.len() - 1)
    }

    /// `[N, C, H, W]` images to `[N, 1, H, W]` masks.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let g = self.granularity();
        if shape.len() != 4 || !shape[2].is_multiple_of(g) || !shape[3].is_multiple_of(g) || shape[2] == 0 || shape[3] == 0 {
            return Err(contract(format!("masking network needs [N, C, H, W] with H, W multiples of {g}, got {shape:?}")));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2d(2)?;
            }
            h = block.forward(p, h)?;
            skips.push(h);
        }
        skips.pop();
        for (up, block) in &self.ups {
            let skip = skips.pop().expect("one skip per up level");
            let u = up.forward(p, h)?;
            h = block.forward(p, Var::concat(&[skip, u], 1)?)?;
        }
        Ok(self.head.forward(p, h)?.sigmoid())
    }
}

/// Trained (or freshly initialized) masking network.
#[derive(Debug, Clone)]
pub struct MaskingNetwork {
    pub params: ParamSet<f32>,
    pub config: NetConfig,
    pub in_channels: usize,
    pub unet: UNet,
}

impl MaskingNetwork {
    pub fn new(cfg: &NetConfig, in_channels: usize, seed_value: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_value, &[seed::tag("masknet-init")]);
        let mut params = ParamSet::new();
        let unet = UNet::new(&mut params, cfg, in_channels, &mut rng)?;
        Ok(Self { params, config: cfg.clone(), in_channels, unet })
    }

    /// Masks for `[N, C, H, W]` images without recording gradients.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(contract(format!("expected [N, {}, H, W] images, got {shape:?}", self.in_channels)));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let per = images.numel() / n.max(1);
        let mut out = Vec::with_capacity(n * h * w);
        for start in (0..n).step_by(64) {
            let len = (n - start).min(64);
            let chunk = Tensor::new(vec![len, shape[1], h, w], images.data()[start * per..(start + len) * per].to_vec())?;
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            out.extend_from_slice(self.unet.forward(&p, tape.constant(chunk))?.value().data());
        }
        Ok(Tensor::new(vec![n, 1, h, w], out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_and_range() {
        let net = MaskingNetwork::new(&NetConfig { channels: vec![4, 8, 8], ..Default::default() }, 1, 0).unwrap();
        let x = Tensor::from_fn(vec![3, 1, 12, 8], |i| ((i * 7) % 13) as f32 / 13.0);
        let m = net.predict(&x).unwrap();
        assert_eq!(m.shape(), &[3, 1, 12, 8]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(net.predict(&Tensor::zeros(vec![1, 1, 10, 8])).is_err());
        assert!(net.predict(&Tensor::zeros(vec![1, 2, 8, 8])).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = NetConfig { channels: vec![4, 8], ..Default::default() };
        assert_eq!(MaskingNetwork::new(&cfg, 1, 5).unwrap().params, MaskingNetwork::new(&cfg, 1, 5).unwrap().params);
        assert_ne!(MaskingNetwork::new(&cfg, 1, 5).unwrap().params, MaskingNetwork::new(&cfg, 1, 6).unwrap().params);
    }

    #[test]
    fn instance_norm_outputs_do_not_depend_on_batch_mates() {
        let net = MaskingNetwork::new(&NetConfig { channels: vec![4, 8], ..Default::default() }, 1, 1).unwrap();
        let a = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i % 5) as f32 / 5.0);
        let both = Tensor::from_fn(vec![2, 1, 8, 8], |i| if i < 64 { (i % 5) as f32 / 5.0 } else { 0.9 });
        let single = net.predict(&a).unwrap();
        let pair = net.predict(&both).unwrap();
        assert_eq!(single.data(), &pair.data()[..64]);
    }
}
