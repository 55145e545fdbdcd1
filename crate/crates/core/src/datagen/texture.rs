use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureFamily {
    Grating,
    Checkerboard,
    FilteredNoise,
    Stripes,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] =
        [TextureFamily::Grating, TextureFamily::Checkerboard, TextureFamily::FilteredNoise, TextureFamily::Stripes];

    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Grating => "grating",
            TextureFamily::Checkerboard => "checkerboard",
            TextureFamily::FilteredNoise => "filtered-noise",
            TextureFamily::Stripes => "stripes",
        }
    }
}

/// Parameters of an infinite procedural texture; patches are windows into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub family: TextureFamily,
    /// Cycles per pixel (lattice cells per pixel for noise).
    pub frequency: f64,
    /// Radians.
    pub orientation: f64,
    /// Radians; also salts the noise lattice.
    pub phase: f64,
    /// Peak-to-peak amplitude.
    pub contrast: f64,
    pub mean: f64,
}

fn hash2(x: i64, y: i64, salt: u64) -> f64 {
    let mut h = salt ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in [-1, 1].
fn value_noise(x: f64, y: f64, salt: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash2(ix, iy, salt) * (1.0 - tx) + hash2(ix + 1, iy, salt) * tx;
    let b = hash2(ix, iy + 1, salt) * (1.0 - tx) + hash2(ix + 1, iy + 1, salt) * tx;
    a * (1.0 - ty) + b * ty
}

impl TextureSpec {
    /// Pattern value in [-1, 1] at texture coordinates `(x, y)`.
    pub fn pattern(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.orientation.sin_cos();
        let u = x * c + y * s;
        let v = -x * s + y * c;
        let w = 2.0 * PI * self.frequency;
        match self.family {
            TextureFamily::Grating => (w * u + self.phase).sin(),
            TextureFamily::Stripes => (w * u + self.phase).sin().signum(),
            TextureFamily::Checkerboard => ((w * u + self.phase).sin() * (w * v + self.phase).sin()).signum(),
            TextureFamily::FilteredNoise => {
                let salt = self.phase.to_bits();
                let (fx, fy) = (u * self.frequency, v * self.frequency);
                // Two octaves, rescaled to roughly fill [-1, 1].
                ((value_noise(fx, fy, salt) + 0.5 * value_noise(2.0 * fx, 2.0 * fy, salt ^ 0xA5A5)) / 1.5 * 1.6).clamp(-1.0, 1.0)
            }
        }
    }

    /// `m × n` single-channel patch whose top-left corner sits at `offset` in
    /// texture coordinates, values clipped to [0, 1].
    pub fn patch(&self, m: usize, n: usize, offset: (f64, f64)) -> Tensor<f32> {
        Tensor::from_fn(vec![1, m, n], |i| {
            let (y, x) = ((i / n) as f64 + offset.1, (i % n) as f64 + offset.0);
            (self.mean + 0.5 * self.contrast * self.pattern(x, y)).clamp(0.0, 1.0) as f32
        })
    }
}
