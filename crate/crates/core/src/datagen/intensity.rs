use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tensorcore::Tensor;

use crate::error::{contract, Result};

/// Linearly interpolated percentile (`pct` in [0, 100]) of `values`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn mask_pixels(mask: &Tensor<f32>) -> Vec<usize> {
    mask.data().iter().enumerate().filter(|(_, &m)| m > 0.5).map(|(i, _)| i).collect()
}

/// Endpoints actually used by [`apply_intensity_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ramp {
    pub min: f64,
    pub max: f64,
    /// Percentiles the endpoints were read at.
    pub min_pct: f64,
    pub max_pct: f64,
}

/// Fill the object with a planar ramp rising along the 45° diagonal
/// (`x + y`) across its bounding box, from a value between the 50th and
/// 70th percentiles of `background_crop` to one between the 80th and 100th.
pub fn apply_intensity_gradient(
    mask: &Tensor<f32>,
    background_crop: &Tensor<f32>,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Ramp)> {
    let &[1, m, n] = mask.shape() else {
        return Err(contract(format!("mask must be [1, H, W], got {:?}", mask.shape())));
    };
    let crop: Vec<f64> = background_crop.data().iter().map(|&v| v as f64).collect();
    if crop.is_empty() {
        return Err(contract("empty background crop"));
    }
    let min_pct = rng.random_range(50.0..=70.0);
    let max_pct = rng.random_range(80.0..=100.0);
    let (lo, hi) = (percentile(&crop, min_pct), percentile(&crop, max_pct));
    if lo == hi {
        log::warn!("background crop is flat; object intensity is constant {lo}");
    }
    let pixels = mask_pixels(mask);
    let diag = |i: usize| ((i / n) + (i % n)) as f64;
    let (u0, u1) = pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(diag(i)), b.max(diag(i))));
    let mut out = Tensor::zeros(vec![1, m, n]);
    for &i in &pixels {
        let t = if u1 > u0 { (diag(i) - u0) / (u1 - u0) } else { 0.0 };
        out.data_mut()[i] = (lo + t * (hi - lo)) as f32;
    }
    Ok((out, Ramp { min: lo, max: hi, min_pct, max_pct }))
}

/// `count` squared standard normal draws (chi-square with one degree of freedom).
pub fn gaussian_sq_samples(count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * z
        })
        .collect()
}

/// Squared Gaussian intensities on the mask, min-max mapped to `[150/255, 1]`.
pub fn apply_gaussian_sq_intensity(mask: &Tensor<f32>, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let pixels = mask_pixels(mask);
    let raw = gaussian_sq_samples(pixels.len(), rng);
    let lo_out = 150.0 / 255.0;
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if pixels.len() == 1 {
        log::warn!("single-pixel object; intensity is constant");
    }
    let mut out = Tensor::zeros(mask.shape().to_vec());
    for (&i, &v) in pixels.iter().zip(&raw) {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
        out.data_mut()[i] = (lo_out + t * (1.0 - lo_out)) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn disk() -> Tensor<f32> {
        Tensor::from_fn(vec![1, 16, 16], |i| {
            let (y, x) = ((i / 16) as f64 - 7.5, (i % 16) as f64 - 7.5);
            (x * x + y * y <= 36.0) as u8 as f32
        })
    }

    #[test]
    fn flat_crop_gives_constant_object() {
        let mut rng = crate::seed::rng(0, &[]);
        let (obj, ramp) = apply_intensity_gradient(&disk(), &Tensor::full(vec![1, 8, 8], 0.3), &mut rng).unwrap();
        assert_eq!(ramp.min, ramp.max);
        assert!(obj.data().iter().zip(disk().data()).all(|(&o, &m)| if m == 1.0 { o == 0.3 } else { o == 0.0 }));
    }

    #[test]
    fn ramp_monotone_along_diagonal_and_within_windows() {
        let mut rng = crate::seed::rng(1, &[]);
        let crop = Tensor::from_fn(vec![1, 10, 10], |i| ((i * 37) % 100) as f32 / 100.0);
        let values: Vec<f64> = crop.data().iter().map(|&v| v as f64).collect();
        for _ in 0..20 {
            let (obj, ramp) = apply_intensity_gradient(&disk(), &crop, &mut rng).unwrap();
            assert!(ramp.min >= percentile(&values, 50.0) && ramp.min <= percentile(&values, 70.0));
            assert!(ramp.max >= percentile(&values, 80.0) && ramp.max <= percentile(&values, 100.0));
            let mask = disk();
            for y in 0..15 {
                for x in 0..15 {
                    let (a, b) = (y * 16 + x, (y + 1) * 16 + x + 1);
                    if mask.data()[a] == 1.0 && mask.data()[b] == 1.0 {
                        assert!(obj.data()[b] >= obj.data()[a]);
                    }
                }
            }
            let inside: Vec<f32> = obj.data().iter().zip(mask.data()).filter(|(_, &m)| m == 1.0).map(|(&o, _)| o).collect();
            let (lo, hi) = inside.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!((lo as f64 - ramp.min).abs() < 1e-6 && (hi as f64 - ramp.max).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_sq_window() {
        let mut rng = crate::seed::rng(2, &[]);
        let obj = apply_gaussian_sq_intensity(&disk(), &mut rng).unwrap();
        let inside: Vec<f32> = obj.data().iter().zip(disk().data()).filter(|(_, &m)| m == 1.0).map(|(&o, _)| o).collect();
        let (lo, hi) = inside.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((lo as f64 - 150.0 / 255.0).abs() < 1e-6);
        assert!((hi - 1.0).abs() < 1e-6);
    }

    #[test]
    fn raw_draws_follow_chi_square_one() {
        let mut rng = crate::seed::rng(3, &[]);
        let mut x = gaussian_sq_samples(10_000, &mut rng);
        assert!(x.iter().all(|&v| v >= 0.0));
        x.sort_by(|a, b| a.total_cmp(b));
        let chi = ChiSquared::new(1.0).unwrap();
        let n = x.len() as f64;
        let d = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = chi.cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic KS critical value at alpha = 0.01.
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
    }
}
