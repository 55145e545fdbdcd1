//! Alpha-blending image model `X = M∘F + (1−M)∘R` and the counterfactuals
//! built from it. Masks carry a single channel that is broadcast over the
//! image channels.

use tensorcore::{Float, Tensor, Var};

use crate::error::{contract, Result};

const MASK_TOL: f64 = 1e-6;

fn check_range<T: Float>(mask: &Tensor<T>) -> Result<()> {
    let bad = mask.data().iter().position(|&m| {
        let m = m.as_f64();
        !(-MASK_TOL..=1.0 + MASK_TOL).contains(&m)
    });
    match bad {
        Some(i) => Err(contract(format!("mask value {} at {i} outside [0, 1]", mask.data()[i]))),
        None => Ok(()),
    }
}

fn check_binary<T: Float>(mask: &Tensor<T>) -> Result<()> {
    let bad = mask.data().iter().position(|&m| {
        let m = m.as_f64();
        m.abs() > MASK_TOL && (m - 1.0).abs() > MASK_TOL
    });
    match bad {
        Some(i) => Err(contract(format!("mask value {} at {i} is not binary", mask.data()[i]))),
        None => Ok(()),
    }
}

/// Split `[.., C, H, W]` into (images, channels, pixels per channel).
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(contract(format!("expected [.., C, H, W], got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 3].iter().product(), shape[r - 3], shape[r - 2] * shape[r - 1]))
}

/// `M∘F + (1−M)∘R` on plain tensors. `mask` has one channel.
pub fn alpha_blend<T: Float>(foreground: &Tensor<T>, mask: &Tensor<T>, background: &Tensor<T>) -> Result<Tensor<T>> {
    if foreground.shape() != background.shape() {
        return Err(contract(format!("foreground {:?} and background {:?} differ", foreground.shape(), background.shape())));
    }
    let (n, c, hw) = layout(foreground.shape())?;
    let (mn, mc, mhw) = layout(mask.shape())?;
    if mn != n || mc != 1 || mhw != hw {
        return Err(contract(format!("mask {:?} does not match image {:?}", mask.shape(), foreground.shape())));
    }
    check_range(mask)?;
    let mut out = Vec::with_capacity(foreground.numel());
    for i in 0..n {
        let m = &mask.data()[i * hw..(i + 1) * hw];
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let f = &foreground.data()[base..base + hw];
            let r = &background.data()[base..base + hw];
            out.extend((0..hw).map(|p| m[p] * f[p] + (-m[p] + T::one()) * r[p]));
        }
    }
    Ok(Tensor::new(foreground.shape().to_vec(), out)?)
}

/// Differentiable [`alpha_blend`] on tape values.
pub fn alpha_blend_var<'t, T: Float>(foreground: Var<'t, T>, mask: Var<'t, T>, background: Var<'t, T>) -> Result<Var<'t, T>> {
    if foreground.shape() != background.shape() {
        return Err(contract(format!("foreground {:?} and background {:?} differ", foreground.shape(), background.shape())));
    }
    check_range(&mask.value())?;
    let keep = mask.mul(foreground)?;
    let fill = mask.neg().add_scalar(T::one()).mul(background)?;
    Ok(keep.add(fill)?)
}

/// Counterfactual `M_θ(x)∘x + (1−M_θ(x))∘r`: the object the masker finds in
/// `x_notc`, pasted onto the background `r_c`.
pub fn make_counterfactual<'t, T, F>(x_notc: Var<'t, T>, r_c: Var<'t, T>, masker: F) -> Result<Var<'t, T>>
where
    T: Float,
    F: FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let mask = masker(x_notc)?;
    alpha_blend_var(x_notc, mask, r_c)
}

/// Background swap with a known binary mask.
pub fn ideal_counterfactual<T: Float>(x_r: &Tensor<T>, true_mask: &Tensor<T>, r_prime: &Tensor<T>) -> Result<Tensor<T>> {
    check_binary(true_mask)?;
    alpha_blend(x_r, true_mask, r_prime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensorcore::Tape;

    fn img(seed: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![2, 3, 4, 4], move |i| ((i * 31 + seed * 17) % 23) as f64 / 23.0)
    }

    fn binary_mask() -> Tensor<f64> {
        Tensor::from_fn(vec![2, 1, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64)
    }

    #[test]
    fn trivial_masks() {
        let (f, r) = (img(1), img(2));
        assert_eq!(alpha_blend(&f, &Tensor::ones(vec![2, 1, 4, 4]), &r).unwrap(), f);
        assert_eq!(alpha_blend(&f, &Tensor::zeros(vec![2, 1, 4, 4]), &r).unwrap(), r);
        let out = alpha_blend(&Tensor::ones(vec![1, 2, 2]), &Tensor::full(vec![1, 2, 2], 0.25), &Tensor::zeros(vec![1, 2, 2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn rejects_out_of_range_and_non_binary() {
        let (f, r) = (img(1), img(2));
        assert!(alpha_blend(&f, &Tensor::full(vec![2, 1, 4, 4], 1.1), &r).is_err());
        assert!(ideal_counterfactual(&f, &Tensor::full(vec![2, 1, 4, 4], 0.5), &r).is_err());
        assert!(alpha_blend(&f, &Tensor::zeros(vec![2, 1, 4, 3]), &r).is_err());
    }

    #[test]
    fn binary_mask_partitions_pixels_and_swaps_back() {
        let (x, m, r) = (img(1), binary_mask(), img(3));
        let cf = ideal_counterfactual(&x, &m, &r).unwrap();
        for i in 0..2 {
            for ch in 0..3 {
                for p in 0..16 {
                    let k = (i * 3 + ch) * 16 + p;
                    let expect = if m.data()[i * 16 + p] == 1.0 { x.data()[k] } else { r.data()[k] };
                    assert_eq!(cf.data()[k], expect);
                }
            }
        }
        // Reconstruct x's background from x itself: outside the mask x is its own background.
        let back = ideal_counterfactual(&cf, &m, &x).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn tape_version_matches_and_masker_at_truth_is_ideal() {
        let (x, m, r) = (img(4), binary_mask(), img(5));
        let tape = Tape::<f64>::new();
        let mv = tape.constant(m.clone());
        let cf = make_counterfactual(tape.constant(x.clone()), tape.constant(r.clone()), |_| Ok(mv)).unwrap();
        assert_eq!(*cf.value(), ideal_counterfactual(&x, &m, &r).unwrap());
        let soft = Tensor::from_fn(vec![2, 1, 4, 4], |i| (i as f64 * 0.37).sin().abs());
        let v = alpha_blend_var(tape.constant(x.clone()), tape.constant(soft.clone()), tape.constant(r.clone())).unwrap();
        assert_eq!(*v.value(), alpha_blend(&x, &soft, &r).unwrap());
    }

    #[test]
    fn slope_in_mask_is_f_minus_r() {
        let (f, r) = (img(6), img(7));
        let m0 = Tensor::full(vec![2, 1, 4, 4], 0.3);
        let m1 = Tensor::full(vec![2, 1, 4, 4], 0.4);
        let a = alpha_blend(&f, &m0, &r).unwrap();
        let b = alpha_blend(&f, &m1, &r).unwrap();
        for k in 0..f.numel() {
            let slope = (b.data()[k] - a.data()[k]) / 0.1;
            assert!((slope - (f.data()[k] - r.data()[k])).abs() < 1e-12);
        }
    }
}
