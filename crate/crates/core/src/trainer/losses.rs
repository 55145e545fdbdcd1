//! The three training losses, written against mask values so they can be
//! evaluated for network outputs and for fixed (oracle, constant) masks alike.

use tensorcore::{Float, Tensor, Var};

use crate::compositor::alpha_blend_var;
use crate::divergence::{ebsw, Energy, SliceSet};
use crate::error::{contract, Result};

/// Divergence settings shared by every cluster term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSpec {
    pub p: u32,
    pub energy: Energy,
    pub detach_weights: bool,
}

/// One cluster's divergence term: the `x_notc` objects (under masks `m_x`)
/// pasted onto cluster backgrounds `r_c`, compared with real composites
/// `x_c` of that cluster.
pub fn loss_conditional_divergence<'t, T: Float>(
    x_notc: Var<'t, T>,
    m_x: Var<'t, T>,
    r_c: Var<'t, T>,
    x_c: Var<'t, T>,
    slices: &SliceSet<T>,
    spec: DivergenceSpec,
) -> Result<Var<'t, T>> {
    let cf = alpha_blend_var(x_notc, m_x, r_c)?;
    ebsw(cf, x_c, spec.p, slices, spec.energy, spec.detach_weights)
}

/// `(1/B) Σ ‖M(r)‖_F²` over a batch of background masks `[B, 1, H, W]`.
pub fn loss_background<'t, T: Float>(m_r: Var<'t, T>) -> Result<Var<'t, T>> {
    let b = *m_r.shape().first().ok_or_else(|| contract("background masks need a batch axis"))?;
    if b == 0 {
        return Err(contract("empty background batch"));
    }
    Ok(m_r.frobenius_sq().mul_scalar(T::lit(1.0 / b as f64)))
}

/// 0/1 selection of the `⌊q·n⌋` lowest-valued pixels of each mask in
/// `[B, 1, H, W]`. Ties are broken by pixel order.
pub fn quantile_selection<T: Float>(masks: &Tensor<T>, q: f64) -> Result<Tensor<T>> {
    let shape = masks.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(contract(format!("masks must be [B, 1, H, W], got {shape:?}")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(contract(format!("quantile must lie in (0, 1), got {q}")));
    }
    let n = shape[2] * shape[3];
    let keep = (q * n as f64).floor() as usize;
    let mut sel = vec![T::zero(); masks.numel()];
    for (img, out) in masks.data().chunks(n).zip(sel.chunks_mut(n)) {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| img[a].partial_cmp(&img[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &i in &order[..keep] {
            out[i] = T::one();
        }
    }
    Ok(Tensor::new(shape.to_vec(), sel)?)
}

/// Mean over images of the squared error between counterfactual and target
/// background, summed over channels on the lowest-`q` mask pixels. The
/// pixel selection is a constant; gradients reach only the selected pixels.
pub fn loss_quantile<'t, T: Float>(cf: Var<'t, T>, r: Var<'t, T>, m_x: Var<'t, T>, q: f64) -> Result<Var<'t, T>> {
    let sel = quantile_selection(&m_x.value(), q)?;
    let b = sel.shape()[0];
    let sel = cf.tape().constant(sel);
    Ok(cf.sub(r)?.square().mul(sel)?.sum().mul_scalar(T::lit(1.0 / b as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensorcore::Tape;

    #[test]
    fn background_loss_examples() {
        let tape = Tape::<f64>::new();
        let l = |v: f64, s: usize| loss_background(tape.constant(Tensor::full(vec![3, 1, s, s], v))).unwrap().item();
        assert_eq!(l(0.0, 8), 0.0);
        assert_eq!(l(1.0, 64), 4096.0);
        assert_eq!(l(0.5, 8), 16.0);
    }

    #[test]
    fn quantile_hand_fixture() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.9, 0.8]).unwrap());
        let cf = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.5, 0.7, 0.2, 0.0]).unwrap());
        let r = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.25, 0.3, 0.6, 0.9]).unwrap());
        // Q = the pixels with mask 0.1 and 0.2.
        let expect = (0.5f64 - 0.25).powi(2) + (0.7f64 - 0.3).powi(2);
        assert!((loss_quantile(cf, r, m, 0.5).unwrap().item() - expect).abs() < 1e-12);
        // q so small that no pixel is selected.
        assert_eq!(loss_quantile(cf, r, m, 0.2).unwrap().item(), 0.0);
        assert!(loss_quantile(cf, r, m, 1.0).is_err());
    }

    #[test]
    fn zero_mask_gives_zero_quantile_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 1, 4, 4], |i| (i % 3) as f64));
        let r = tape.constant(Tensor::from_fn(vec![2, 1, 4, 4], |i| (i % 5) as f64 / 5.0));
        let m = tape.constant(Tensor::zeros(vec![2, 1, 4, 4]));
        let cf = alpha_blend_var(x, m, r).unwrap();
        assert_eq!(loss_quantile(cf, r, m, 0.8).unwrap().item(), 0.0);
    }

    #[test]
    fn quantile_gradient_only_on_selected_pixels() {
        let tape = Tape::<f64>::new();
        let m = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.9, 0.8]).unwrap());
        let x = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let r = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let cf = alpha_blend_var(x, m, r).unwrap();
        let g = tape.backward(loss_quantile(cf, r, m, 0.5).unwrap()).unwrap();
        // d/dm (m·1)² = 2m on selected pixels only.
        assert_eq!(g.get(m).unwrap().data(), &[0.2, 0.4, 0.0, 0.0]);
    }

    #[test]
    fn all_ones_mask_on_identical_batches_has_zero_divergence() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![4, 1, 3, 3], |i| ((i * 7) % 11) as f64 / 11.0));
        let r = tape.constant(Tensor::zeros(vec![4, 1, 3, 3]));
        let ones = tape.constant(Tensor::ones(vec![4, 1, 3, 3]));
        let slices = crate::divergence::sample_slices(9, 16, 0).unwrap();
        let spec = DivergenceSpec { p: 2, energy: Energy::Exponential, detach_weights: false };
        assert_eq!(loss_conditional_divergence(x, ones, r, x, &slices, spec).unwrap().item(), 0.0);
    }
}
