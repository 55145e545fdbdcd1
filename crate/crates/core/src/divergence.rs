//! Sample-based optimal transport divergences between equal-size empirical
//! measures: the sorted 1-D closed form, its sliced Monte Carlo extension and
//! the energy-based (importance weighted) sliced estimator.
//!
//! Every estimator returns the p-th power of the distance (`W_p^p`,
//! `SW_p^p`), matching what the training loss consumes. Batches of images are
//! flattened to one row per sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tensorcore::{Float, Tensor, Var};

use crate::error::{contract, Result};

/// Reweighting applied to per-slice values before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Energy {
    /// `f(v) = exp(v)`: slices with larger transport cost get more weight.
    #[default]
    Exponential,
    /// No reweighting; the estimator is the plain slice mean.
    Identity,
}

/// `L` unit directions in `R^d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSet<T> {
    directions: Tensor<T>,
    seed: u64,
}

impl<T: Float> SliceSet<T> {
    /// Wrap explicit directions. Rows are used as given.
    pub fn from_directions(directions: Tensor<T>, seed: u64) -> Result<Self> {
        if directions.rank() != 2 || directions.shape()[0] == 0 {
            return Err(contract(format!("slice directions must be [L, d] with L >= 1, got {:?}", directions.shape())));
        }
        Ok(Self { directions, seed })
    }

    pub fn directions(&self) -> &Tensor<T> {
        &self.directions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.directions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.directions.shape()[1]
    }
}

/// `L` i.i.d. uniform directions on `S^{d-1}` (normalized standard Gaussians).
///
/// Directions are drawn in f64 and then converted, so the f32 and f64 slice
/// sets for one seed describe the same directions.
pub fn sample_slices<T: Float>(d: usize, l: usize, seed: u64) -> Result<SliceSet<T>> {
    if d == 0 || l == 0 {
        return Err(contract(format!("sample_slices needs d >= 1 and L >= 1, got d={d}, L={l}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(d * l);
    let mut row = vec![0.0f64; d];
    for _ in 0..l {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                data.extend(row.iter().map(|v| T::lit(v / norm)));
                break;
            }
        }
    }
    SliceSet::from_directions(Tensor::new(vec![l, d], data)?, seed)
}

fn flatten<'t, T: Float>(x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(contract(format!("{name} must have a batch axis, got a scalar")));
    }
    let b = shape[0];
    let d: usize = shape[1..].iter().product();
    Ok(x.reshape(&[b, d])?)
}

fn check_order(p: u32) -> Result<()> {
    if p == 1 || p == 2 {
        Ok(())
    } else {
        Err(contract(format!("order p must be 1 or 2, got {p}")))
    }
}

fn power<'t, T: Float>(diff: Var<'t, T>, p: u32) -> Var<'t, T> {
    if p == 1 {
        diff.abs()
    } else {
        diff.square()
    }
}

/// `W_p^p` between the uniform empirical measures on `xs` and `ys`, computed
/// by pairing order statistics.
pub fn wasserstein_1d<'t, T: Float>(xs: Var<'t, T>, ys: Var<'t, T>, p: u32) -> Result<Var<'t, T>> {
    check_order(p)?;
    let (nx, ny) = (xs.numel(), ys.numel());
    if xs.shape().len() != 1 || ys.shape().len() != 1 || nx != ny || nx == 0 {
        return Err(contract(format!(
            "wasserstein_1d needs two non-empty 1-D samples of equal length, got {:?} and {:?}",
            xs.shape(),
            ys.shape()
        )));
    }
    let (sx, _) = xs.sort_with_grad()?;
    let (sy, _) = ys.sort_with_grad()?;
    Ok(power(sx.sub(sy)?, p).mean())
}

/// Exact `W_p^p` with Euclidean ground cost by enumerating every assignment.
/// Exponential in the batch size, so limited to `B <= 8`.
pub fn brute_force_wasserstein(x: &Tensor<f64>, y: &Tensor<f64>, p: u32) -> Result<f64> {
    check_order(p)?;
    let rows = |t: &Tensor<f64>| -> Result<(usize, usize)> {
        match t.shape() {
            [b] => Ok((*b, 1)),
            [b, rest @ ..] => Ok((*b, rest.iter().product())),
            [] => Err(contract("brute_force_wasserstein needs a batch axis")),
        }
    };
    let (b, d) = rows(x)?;
    let (by, dy) = rows(y)?;
    if b != by || d != dy {
        return Err(contract(format!("batches differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    if b == 0 || b > 8 {
        return Err(contract(format!("brute force enumeration supports 1..=8 points, got {b}")));
    }
    let mut cost = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let sq: f64 = (0..d).map(|k| (x.data()[i * d + k] - y.data()[j * d + k]).powi(2)).sum();
            cost[i * b + j] = if p == 1 { sq.sqrt() } else { sq };
        }
    }
    let mut perm: Vec<usize> = (0..b).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |perm| {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * b + j]).sum();
        best = best.min(total);
    });
    Ok(best / b as f64)
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Per-slice `W_p^p` of the projected batches, shape `[L]`.
pub fn slice_values<'t, T: Float>(x: Var<'t, T>, y: Var<'t, T>, p: u32, slices: &SliceSet<T>) -> Result<Var<'t, T>> {
    check_order(p)?;
    let x = flatten(x, "X")?;
    let y = flatten(y, "Y")?;
    let (xs, ys) = (x.shape(), y.shape());
    if xs != ys {
        return Err(contract(format!("batches differ: {xs:?} vs {ys:?}")));
    }
    if xs[0] == 0 {
        return Err(contract("empty batch"));
    }
    if xs[1] != slices.dim() {
        return Err(contract(format!("sample dimension {} does not match slice dimension {}", xs[1], slices.dim())));
    }
    // [d, L] projection matrix, shared by both batches.
    let w = x.tape().constant(transpose(slices.directions()));
    let px = x.matmul(w)?.transpose()?;
    let py = y.matmul(w)?.transpose()?;
    let (sx, _) = px.sort_rows()?;
    let (sy, _) = py.sort_rows()?;
    Ok(power(sx.sub(sy)?, p).mean_axis(1)?)
}

fn transpose<T: Float>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| m.data()[(i % r) * c + i / r])
}

/// Monte Carlo `SW_p^p`: the mean of the per-slice values.
pub fn sliced_wasserstein<'t, T: Float>(x: Var<'t, T>, y: Var<'t, T>, p: u32, slices: &SliceSet<T>) -> Result<Var<'t, T>> {
    Ok(slice_values(x, y, p, slices)?.mean())
}

/// Energy-based sliced Wasserstein `Σ_l w_l v_l` with `w = f(v) / Σ f(v)`.
///
/// With `detach_weights` the weights are treated as constants in the
/// backward pass; otherwise the gradient runs through them too.
pub fn ebsw<'t, T: Float>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    p: u32,
    slices: &SliceSet<T>,
    energy: Energy,
    detach_weights: bool,
) -> Result<Var<'t, T>> {
    weighted_mean(slice_values(x, y, p, slices)?, energy, detach_weights)
}

/// Importance-weighted mean of per-slice values `v` (shape `[L]`).
pub fn weighted_mean<'t, T: Float>(v: Var<'t, T>, energy: Energy, detach_weights: bool) -> Result<Var<'t, T>> {
    match energy {
        Energy::Identity => Ok(v.mean()),
        Energy::Exponential => {
            let l = v.numel();
            let src = if detach_weights { v.detach() } else { v };
            // softmax via log-softmax keeps the max-subtraction inside the primitive.
            let w = src.reshape(&[1, l])?.log_softmax_rows()?.exp().reshape(&[l])?;
            Ok(w.mul(v)?.sum())
        }
    }
}
