//! Instance and batch normalization with a per-channel affine map.

use std::ops::Range;

use crate::{Float, Result, Tensor, TensorError, Var};

/// Element ranges making up each normalization group of an `[N, C, S]` view.
fn groups(n: usize, c: usize, s: usize, per_instance: bool) -> Vec<(usize, Vec<Range<usize>>)> {
    if per_instance {
        (0..n * c).map(|g| (g % c, vec![g * s..(g + 1) * s])).collect()
    } else {
        (0..c)
            .map(|ch| (ch, (0..n).map(|b| (b * c + ch) * s..(b * c + ch + 1) * s).collect()))
            .collect()
    }
}

impl<'t, T: Float> Var<'t, T> {
    /// Normalize each `(sample, channel)` plane of `[N, C, ...]` to zero mean
    /// and unit variance, then apply `gamma[c] * x + beta[c]`.
    pub fn instance_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.normalize(gamma, beta, eps, true)
    }

    /// Normalize each channel over batch and spatial axes using the current
    /// batch statistics.
    pub fn batch_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.normalize(gamma, beta, eps, false)
    }

    fn normalize(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64, per_instance: bool) -> Result<Var<'t, T>> {
        let op = if per_instance { "instance_norm" } else { "batch_norm" };
        self.same_tape(gamma, op)?;
        self.same_tape(beta, op)?;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape(op, format!("expected [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(TensorError::shape(
                op,
                format!("affine parameters must be [{c}], got {:?} and {:?}", gm.shape(), bt.shape()),
            ));
        }
        let groups = groups(n, c, s, per_instance);
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(groups.len());
        for (_, ranges) in &groups {
            let count = ranges.iter().map(|r| r.len()).sum::<usize>() as f64;
            let mean = ranges.iter().flat_map(|r| xd[r.clone()].iter()).map(|v| v.as_f64()).sum::<f64>() / count;
            let var = ranges
                .iter()
                .flat_map(|r| xd[r.clone()].iter())
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / count;
            let istd = 1.0 / (var + eps).sqrt();
            for r in ranges {
                for i in r.clone() {
                    xhat[i] = T::lit((xd[i].as_f64() - mean) * istd);
                }
            }
            inv_std.push(istd);
        }
        let mut out = vec![T::zero(); xd.len()];
        for (ch, ranges) in &groups {
            let (gv, bv) = (gm.data()[*ch], bt.data()[*ch]);
            for r in ranges {
                for i in r.clone() {
                    out[i] = gv * xhat[i] + bv;
                }
            }
        }
        let need_x = self.requires_grad();
        Ok(self.record(Tensor::new(shape.clone(), out)?, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = need_x.then(|| vec![T::zero(); gd.len()]);
            for ((ch, ranges), &istd) in groups.iter().zip(&inv_std) {
                let gv = gm.data()[*ch].as_f64();
                let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
                for r in ranges {
                    for i in r.clone() {
                        sum_g += gd[i].as_f64();
                        sum_gx += gd[i].as_f64() * xhat[i].as_f64();
                    }
                }
                dbeta[*ch] += T::lit(sum_g);
                dgamma[*ch] += T::lit(sum_gx);
                if let Some(dx) = dx.as_mut() {
                    let count = ranges.iter().map(|r| r.len()).sum::<usize>() as f64;
                    // d xhat = g * gamma; means of dxhat and dxhat * xhat over the group
                    let (m1, m2) = (gv * sum_g / count, gv * sum_gx / count);
                    for r in ranges {
                        for i in r.clone() {
                            let dxh = gd[i].as_f64() * gv;
                            dx[i] = T::lit(istd * (dxh - m1 - xhat[i].as_f64() * m2));
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(shape.clone(), d).unwrap()),
                Some(Tensor::from_vec(dgamma)),
                Some(Tensor::from_vec(dbeta)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor, Var};

    fn affine<'t>(tape: &'t Tape<f64>, c: usize) -> (Var<'t, f64>, Var<'t, f64>) {
        (
            tape.constant(Tensor::from_fn(vec![c], |i| 1.0 + 0.5 * i as f64)),
            tape.constant(Tensor::from_fn(vec![c], |i| 0.1 * i as f64)),
        )
    }

    #[test]
    fn instance_norm_standardizes_planes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4, 4], |i| (i as f64 * 0.7).sin() * 5.0 + 2.0));
        let ones = tape.constant(Tensor::ones(vec![3]));
        let zeros = tape.constant(Tensor::zeros(vec![3]));
        let y = x.instance_norm(ones, zeros, 0.0).unwrap().value();
        for plane in 0..6 {
            let p = &y.data()[plane * 16..(plane + 1) * 16];
            let mean: f64 = p.iter().sum::<f64>() / 16.0;
            let var: f64 = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn instance_norm_gradient() {
        let x = Tensor::from_fn(vec![2, 3, 3, 3], |i| (i as f64 * 1.3).sin() * 2.0);
        let err = grad_check(
            |v| {
                let (g, b) = affine(v.tape(), 3);
                let w = v.tape().constant(Tensor::from_fn(vec![2, 3, 3, 3], |i| (i as f64 * 0.4).cos()));
                Ok(v.instance_norm(g, b, 1e-5)?.mul(w)?.sum())
            },
            &x,
            1e-5,
        )
        .max_rel_error;
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn batch_norm_gradient_including_affine() {
        let x = Tensor::from_fn(vec![3, 2, 2, 2], |i| (i as f64 * 0.9).cos() * 3.0);
        let err = grad_check(
            |v| {
                let w = v.tape().constant(Tensor::from_fn(vec![3, 2, 2, 2], |i| (i as f64 * 0.4).sin()));
                let (g, b) = affine(v.tape(), 2);
                Ok(v.batch_norm(g, b, 1e-5)?.mul(w)?.sum())
            },
            &x,
            1e-5,
        )
        .max_rel_error;
        assert!(err < 1e-5, "{err}");

        let gamma = Tensor::from_vec(vec![0.7, 1.3]);
        let err = grad_check(
            move |g| {
                let t = g.tape();
                let x = t.constant(Tensor::from_fn(vec![3, 2, 2, 2], |i| (i as f64 * 0.9).cos()));
                let b = t.constant(Tensor::zeros(vec![2]));
                Ok(x.batch_norm(g, b, 1e-5)?.square().mul_scalar(0.5).add(x)?.square().sum())
            },
            &gamma,
            1e-5,
        )
        .max_rel_error;
        assert!(err < 1e-5, "{err}");
    }
}
