use crate::{Float, Result, Tensor, TensorError, Var};

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Float> Var<'t, T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.record(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::lit(self.numel() as f64);
        let x = self.value();
        let shape = x.shape().to_vec();
        self.record(Tensor::scalar(x.sum() / n), &[self], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.item() / n))]
        })
    }

    /// Squared Frobenius norm, `sum(x^2)`.
    pub fn frobenius_sq(self) -> Var<'t, T> {
        let x = self.value();
        let total = x.data().iter().map(|&v| v * v).sum();
        self.record(Tensor::scalar(total), &[self], move |g| {
            let s = g.item() + g.item();
            vec![Some(x.map(|v| s * v))]
        })
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::shape("sum_axis", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.record(Tensor::new(out_shape, out)?, &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::shape("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let len = T::lit(shape[axis] as f64);
        Ok(self.sum_axis(axis)?.mul_scalar(T::one() / len))
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor};

    #[test]
    fn frobenius_of_zeros_and_small_matrix() {
        let tape = Tape::<f64>::new();
        assert_eq!(tape.constant(Tensor::zeros(vec![4, 4])).frobenius_sq().item(), 0.0);
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(tape.constant(m).frobenius_sq().item(), 30.0);
    }

    #[test]
    fn axis_reductions() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3], |i| i as f64));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(x.mean_axis(1).unwrap().value().data(), &[1.0, 4.0]);
        assert!(x.sum_axis(2).is_err());
    }

    #[test]
    fn reduction_gradients() {
        let x = Tensor::from_fn(vec![3, 2, 2], |i| (i as f64 * 0.37).cos());
        let err = grad_check(
            |v| v.sum_axis(1)?.square().mean_axis(0)?.frobenius_sq().add(v.mean()),
            &x,
            1e-5,
        )
        .max_rel_error;
        assert!(err < 1e-6, "{err}");
    }
}
