use crate::{gemm, Float, Result, Tensor, TensorError, Var};

impl<'t, T: Float> Var<'t, T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(TensorError::shape(
                "matmul",
                format!("expected two matrices, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        };
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, a.data(), b.data(), T::zero(), &mut out);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.record(Tensor::new(vec![m, n], out)?, &[self, other], move |g| {
            let ga = need_a.then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(false, true, m, k, n, g.data(), b.data(), T::zero(), &mut d);
                Tensor::new(vec![m, k], d).unwrap()
            });
            let gb = need_b.then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(true, false, k, n, m, a.data(), g.data(), T::zero(), &mut d);
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![ga, gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor};

    #[test]
    fn matmul_values_and_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[-1.0, -1.0]);

        let x = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.3).sin());
        let err = grad_check(
            |v| {
                let w = v.tape().constant(Tensor::from_fn(vec![4, 2], |i| i as f64 - 3.0));
                v.matmul(w)?.square().sum().add(v.transpose()?.matmul(v)?.sum())
            },
            &x,
            1e-5,
        )
        .max_rel_error;
        assert!(err < 1e-6, "{err}");
    }
}
