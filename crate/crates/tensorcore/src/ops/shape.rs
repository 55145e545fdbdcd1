use crate::{Float, Result, Tensor, TensorError, Var};

impl<'t, T: Float> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", x.shape(), shape),
            ));
        }
        let old = x.shape().to_vec();
        let out = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self.record(out, &[self], move |g| {
            vec![Some(Tensor::new(old.clone(), g.data().to_vec()).unwrap())]
        }))
    }

    /// Matrix transpose of a rank-2 value.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[r, c] = x.shape() else {
            return Err(TensorError::shape("transpose", format!("expected rank 2, got {:?}", x.shape())));
        };
        let out = Tensor::new(vec![c, r], transpose_data(x.data(), r, c))?;
        Ok(self.record(out, &[self], move |g| {
            vec![Some(Tensor::new(vec![r, c], transpose_data(g.data(), c, r)).unwrap())]
        }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.record(Tensor::new(out_shape, data)?, &[self], move |g| {
            let mut gx = Tensor::zeros(shape.clone());
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx.data_mut()[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "nothing to concatenate".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range for {base_shape:?}")));
        }
        for (i, v) in values.iter().enumerate() {
            parts[i].same_tape(first, "concat")?;
            let s = v.shape();
            let ok = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::shape(
                    "concat",
                    format!("part {i} has shape {s:?}, expected {base_shape:?} except on axis {axis}"),
                ));
            }
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.record(Tensor::new(out_shape, data)?, parts, move |g| {
            let gd = g.data();
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s.clone(), d).unwrap()))
                .collect()
        }))
    }
}

fn transpose_data<T: Float>(d: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor, Var};

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(vec![2, 1, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(vec![2, 2, 2], |i| 10.0 + i as f64));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().value().data(), b.value().data());
        assert_eq!(c.narrow(1, 0, 1).unwrap().value().data(), a.value().data());
    }

    #[test]
    fn shape_op_gradients() {
        let x = Tensor::from_fn(vec![2, 6], |i| (i as f64).sin());
        let err = grad_check(
            |v| {
                let t = v.transpose()?.reshape(&[3, 4])?;
                let w = Var::concat(&[t, t.narrow(1, 1, 2)?], 1)?;
                Ok(w.square().sum())
            },
            &x,
            1e-5,
        )
        .max_rel_error;
        assert!(err < 1e-6, "{err}");
    }
}
