use crate::{Float, Result, Tensor, TensorError, Var};

fn stable_argsort<T: Float>(row: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable, so ties keep input order.
    idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("NaN filtered before sorting"));
    idx
}

impl<'t, T: Float> Var<'t, T> {
    /// Sort each row of a `[rows, n]` matrix ascending. Returns the sorted
    /// values and, per row, the permutation `perm` with
    /// `sorted[r][j] = x[r][perm[r][j]]`. The gradient of `sorted[r][j]`
    /// flows only to `x[r][perm[r][j]]`.
    pub fn sort_rows(self) -> Result<(Var<'t, T>, Vec<Vec<usize>>)> {
        let x = self.value();
        let &[rows, n] = x.shape() else {
            return Err(TensorError::shape("sort_rows", format!("expected rank 2, got {:?}", x.shape())));
        };
        if let Some(pos) = x.data().iter().position(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op: "sort_rows",
                detail: format!("NaN at row {}, column {}", pos / n.max(1), pos % n.max(1)),
            });
        }
        let mut perms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let perm = stable_argsort(row);
            out.extend(perm.iter().map(|&i| row[i]));
            perms.push(perm);
        }
        let saved = perms.clone();
        let var = self.record(Tensor::new(vec![rows, n], out)?, &[self], move |g| {
            let mut gx = vec![T::zero(); rows * n];
            for (r, perm) in saved.iter().enumerate() {
                for (j, &src) in perm.iter().enumerate() {
                    gx[r * n + src] += g.data()[r * n + j];
                }
            }
            vec![Some(Tensor::new(vec![rows, n], gx).unwrap())]
        });
        Ok((var, perms))
    }

    /// Ascending sort of a 1-D value with the permutation `perm` such that
    /// `sorted[i] = x[perm[i]]`.
    pub fn sort_with_grad(self) -> Result<(Var<'t, T>, Vec<usize>)> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TensorError::shape("sort_with_grad", format!("expected rank 1, got {shape:?}")));
        }
        let (sorted, mut perms) = self.reshape(&[1, shape[0]])?.sort_rows()?;
        Ok((sorted.reshape(&shape)?, perms.pop().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor};

    #[test]
    fn sorts_with_permutation() {
        let tape = Tape::<f64>::new();
        let (s, p) = tape.constant(Tensor::from_vec(vec![3.0, 1.0, 2.0])).sort_with_grad().unwrap();
        assert_eq!(s.value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(p, vec![1, 2, 0]);
        let (_, p) = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 4.0])).sort_with_grad().unwrap();
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn ties_keep_input_order() {
        let tape = Tape::<f64>::new();
        let (_, p) = tape.constant(Tensor::from_vec(vec![2.0, 1.0, 2.0, 1.0])).sort_with_grad().unwrap();
        assert_eq!(p, vec![1, 3, 0, 2]);
    }

    #[test]
    fn nan_is_rejected() {
        let tape = Tape::<f64>::new();
        let err = tape.constant(Tensor::from_vec(vec![1.0, f64::NAN])).sort_with_grad().unwrap_err();
        assert!(err.to_string().contains("NaN"));
    }

    #[test]
    fn top_element_gradient_is_argmax_indicator() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![0.3, 2.5, -1.0, 0.9]));
        let (s, _) = x.sort_with_grad().unwrap();
        let top = s.narrow(0, 3, 1).unwrap().sum();
        let g = tape.backward(top).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

        let x = Tensor::from_vec(vec![0.3, 2.5, -1.0, 0.9]);
        let err = grad_check(|v| Ok(v.sort_with_grad()?.0.narrow(0, 3, 1)?.sum()), &x, 1e-6).max_rel_error;
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn weighted_sort_gradient() {
        let x = Tensor::from_fn(vec![3, 5], |i| ((i * 37) % 11) as f64 * 0.31 - 1.0);
        let err = grad_check(
            |v| {
                let w = v.tape().constant(Tensor::from_fn(vec![3, 5], |i| i as f64));
                Ok(v.sort_rows()?.0.mul(w)?.square().sum())
            },
            &x,
            1e-6,
        )
        .max_rel_error;
        assert!(err < 1e-6, "{err}");
    }
}
