use crate::{Float, Result, Tensor, TensorError, Var};

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[r, c] => Ok((r, c)),
        _ => Err(TensorError::shape(op, format!("expected rank 2, got {shape:?}"))),
    }
}

impl<'t, T: Float> Var<'t, T> {
    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, n) = rank2("log_softmax_rows", x.shape())?;
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..n {
                out[r * n + j] = row[j] - lse;
            }
        }
        let y = Tensor::new(vec![rows, n], out)?;
        let saved = y.clone();
        Ok(self.record(y, &[self], move |g| {
            let mut gx = vec![T::zero(); rows * n];
            for r in 0..rows {
                let gs: T = g.data()[r * n..(r + 1) * n].iter().copied().sum();
                for j in 0..n {
                    let i = r * n + j;
                    gx[i] = g.data()[i] - saved.data()[i].exp() * gs;
                }
            }
            vec![Some(Tensor::new(vec![rows, n], gx).unwrap())]
        }))
    }

    /// `out[r] = x[r, index[r]]`.
    pub fn pick_rows(self, index: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, n) = rank2("pick_rows", x.shape())?;
        if index.len() != rows || index.iter().any(|&i| i >= n) {
            return Err(TensorError::shape("pick_rows", format!("{} indices for {rows} rows of width {n}", index.len())));
        }
        let out: Vec<T> = index.iter().enumerate().map(|(r, &j)| x.data()[r * n + j]).collect();
        let index = index.to_vec();
        Ok(self.record(Tensor::from_vec(out), &[self], move |g| {
            let mut gx = vec![T::zero(); rows * n];
            for (r, &j) in index.iter().enumerate() {
                gx[r * n + j] = g.data()[r];
            }
            vec![Some(Tensor::new(vec![rows, n], gx).unwrap())]
        }))
    }

    /// Scale each row to unit Euclidean norm (rows with norm below `eps` are
    /// divided by `eps`).
    pub fn l2_normalize_rows(self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, n) = rank2("l2_normalize_rows", x.shape())?;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = norm.max(eps);
            for j in 0..n {
                out[r * n + j] = row[j] / d;
            }
            norms.push(norm);
        }
        let y = Tensor::new(vec![rows, n], out)?;
        let saved = y.clone();
        Ok(self.record(y, &[self], move |g| {
            let mut gx = vec![T::zero(); rows * n];
            for r in 0..rows {
                let gr = &g.data()[r * n..(r + 1) * n];
                let yr = &saved.data()[r * n..(r + 1) * n];
                let norm = norms[r];
                if norm > eps {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                } else {
                    for j in 0..n {
                        gx[r * n + j] = gr[j] / eps;
                    }
                }
            }
            vec![Some(Tensor::new(vec![rows, n], gx).unwrap())]
        }))
    }
}
