use crate::{Float, Result, Tensor, TensorError, Var};

impl<'t, T: Float> Var<'t, T> {
    /// Non-overlapping `size × size` max pooling of `[N, C, H, W]`. Trailing
    /// rows/columns that do not fill a window are dropped. Ties go to the
    /// first maximum in row-major window order.
    pub fn max_pool2d(self, size: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[n, c, h, w] = x.shape() else {
            return Err(TensorError::shape("max_pool2d", format!("expected rank 4, got {:?}", x.shape())));
        };
        if size == 0 || size > h || size > w {
            return Err(TensorError::shape("max_pool2d", format!("window {size} does not fit {h}x{w}")));
        }
        let (ho, wo) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = base + (oy * size + i) * w + ox * size + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.record(Tensor::new(vec![n, c, ho, wo], out)?, &[self], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let gxd = gx.data_mut();
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gxd[src] += gv;
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor};

    #[test]
    fn picks_window_maximum() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(vec![1, 1, 4, 4], |i| ((i * 7) % 16) as f64));
        let y = x.max_pool2d(2).unwrap();
        assert_eq!(y.value().data(), &[12.0, 14.0, 15.0, 13.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().sum(), 4.0);
    }

    #[test]
    fn gradient_away_from_ties() {
        let x = Tensor::from_fn(vec![2, 2, 4, 6], |i| ((i as f64) * 1.618).sin() * 3.0);
        let err = grad_check(|v| Ok(v.max_pool2d(2)?.square().sum()), &x, 1e-6).max_rel_error;
        assert!(err < 1e-6, "{err}");
    }
}
