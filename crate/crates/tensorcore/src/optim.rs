use crate::{Float, ParamSet, Result, Tensor, TensorError};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(TensorError::contract("adam", format!("{} gradients for {} moments", grads.len(), self.m.len())));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(TensorError::shape("adam", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
