//! Broadcasting binary arithmetic and pointwise activations.

use crate::{Float, Result, Tensor, TensorError, Var};

/// Numpy-style broadcast of two shapes, aligned on trailing axes.
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out_shape.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            });
        }
        let strides = |p: &[usize]| {
            let full = crate::tensor::contiguous_strides(p);
            p.iter().zip(full).map(|(&d, s)| if d == 1 { 0 } else { s }).collect::<Vec<_>>()
        };
        Some(Self { a_strides: strides(&pa), b_strides: strides(&pb), out_shape })
    }

    /// Visit `(output offset, a offset, b offset)` for every output element in
    /// row-major order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let shape = &self.out_shape;
        let rank = shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        if shape.contains(&0) {
            return;
        }
        let inner = shape[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        let mut idx = vec![0usize; rank - 1];
        let (mut o, mut oa, mut ob) = (0usize, 0usize, 0usize);
        loop {
            for j in 0..inner {
                f(o + j, oa + j * sa, ob + j * sb);
            }
            o += inner;
            let mut d = rank - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                oa += self.a_strides[d];
                ob += self.b_strides[d];
                if idx[d] < shape[d] {
                    break;
                }
                oa -= self.a_strides[d] * shape[d];
                ob -= self.b_strides[d] * shape[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    #[inline]
    fn partials<T: Float>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

impl<'t, T: Float> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        self.same_tape(other, op.name())?;
        let (a, b) = (self.value(), other.value());
        let out = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        } else {
            let bc = Broadcast::new(a.shape(), b.shape()).ok_or_else(|| {
                TensorError::shape(op.name(), format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
            })?;
            let mut data = vec![T::zero(); bc.out_shape.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            bc.for_each(|o, ia, ib| data[o] = op.apply(ad[ia], bd[ib]));
            Tensor::new(bc.out_shape.clone(), data)?
        };
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.record(out, &[self, other], move |g| {
            let mut ga = need_a.then(|| Tensor::zeros(a.shape().to_vec()));
            let mut gb = need_b.then(|| Tensor::zeros(b.shape().to_vec()));
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut visit = |o: usize, ia: usize, ib: usize| {
                let (da, db) = op.partials(ad[ia], bd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga.data_mut()[ia] += gd[o] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[ib] += gd[o] * db;
                }
            };
            if a.shape() == b.shape() {
                for i in 0..gd.len() {
                    visit(i, i, i);
                }
            } else {
                Broadcast::new(a.shape(), b.shape()).unwrap().for_each(visit);
            }
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Div)
    }

    /// Pointwise map with derivative `deriv(x)` evaluated at the input.
    pub(crate) fn unary(self, fwd: impl Fn(T) -> T, deriv: impl Fn(T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(fwd);
        self.record(out, &[self], move |g| {
            let data = g.data().iter().zip(x.data()).map(|(&g, &x)| g * deriv(x)).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_| -T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_| T::one())
    }

    pub fn mul_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_| c)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(|x| x.max(T::zero()), |x| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |x| {
            let y = sigmoid(x);
            y * (T::one() - y)
        })
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |x| x.exp())
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x| x + x)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamp into `[lo, hi]`; gradient is 1 inside the closed interval and 0
    /// outside.
    pub fn clip(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad_check, Tape, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_mask_over_channels() {
        let tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64));
        let mask = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = img.mul(mask).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 2, 2]);
        assert_eq!(out.value().data(), &[0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_gradient_reduces_over_expanded_axes() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::ones(vec![2, 3]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = a.mul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_matches_finite_differences() {
        let x = Tensor::from_fn(vec![12], |i| (i as f64 - 6.0) * 0.7);
        let err = grad_check(|v| Ok(v.sigmoid().sum()), &x, 1e-5).max_rel_error;
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn division_and_subtraction_gradients() {
        let x = Tensor::from_fn(vec![2, 3], |i| 0.5 + i as f64 * 0.3);
        let err = grad_check(
            |v| {
                let c = v.tape().constant(Tensor::from_vec(vec![1.5, -0.5, 2.0]));
                let q = v.div(v.add_scalar(1.0).square())?;
                Ok(q.sub(c)?.square().sum())
            },
            &x,
            1e-5,
        )
        .max_rel_error;
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn clip_subgradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-2.0, 0.5, 3.0]));
        let g = tape.backward(x.clip(0.0, 1.0).sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
