//! 2-D cross-correlation and its adjoint, lowered to GEMM through im2col.

use crate::{gemm, Float, Result, Tensor, TensorError, Var};

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit or `stride == 0`.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of the transposed convolution along one axis.
pub fn conv_transpose2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&n| n > 0)
}

/// Geometry of a forward convolution from a `c×h×w` image to `ho×wo`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output positions whose tap `k` lands inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // o*s + k - p >= 0  and  o*s + k - p < extent
        let lo = ((p - k).max(0) + s - 1) / s;
        let last = extent as isize - 1 + p - k;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    /// Scatter the image into the `rows × cols` patch matrix.
    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                let (y0, y1) = self.valid(ki, self.h, self.ho);
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (x0, x1) = self.valid(kj, self.w, self.wo);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if oy < y0 || oy >= y1 || x0 >= x1 {
                            line.fill(T::zero());
                            continue;
                        }
                        let iy = oy * self.stride + ki - self.pad;
                        let src = &x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                        line[..x0].fill(T::zero());
                        line[x1..].fill(T::zero());
                        if self.stride == 1 {
                            let ix0 = x0 + kj - self.pad;
                            line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                line[ox] = src[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: accumulate patch columns back into the image.
    fn col2im<T: Float>(&self, cols: &[T], x: &mut [T]) {
        let plane = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                let (y0, y1) = self.valid(ki, self.h, self.ho);
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (x0, x1) = self.valid(kj, self.w, self.wo);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ki - self.pad;
                        let dst = &mut x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in x0..x1 {
                            dst[ox * self.stride + kj - self.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_rank4(op: &'static str, name: &str, shape: &[usize]) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| {
        TensorError::shape(op, format!("{name} must be rank 4, got {shape:?}"))
    })
}

impl<'t, T: Float> Var<'t, T> {
    /// Cross-correlation of `[N, C, H, W]` with a `[F, C, kh, kw]` kernel.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(kernel, "conv2d")?;
        let (x, k) = (self.value(), kernel.value());
        let [n, c, h, w] = check_rank4("conv2d", "input", x.shape())?;
        let [f, kc, kh, kw] = check_rank4("conv2d", "kernel", k.shape())?;
        if kc != c {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels (axis 1) {c} != kernel channels (axis 1) {kc}"),
            ));
        }
        let ho = conv2d_output_extent(h, kh, stride, padding).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel height {kh} does not fit input height {h} with padding {padding}, stride {stride}"))
        })?;
        let wo = conv2d_output_extent(w, kw, stride, padding).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel width {kw} does not fit input width {w} with padding {padding}, stride {stride}"))
        })?;
        let g = Geom { c, h, w, kh, kw, stride, pad: padding, ho, wo };
        let (rows, plane, img) = (g.rows(), g.cols(), c * h * w);
        let mut out = vec![T::zero(); n * f * plane];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
        for b in 0..n {
            let xb = &x.data()[b * img..(b + 1) * img];
            let patches: &[T] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(false, false, f, plane, rows, k.data(), patches, T::zero(), &mut out[b * f * plane..(b + 1) * f * plane]);
        }
        let (need_x, need_k) = (self.requires_grad(), kernel.requires_grad());
        let out = Tensor::new(vec![n, f, ho, wo], out)?;
        Ok(self.record(out, &[self, kernel], move |grad| {
            let gd = grad.data();
            let mut gx = need_x.then(|| vec![T::zero(); n * img]);
            let mut gk = need_k.then(|| vec![T::zero(); f * rows]);
            let mut cols = vec![T::zero(); rows * plane];
            for b in 0..n {
                let gb = &gd[b * f * plane..(b + 1) * f * plane];
                if let Some(gk) = gk.as_mut() {
                    let xb = &x.data()[b * img..(b + 1) * img];
                    let patches: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        g.im2col(xb, &mut cols);
                        &cols
                    };
                    gemm(false, true, f, rows, plane, gb, patches, T::one(), gk);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[b * img..(b + 1) * img];
                    if g.is_pointwise() {
                        gemm(true, false, rows, plane, f, k.data(), gb, T::zero(), dst);
                    } else {
                        gemm(true, false, rows, plane, f, k.data(), gb, T::zero(), &mut cols);
                        g.col2im(&cols, dst);
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::new(vec![n, c, h, w], d).unwrap()),
                gk.map(|d| Tensor::new(vec![f, c, kh, kw], d).unwrap()),
            ]
        }))
    }

    /// Adjoint of [`Var::conv2d`]: maps `[N, F, H', W']` to `[N, C, H, W]`
    /// with a `[F, C, kh, kw]` kernel, where `H = (H'-1)*stride - 2*padding + kh`.
    pub fn conv_transpose2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(kernel, "conv_transpose2d")?;
        let (x, k) = (self.value(), kernel.value());
        let [n, f, hi, wi] = check_rank4("conv_transpose2d", "input", x.shape())?;
        let [kf, c, kh, kw] = check_rank4("conv_transpose2d", "kernel", k.shape())?;
        if kf != f {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("input channels (axis 1) {f} != kernel input channels (axis 0) {kf}"),
            ));
        }
        let h = conv_transpose2d_output_extent(hi, kh, stride, padding)
            .ok_or_else(|| TensorError::shape("conv_transpose2d", format!("degenerate output height from {hi}")))?;
        let w = conv_transpose2d_output_extent(wi, kw, stride, padding)
            .ok_or_else(|| TensorError::shape("conv_transpose2d", format!("degenerate output width from {wi}")))?;
        // Forward geometry of the convolution this operator is the adjoint of.
        let g = Geom { c, h, w, kh, kw, stride, pad: padding, ho: hi, wo: wi };
        debug_assert_eq!(conv2d_output_extent(h, kh, stride, padding), Some(hi));
        let (rows, plane, img) = (g.rows(), g.cols(), c * h * w);
        let mut out = vec![T::zero(); n * img];
        let mut cols = vec![T::zero(); rows * plane];
        for b in 0..n {
            let xb = &x.data()[b * f * plane..(b + 1) * f * plane];
            gemm(true, false, rows, plane, f, k.data(), xb, T::zero(), &mut cols);
            g.col2im(&cols, &mut out[b * img..(b + 1) * img]);
        }
        let (need_x, need_k) = (self.requires_grad(), kernel.requires_grad());
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(out, &[self, kernel], move |grad| {
            let gd = grad.data();
            let mut gx = need_x.then(|| vec![T::zero(); n * f * plane]);
            let mut gk = need_k.then(|| vec![T::zero(); f * rows]);
            let mut cols = vec![T::zero(); rows * plane];
            for b in 0..n {
                g.im2col(&gd[b * img..(b + 1) * img], &mut cols);
                if let Some(gx) = gx.as_mut() {
                    gemm(false, false, f, plane, rows, k.data(), &cols, T::zero(), &mut gx[b * f * plane..(b + 1) * f * plane]);
                }
                if let Some(gk) = gk.as_mut() {
                    let xb = &x.data()[b * f * plane..(b + 1) * f * plane];
                    gemm(false, true, f, rows, plane, xb, &cols, T::one(), gk);
                }
            }
            vec![
                gx.map(|d| Tensor::new(vec![n, f, hi, wi], d).unwrap()),
                gk.map(|d| Tensor::new(vec![f, c, kh, kw], d).unwrap()),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct-loop reference convolution.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
        let [f, _, kh, kw]: [usize; 4] = k.shape().try_into().unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(vec![n, f, ho, wo]);
        for b in 0..n {
            for fo in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * s + i) as isize - p as isize;
                                    let ix = (ox * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.get(&[b, ci, iy as usize, ix as usize]) * k.get(&[fo, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, fo, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_kernel_scales_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let k = tape.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
        let y = x.conv2d(k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn diagonal_kernel_hand_sum() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(x.conv2d(k, 1, 0).unwrap().value().data(), &[5.0]);
    }

    #[test]
    fn matches_direct_loops_for_strides_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, kh, s, p) in &[(7, 3, 1, 1), (8, 4, 2, 1), (9, 3, 2, 0), (5, 5, 1, 2), (6, 2, 3, 1)] {
            let x = random(&[2, 3, h, h + 1], &mut rng);
            let k = random(&[4, 3, kh, kh], &mut rng);
            let tape = Tape::new();
            let got = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), s, p).unwrap().value();
            let want = naive_conv(&x, &k, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let err = x.conv2d(k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        let big = tape.constant(Tensor::zeros(vec![1, 2, 5, 5]));
        assert!(x.conv2d(big, 1, 0).is_err());
    }

    #[test]
    fn transpose_of_single_pixel_spreads_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 1, 1], 5.0));
        let k = tape.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let y = x.conv_transpose2d(k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, kh, s, p) in &[(8, 3, 1, 1), (8, 4, 2, 1), (7, 3, 2, 1), (6, 2, 2, 0)] {
            let x = random(&[2, 3, h, h], &mut rng);
            let k = random(&[5, 3, kh, kh], &mut rng);
            let tape = Tape::new();
            let kv = tape.constant(k.clone());
            let cx = tape.constant(x.clone()).conv2d(kv, s, p).unwrap().value();
            let y = random(cx.shape(), &mut rng);
            let ty = tape.constant(y.clone()).conv_transpose2d(kv, s, p).unwrap().value();
            // Transposed output extent is the largest input the forward map accepts.
            let hx = ty.shape()[2];
            let mut xc = Tensor::zeros(ty.shape().to_vec());
            for b in 0..2 {
                for c in 0..3 {
                    for i in 0..hx.min(h) {
                        for j in 0..hx.min(h) {
                            xc.set(&[b, c, i, j], x.get(&[b, c, i, j]));
                        }
                    }
                }
            }
            let cxc = tape.constant(xc.clone()).conv2d(kv, s, p).unwrap().value();
            let lhs = cxc.dot(&y);
            let rhs = xc.dot(&ty);
            assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let kk = k.clone();
        let err = grad_check(move |v| Ok(v.conv2d(v.tape().constant(kk.clone()), 1, 1)?.sum()), &x, 1e-5);
        assert!(err.max_rel_error <= 1e-3, "{err:?}");
        let err = grad_check(
            move |v| {
                let x = v.tape().constant(x.clone());
                Ok(x.conv2d(v, 2, 1)?.square().sum())
            },
            &k,
            1e-5,
        );
        assert!(err.max_rel_error <= 1e-3, "{err:?}");
    }

    #[test]
    fn conv_transpose2d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let k = random(&[4, 3, 4, 4], &mut rng);
        let kk = k.clone();
        let err = grad_check(
            move |v| Ok(v.conv_transpose2d(v.tape().constant(kk.clone()), 2, 1)?.square().sum()),
            &x,
            1e-5,
        );
        assert!(err.max_rel_error <= 1e-3, "{err:?}");
        let err = grad_check(
            move |v| Ok(v.tape().constant(x.clone()).conv_transpose2d(v, 2, 1)?.square().sum()),
            &k,
            1e-5,
        );
        assert!(err.max_rel_error <= 1e-3, "{err:?}");
    }
}
