//! Layer primitives with explicit forward and backward passes.
//!
//! Every layer is stateless with respect to activations: callers keep the
//! forward inputs they need and hand them back to `backward`, which accumulates
//! parameter gradients into [`Param::grad`].

use rand::Rng;

use crate::param::{Param, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a convolution over an input of extent `n`.
    pub fn conv_output(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over an input of extent `n`.
    pub fn transposed_output(&self, n: usize) -> Option<usize> {
        ((n.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds `image` (`c x h x w`) into columns `[c*k*k, out_h*out_w]`.
fn im2col<T: Scalar>(
    image: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (out_h, out_w): (usize, usize),
    cols: &mut [T],
) {
    let k = g.kernel;
    let plane = out_h * out_w;
    for ci in 0..c {
        let src = &image[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `image`, accumulating.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (out_h, out_w): (usize, usize),
    image: &mut [T],
) {
    let k = g.kernel;
    let plane = out_h * out_w;
    for ci in 0..c {
        let dst = &mut image[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * out_w..(oy + 1) * out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    geometry: ConvGeometry,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![out_channels, in_channels, k, k],
                0.0,
                INIT_STD,
                rng,
            ),
            bias: Param::filled(format!("{name}.bias"), vec![out_channels], T::zero()),
            in_channels,
            out_channels,
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    fn output_dims(&self, x: &Tensor<T>) -> (usize, usize) {
        assert_eq!(x.channels(), self.in_channels, "{}: channel count", self.weight.name());
        let oh = self.geometry.conv_output(x.height()).expect("input smaller than kernel");
        let ow = self.geometry.conv_output(x.width()).expect("input smaller than kernel");
        (oh, ow)
    }

    fn unfold(&self, x: &Tensor<T>, out: (usize, usize)) -> Vec<T> {
        let rows = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let mut cols = vec![T::zero(); rows * out.0 * out.1];
        im2col(x.data(), x.shape(), self.geometry, out, &mut cols);
        cols
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = self.output_dims(x);
        let cols = self.unfold(x, (oh, ow));
        let rows = cols.len() / (oh * ow);
        let plane = oh * ow;
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        for (co, &b) in self.bias.value.iter().enumerate() {
            out.plane_mut(co).iter_mut().for_each(|v| *v = b);
        }
        T::gemm(
            self.out_channels,
            rows,
            plane,
            T::one(),
            &self.weight.value,
            (rows as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            out.data_mut(),
            (plane as isize, 1),
        );
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = self.output_dims(x);
        assert_eq!(grad_out.shape(), (self.out_channels, oh, ow));
        let plane = oh * ow;
        let cols = self.unfold(x, (oh, ow));
        let rows = cols.len() / plane;

        for (co, g) in self.bias.grad.iter_mut().enumerate() {
            *g += grad_out.plane(co).iter().copied().sum::<T>();
        }
        // dW[co, r] += sum_p dOut[co, p] * cols[r, p]
        T::gemm(
            self.out_channels,
            plane,
            rows,
            T::one(),
            grad_out.data(),
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            T::one(),
            &mut self.weight.grad,
            (rows as isize, 1),
        );
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * plane];
        T::gemm(
            rows,
            self.out_channels,
            plane,
            T::one(),
            &self.weight.value,
            (1, rows as isize),
            grad_out.data(),
            (plane as isize, 1),
            T::zero(),
            &mut dcols,
            (plane as isize, 1),
        );
        let mut dx = Tensor::zeros(x.channels(), x.height(), x.width());
        col2im(&dcols, x.shape(), self.geometry, (oh, ow), dx.data_mut());
        Some(dx)
    }
}

/// Transposed 2-D convolution (fractionally strided), weight layout `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    geometry: ConvGeometry,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![in_channels, out_channels, k, k],
                0.0,
                INIT_STD,
                rng,
            ),
            bias: Param::filled(format!("{name}.bias"), vec![out_channels], T::zero()),
            in_channels,
            out_channels,
            geometry,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn output_dims(&self, x: &Tensor<T>) -> (usize, usize) {
        assert_eq!(x.channels(), self.in_channels, "{}: channel count", self.weight.name());
        let oh = self.geometry.transposed_output(x.height()).expect("degenerate input");
        let ow = self.geometry.transposed_output(x.width()).expect("degenerate input");
        (oh, ow)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = self.output_dims(x);
        let k = self.geometry.kernel;
        let rows = self.out_channels * k * k;
        let plane = x.plane_len();
        // cols[r, p] = sum_ci W[ci, r] * x[ci, p]
        let mut cols = vec![T::zero(); rows * plane];
        T::gemm(
            rows,
            self.in_channels,
            plane,
            T::one(),
            &self.weight.value,
            (1, rows as isize),
            x.data(),
            (plane as isize, 1),
            T::zero(),
            &mut cols,
            (plane as isize, 1),
        );
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        col2im(
            &cols,
            (self.out_channels, oh, ow),
            self.geometry,
            (x.height(), x.width()),
            out.data_mut(),
        );
        for (co, &b) in self.bias.value.iter().enumerate() {
            out.plane_mut(co).iter_mut().for_each(|v| *v += b);
        }
        out
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = self.output_dims(x);
        assert_eq!(grad_out.shape(), (self.out_channels, oh, ow));
        let k = self.geometry.kernel;
        let rows = self.out_channels * k * k;
        let plane = x.plane_len();

        for (co, g) in self.bias.grad.iter_mut().enumerate() {
            *g += grad_out.plane(co).iter().copied().sum::<T>();
        }
        let mut gcols = vec![T::zero(); rows * plane];
        im2col(
            grad_out.data(),
            grad_out.shape(),
            self.geometry,
            (x.height(), x.width()),
            &mut gcols,
        );
        // dW[ci, r] += sum_p x[ci, p] * gcols[r, p]
        T::gemm(
            self.in_channels,
            plane,
            rows,
            T::one(),
            x.data(),
            (plane as isize, 1),
            &gcols,
            (1, plane as isize),
            T::one(),
            &mut self.weight.grad,
            (rows as isize, 1),
        );
        if !want_input_grad {
            return None;
        }
        let mut dx = Tensor::zeros(self.in_channels, x.height(), x.width());
        T::gemm(
            self.in_channels,
            rows,
            plane,
            T::one(),
            &self.weight.value,
            (rows as isize, 1),
            &gcols,
            (plane as isize, 1),
            T::zero(),
            dx.data_mut(),
            (plane as isize, 1),
        );
        Some(dx)
    }
}

/// Per-channel normalization over the spatial extent of one sample, with a
/// learned affine transform. With a batch of one this is exactly what batch
/// normalization computes in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    eps: f64,
}

/// Activations kept from [`ChannelNorm::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> ChannelNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            gamma: Param::gaussian(format!("{name}.gamma"), vec![channels], 1.0, INIT_STD, rng),
            beta: Param::filled(format!("{name}.beta"), vec![channels], T::zero()),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let n = T::from_usize(x.plane_len()).unwrap();
        let eps = T::from_f64_lossy(self.eps);
        let mut normalized = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.channels());
        for c in 0..x.channels() {
            let plane = x.plane(c);
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for ((nv, ov), &v) in normalized
                .plane_mut(c)
                .iter_mut()
                .zip(out.plane_mut(c).iter_mut())
                .zip(plane)
            {
                *nv = (v - mean) * is;
                *ov = g * *nv + b;
            }
        }
        (
            out,
            NormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: &NormCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let xhat = &cache.normalized;
        let n = T::from_usize(xhat.plane_len()).unwrap();
        let mut dx = Tensor::zeros(xhat.channels(), xhat.height(), xhat.width());
        for c in 0..xhat.channels() {
            let go = grad_out.plane(c);
            let xh = xhat.plane(c);
            let sum_go: T = go.iter().copied().sum();
            let sum_go_xh: T = go.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            self.gamma.grad[c] += sum_go_xh;
            self.beta.grad[c] += sum_go;
            let g = self.gamma.value[c];
            let scale = g * cache.inv_std[c] / n;
            for ((d, &o), &h) in dx.plane_mut(c).iter_mut().zip(go).zip(xh) {
                *d = scale * (n * o - sum_go - h * sum_go_xh);
            }
        }
        dx
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64_lossy(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient through a leaky ReLU given the pre-activation input `x`.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64_lossy(slope);
    let mut out = grad.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g *= s;
        }
    }
    out
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Gradient through `tanh` given its output `y`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut out = grad.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(y.data()) {
        *g *= T::one() - v * v;
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}
