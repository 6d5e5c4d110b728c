//! 2-D convolution (cross-correlation, stride 1) via per-sample im2col + GEMM.
//!
//! Every sample is processed with identically shaped matrix products, so the
//! result for one sample never depends on which other samples share the batch.

use super::array::{Float, NdArray, Param};
use crate::error::{Error, Result};

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn geometry<T: Float>(x: &NdArray<T>, w: &NdArray<T>, padding: usize) -> Result<Geometry> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} must be N x C x H x W and weights {:?} O x C x K x K", x.shape(), w.shape()),
        ));
    }
    let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wc, k, k2) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but weights {:?} expect {wc}", w.shape()),
        ));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
    }
    if padding != 0 && padding != (k - 1) / 2 {
        return Err(Error::shape(
            "conv2d",
            format!("padding {padding} must be 0 or {}", (k - 1) / 2),
        ));
    }
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {h}x{wd} with padding {padding} is smaller than kernel {k}"),
        ));
    }
    Ok(Geometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        padding,
        out_h: h + 2 * padding - k + 1,
        out_w: wd + 2 * padding - k + 1,
    })
}

/// Valid output-column range `[lo, hi)` for kernel column `kx`, i.e. the
/// columns whose input column `ox + kx - pad` lies inside the plane.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx);
    let hi = (g.width + g.padding).saturating_sub(kx).min(g.out_w);
    (lo, hi.max(lo))
}

/// Unfolds one C x H x W sample into a (C*K*K) x (H'*W') column matrix.
fn im2col<T: Float>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let s0 = lo + kx - g.padding;
                    line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto a C x H x W sample gradient.
fn col2im<T: Float>(cols: &[T], g: &Geometry, gx: &mut [T]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut gx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let s0 = lo + kx - g.padding;
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width + s0..iy as usize * g.width + s0 + (hi - lo)];
                    for (d, v) in dst.iter_mut().zip(&src[oy * g.out_w + lo..oy * g.out_w + hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Batched forward: `x` is N x C x H x W, `w` is O x C x K x K, `b` has O entries.
pub fn conv2d<T: Float>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>, padding: usize) -> Result<NdArray<T>> {
    let g = geometry(x, w, padding)?;
    let o = w.shape()[0];
    if b.len() != o {
        return Err(Error::shape("conv2d", format!("bias has {} entries for {o} filters", b.len())));
    }
    let n = x.shape()[0];
    let p = g.out_pixels();
    let kk = g.cols_rows();
    let mut out = NdArray::zeros(&[n, o, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); kk * p];
    for (i, y) in out.data_mut().chunks_mut(o * p).enumerate() {
        im2col(x.item(i), &g, &mut cols);
        for (f, row) in y.chunks_mut(p).enumerate() {
            row.fill(b.data()[f]);
        }
        T::gemm(o, kk, p, T::one(), w.data(), false, &cols, false, T::one(), y);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] given its input and the upstream gradient.
/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn conv2d_backward<T: Float>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    padding: usize,
    grad_out: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let g = geometry(x, w, padding)?;
    let o = w.shape()[0];
    let n = x.shape()[0];
    if grad_out.shape() != [n, o, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?} does not match output [{n}, {o}, {}, {}]", grad_out.shape(), g.out_h, g.out_w),
        ));
    }
    let p = g.out_pixels();
    let kk = g.cols_rows();
    let mut gx = NdArray::zeros(x.shape());
    let mut gw = NdArray::zeros(w.shape());
    let mut gb = NdArray::zeros(&[o]);
    let mut cols = vec![T::zero(); kk * p];
    let mut gcols = vec![T::zero(); kk * p];
    let item = x.item_len();
    for i in 0..n {
        let gy = grad_out.item(i);
        im2col(x.item(i), &g, &mut cols);
        // samples are accumulated in index order: bit-stable weight gradients
        T::gemm(o, p, kk, T::one(), gy, false, &cols, true, T::one(), gw.data_mut());
        for (f, row) in gy.chunks(p).enumerate() {
            let mut s = T::zero();
            for v in row {
                s += *v;
            }
            gb.data_mut()[f] += s;
        }
        T::gemm(kk, o, p, T::one(), w.data(), true, gy, false, T::zero(), &mut gcols);
        col2im(&gcols, &g, &mut gx.data_mut()[i * item..(i + 1) * item]);
    }
    Ok((gx, gw, gb))
}

/// Convolution layer with cached input for backpropagation.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub padding: usize,
    cache: Option<NdArray<T>>,
}

impl<T: Float> Conv2d<T> {
    pub fn new(weight: NdArray<T>, bias: NdArray<T>, padding: usize) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        conv2d(x, &self.weight.value, &self.bias.value, self.padding)
    }

    pub fn forward(&mut self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &NdArray<T>) -> Result<NdArray<T>> {
        let x = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("conv2d"))?;
        let (gx, gw, gb) = conv2d_backward(x, &self.weight.value, self.padding, grad)?;
        for (a, b) in self.weight.grad.data_mut().iter_mut().zip(gw.data()) {
            *a += *b;
        }
        for (a, b) in self.bias.grad.data_mut().iter_mut().zip(gb.data()) {
            *a += *b;
        }
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
