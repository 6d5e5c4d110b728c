use super::array::{Float, NdArray};
use crate::error::{Error, Result};

/// 2x2 max pooling with stride 2. Trailing odd rows/columns are dropped.
///
/// Returns the pooled batch and, per output element, the flat index of the
/// winning input element within its channel plane. Ties go to the first
/// maximum in row-major window order.
pub fn maxpool2d<T: Float>(x: &NdArray<T>) -> Result<(NdArray<T>, Vec<u32>)> {
    if x.ndim() != 4 {
        return Err(Error::shape("maxpool2d", format!("expected N x C x H x W, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape("maxpool2d", format!("plane {h}x{w} is smaller than the 2x2 window")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = NdArray::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison keeps the first maximum
                    if src[base + idx] > src[base + best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = src[base + best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

/// Routes the upstream gradient to the argmax positions recorded by [`maxpool2d`].
pub fn maxpool2d_backward<T: Float>(input_shape: &[usize], argmax: &[u32], grad: &NdArray<T>) -> Result<NdArray<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let plane_out = grad.shape()[2] * grad.shape()[3];
    if grad.len() != argmax.len() {
        return Err(Error::shape("maxpool2d_backward", "gradient does not match cached argmax"));
    }
    let mut gx = NdArray::zeros(input_shape);
    for (o, g) in grad.data().iter().enumerate() {
        let plane = o / plane_out;
        gx.data_mut()[plane * h * w + argmax[o] as usize] += *g;
    }
    Ok(gx)
}

#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2d {
    pub fn infer<T: Float>(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        Ok(maxpool2d(x)?.0)
    }

    pub fn forward<T: Float>(&mut self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let (y, arg) = maxpool2d(x)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    pub fn backward<T: Float>(&mut self, grad: &NdArray<T>) -> Result<NdArray<T>> {
        let (shape, arg) = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("maxpool2d"))?;
        maxpool2d_backward(shape, arg, grad)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
