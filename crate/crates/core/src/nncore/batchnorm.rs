use super::array::{Float, NdArray, Param};
use super::Mode;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over axis 1 of an N x C (dense) or N x C x H x W
/// (convolutional) batch.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: NdArray<T>,
    pub running_var: NdArray<T>,
    pub eps: T,
    pub momentum: T,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: NdArray<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batchnorm", format!("expected at least 2 axes, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Float> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::new(NdArray::full(&[features], T::one())),
            beta: Param::new(NdArray::zeros(&[features])),
            running_mean: NdArray::zeros(&[features]),
            running_var: NdArray::full(&[features], T::one()),
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &NdArray<T>) -> Result<(usize, usize, usize)> {
        let (n, c, inner) = layout(x.shape())?;
        if c != self.features() {
            return Err(Error::shape(
                "batchnorm",
                format!("input has {c} channels, layer normalizes {}", self.features()),
            ));
        }
        Ok((n, c, inner))
    }

    /// Eval-mode normalization with the running statistics.
    pub fn infer(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let (n, c, inner) = self.check(x)?;
        let mut y = x.clone();
        for ch in 0..c {
            let inv = T::one() / (self.running_var.data()[ch] + self.eps).sqrt();
            let (m, g, b) = (self.running_mean.data()[ch], self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for v in &mut y.data_mut()[off..off + inner] {
                    *v = g * ((*v - m) * inv) + b;
                }
            }
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &NdArray<T>, mode: Mode) -> Result<NdArray<T>> {
        let (n, c, inner) = self.check(x)?;
        if mode == Mode::Eval {
            let inv_std: Vec<T> = (0..c)
                .map(|ch| T::one() / (self.running_var.data()[ch] + self.eps).sqrt())
                .collect();
            let mut xhat = x.clone();
            for ch in 0..c {
                let m = self.running_mean.data()[ch];
                for s in 0..n {
                    let off = (s * c + ch) * inner;
                    for v in &mut xhat.data_mut()[off..off + inner] {
                        *v = (*v - m) * inv_std[ch];
                    }
                }
            }
            let y = self.infer(x)?;
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                batch_stats: false,
            });
            return Ok(y);
        }
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let count = n * inner;
        let cnt = T::of(count as f64);
        let mut y = NdArray::zeros(x.shape());
        let mut xhat = NdArray::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for v in &x.data()[off..off + inner] {
                    sum += *v;
                }
            }
            let mean = sum / cnt;
            let mut ss = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for v in &x.data()[off..off + inner] {
                    let d = *v - mean;
                    ss += d * d;
                }
            }
            let var = ss / cnt;
            let inv = T::one() / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for k in off..off + inner {
                    let h = (x.data()[k] - mean) * inv;
                    xhat.data_mut()[k] = h;
                    y.data_mut()[k] = g * h + b;
                }
            }
            let unbiased = ss / T::of((count - 1) as f64);
            let mom = self.momentum;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &NdArray<T>) -> Result<NdArray<T>> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("batchnorm"))?;
        if grad.shape() != cache.xhat.shape() {
            return Err(Error::shape("batchnorm_backward", "gradient shape differs from forward input"));
        }
        let (n, c, inner) = layout(grad.shape())?;
        let cnt = T::of((n * inner) as f64);
        let mut gx = NdArray::zeros(grad.shape());
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for k in off..off + inner {
                    sum_g += grad.data()[k];
                    sum_gx += grad.data()[k] * cache.xhat.data()[k];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx;
            self.beta.grad.data_mut()[ch] += sum_g;
            let inv = cache.inv_std[ch];
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for k in off..off + inner {
                    gx.data_mut()[k] = if cache.batch_stats {
                        g * inv / cnt * (cnt * grad.data()[k] - sum_g - cache.xhat.data()[k] * sum_gx)
                    } else {
                        g * inv * grad.data()[k]
                    };
                }
            }
        }
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
