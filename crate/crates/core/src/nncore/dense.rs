//! Affine layer, ReLU and inverted dropout.

use rand::Rng;

use super::array::{Float, NdArray, Param};
use super::Mode;
use crate::error::{Error, Result};
use crate::rng::Rng as SeededRng;

/// `y = x W^T + b` for an N x in batch, with W stored out x in.
pub fn dense<T: Float>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.ndim() != 2 || x.shape()[1] != inp || b.len() != out {
        return Err(Error::shape(
            "dense",
            format!("input {:?}, weights {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let n = x.shape()[0];
    let mut y = NdArray::zeros(&[n, out]);
    for s in 0..n {
        let row = x.item(s);
        for o in 0..out {
            let wr = &w.data()[o * inp..(o + 1) * inp];
            let mut acc = T::zero();
            for (a, b) in row.iter().zip(wr) {
                acc += *a * *b;
            }
            y.data_mut()[s * out + o] = acc + b.data()[o];
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<NdArray<T>>,
}

impl<T: Float> Dense<T> {
    pub fn new(weight: NdArray<T>, bias: NdArray<T>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn infer(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        dense(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward(&mut self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &NdArray<T>) -> Result<NdArray<T>> {
        let x = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("dense"))?;
        let (out, inp) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let n = x.shape()[0];
        if grad.shape() != [n, out] {
            return Err(Error::shape("dense_backward", format!("gradient {:?} for output [{n}, {out}]", grad.shape())));
        }
        let mut gx = NdArray::zeros(&[n, inp]);
        for s in 0..n {
            let xr = x.item(s);
            for o in 0..out {
                let g = grad.data()[s * out + o];
                self.bias.grad.data_mut()[o] += g;
                let gw = &mut self.weight.grad.data_mut()[o * inp..(o + 1) * inp];
                for (a, b) in gw.iter_mut().zip(xr) {
                    *a += g * *b;
                }
                let wr = &self.weight.value.data()[o * inp..(o + 1) * inp];
                let gxr = &mut gx.data_mut()[s * inp..(s + 1) * inp];
                for (a, b) in gxr.iter_mut().zip(wr) {
                    *a += g * *b;
                }
            }
        }
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

pub fn relu<T: Float>(x: &NdArray<T>) -> NdArray<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Float>(&mut self, x: &NdArray<T>) -> NdArray<T> {
        self.mask = Some(x.data().iter().map(|v| *v > T::zero()).collect());
        relu(x)
    }

    pub fn backward<T: Float>(&mut self, grad: &NdArray<T>) -> Result<NdArray<T>> {
        let mask = self.mask.as_ref().ok_or(Error::BackwardBeforeForward("relu"))?;
        let mut g = grad.clone();
        for (v, keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = T::zero();
            }
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Inverted dropout: in train mode each element is kept with probability
/// `1 - rate` and scaled by `1 / (1 - rate)`; eval mode is the identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        Ok(Self { rate, mask: None })
    }

    pub fn forward<T: Float>(&mut self, x: &NdArray<T>, mode: Mode, rng: Option<&mut SeededRng>) -> Result<NdArray<T>> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = Some(vec![1.0; x.len()]);
            return Ok(x.clone());
        }
        let rng = rng.ok_or_else(|| Error::Invalid("train-mode dropout needs a random stream".into()))?;
        let scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= T::of(*m);
        }
        self.mask = Some(mask);
        Ok(y)
    }

    pub fn backward<T: Float>(&mut self, grad: &NdArray<T>) -> Result<NdArray<T>> {
        let mask = self.mask.as_ref().ok_or(Error::BackwardBeforeForward("dropout"))?;
        let mut g = grad.clone();
        for (v, m) in g.data_mut().iter_mut().zip(mask) {
            *v *= T::of(*m);
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}
