use crate::error::{Error, Result};
use crate::nncore::{Float, NdArray, Param};

/// Learnable lookup table mapping a CLC class to `dim` channels.
#[derive(Clone, Debug)]
pub struct Embedding<T> {
    /// `classes x dim`.
    pub table: Param<T>,
    cache: Option<(Vec<u16>, [usize; 3])>,
}

impl<T: Float> Embedding<T> {
    pub fn new(table: NdArray<T>) -> Self {
        Self {
            table: Param::new(table),
            cache: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    /// Maps an `n x h x w` class plane batch to `n x dim x h x w`.
    pub fn infer(&self, clc: &[u16], n: usize, h: usize, w: usize) -> Result<NdArray<T>> {
        let plane = h * w;
        if clc.len() != n * plane {
            return Err(Error::shape(
                "embedding",
                format!("{} classes for a {n} x {h} x {w} plane batch", clc.len()),
            ));
        }
        let (classes, dim) = (self.classes(), self.dim());
        if let Some(c) = clc.iter().find(|c| **c as usize >= classes) {
            return Err(Error::ClassOutOfRange {
                class: *c as usize,
                classes,
            });
        }
        let table = self.table.value.data();
        let mut out = NdArray::zeros(&[n, dim, h, w]);
        let data = out.data_mut();
        for s in 0..n {
            for (p, &c) in clc[s * plane..(s + 1) * plane].iter().enumerate() {
                let row = &table[c as usize * dim..(c as usize + 1) * dim];
                for (k, v) in row.iter().enumerate() {
                    data[(s * dim + k) * plane + p] = *v;
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, clc: &[u16], n: usize, h: usize, w: usize) -> Result<NdArray<T>> {
        let y = self.infer(clc, n, h, w)?;
        self.cache = Some((clc.to_vec(), [n, h, w]));
        Ok(y)
    }

    /// Scatters `n x dim x h x w` upstream gradients into the table rows.
    pub fn backward(&mut self, grad: &NdArray<T>) -> Result<()> {
        let (clc, [n, h, w]) = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("embedding"))?;
        let dim = self.dim();
        if grad.shape() != [*n, dim, *h, *w] {
            return Err(Error::shape("embedding", format!("upstream gradient {:?}", grad.shape())));
        }
        let plane = h * w;
        let g = grad.data();
        let tg = self.table.grad.data_mut();
        for s in 0..*n {
            for (p, &c) in clc[s * plane..(s + 1) * plane].iter().enumerate() {
                for k in 0..dim {
                    tg[c as usize * dim + k] += g[(s * dim + k) * plane + p];
                }
            }
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
