use rand::Rng as _;

use super::embedding::Embedding;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nncore::convlstm::{concat_channels, split_channels};
use crate::nncore::{
    log_softmax, log_softmax_nll, BatchNorm, Conv2d, ConvLstmCell, Dense, Dropout, Float, GradTarget, MaxPool2d,
    Mode, NdArray, Param, Relu,
};
use crate::rng::{self, Rng};

/// A batch of standardized patches: `n x temporal_len x channels x size x size`
/// continuous values and `n x size x size` CLC classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub temporal_len: usize,
    pub channels: usize,
    pub size: usize,
    pub values: Vec<T>,
    pub clc: Vec<u16>,
}

impl<T: Float> Batch<T> {
    pub fn new(n: usize, temporal_len: usize, channels: usize, size: usize, values: Vec<T>, clc: Vec<u16>) -> Result<Self> {
        if values.len() != n * temporal_len * channels * size * size || clc.len() != n * size * size {
            return Err(Error::shape(
                "batch",
                format!(
                    "{} values and {} classes for {n} samples of {temporal_len} x {channels} x {size} x {size}",
                    values.len(),
                    clc.len()
                ),
            ));
        }
        Ok(Self {
            n,
            temporal_len,
            channels,
            size,
            values,
            clc,
        })
    }

    /// `n x channels x size x size` values of one timestep.
    pub fn step(&self, t: usize) -> NdArray<T> {
        let frame = self.channels * self.size * self.size;
        let mut data = Vec::with_capacity(self.n * frame);
        for s in 0..self.n {
            let off = (s * self.temporal_len + t) * frame;
            data.extend_from_slice(&self.values[off..off + frame]);
        }
        NdArray::from_vec(&[self.n, self.channels, self.size, self.size], data).expect("consistent batch")
    }

    pub fn cast<U: Float>(&self) -> Batch<U> {
        Batch {
            n: self.n,
            temporal_len: self.temporal_len,
            channels: self.channels,
            size: self.size,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            clc: self.clc.clone(),
        }
    }

    /// Row `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Batch<T> {
        let len = self.temporal_len * self.channels * self.size * self.size;
        let plane = self.size * self.size;
        Batch {
            n: 1,
            temporal_len: self.temporal_len,
            channels: self.channels,
            size: self.size,
            values: self.values[i * len..(i + 1) * len].to_vec(),
            clc: self.clc[i * plane..(i + 1) * plane].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    relu: Relu,
    pool: MaxPool2d,
}

impl<T: Float> ConvBlock<T> {
    fn infer(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let y = self.bn.infer(&self.conv.infer(x)?)?;
        self.pool.infer(&crate::nncore::relu(&y))
    }

    fn forward(&mut self, x: &NdArray<T>, mode: Mode) -> Result<NdArray<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, mode)?;
        let y = self.relu.forward(&y);
        self.pool.forward(&y)
    }

    fn backward(&mut self, g: &NdArray<T>) -> Result<NdArray<T>> {
        let g = self.pool.backward(g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
        self.pool.clear_cache();
    }
}

#[derive(Clone, Debug)]
pub struct HiddenLayer<T> {
    pub dense: Dense<T>,
    pub bn: BatchNorm<T>,
    relu: Relu,
    dropout: Dropout,
}

impl<T: Float> HiddenLayer<T> {
    fn infer(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        Ok(crate::nncore::relu(&self.bn.infer(&self.dense.infer(x)?)?))
    }

    fn forward(&mut self, x: &NdArray<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<NdArray<T>> {
        let y = self.dense.forward(x)?;
        let y = self.bn.forward(&y, mode)?;
        let y = self.relu.forward(&y);
        self.dropout.forward(&y, mode, rng)
    }

    fn backward(&mut self, g: &NdArray<T>) -> Result<NdArray<T>> {
        let g = self.dropout.backward(g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.dense.backward(&g)
    }

    fn clear_cache(&mut self) {
        self.dense.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
        self.dropout.clear_cache();
    }
}

/// Embedding -> (ConvLSTM cell) -> conv blocks -> hidden dense layers -> 2-way head.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub embedding: Embedding<T>,
    pub cell: Option<ConvLstmCell<T>>,
    pub blocks: Vec<ConvBlock<T>>,
    pub hidden: Vec<HiddenLayer<T>>,
    pub head: Dense<T>,
    flat_shape: Option<Vec<usize>>,
}

fn uniform<T: Float>(shape: &[usize], bound: f64, seed: u64, name: &str) -> NdArray<T> {
    let mut r = rng::stream(seed, &format!("init/{name}"));
    NdArray::from_fn(shape, |_| T::of(r.random_range(-bound..=bound)))
}

/// Kaiming-uniform weights (ReLU gain) and fan-in scaled uniform biases.
fn kaiming<T: Float>(shape: &[usize], seed: u64, name: &str) -> (NdArray<T>, NdArray<T>) {
    let fan_in: usize = shape[1..].iter().product();
    let w = uniform(shape, (6.0 / fan_in as f64).sqrt(), seed, &format!("{name}.weight"));
    let b = uniform(&[shape[0]], 1.0 / (fan_in as f64).sqrt(), seed, &format!("{name}.bias"));
    (w, b)
}

impl<T: Float> Network<T> {
    /// Deterministic initialization from `config.init_seed`; every array draws
    /// from its own named stream.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.init_seed;
        let k = config.kernel;
        let pad = match config.padding {
            super::Padding::Same => (k - 1) / 2,
            super::Padding::Valid => 0,
        };
        let embedding = Embedding::new(uniform(
            &[config.clc_classes, config.embedding_dim],
            0.1,
            seed,
            "embedding.table",
        ));
        let mut c = config.input_channels();
        let cell = if config.is_recurrent() {
            let f = config.convlstm_hidden;
            let (w, b) = kaiming(&[4 * f, c + f, k, k], seed, "cell");
            c = f;
            Some(ConvLstmCell::new(w, b)?)
        } else {
            None
        };
        let mut blocks = Vec::new();
        for (i, &o) in config.conv_channels.iter().enumerate() {
            let (w, b) = kaiming(&[o, c, k, k], seed, &format!("block{i}.conv"));
            blocks.push(ConvBlock {
                conv: Conv2d::new(w, b, pad),
                bn: BatchNorm::new(o),
                relu: Relu::default(),
                pool: MaxPool2d::default(),
            });
            c = o;
        }
        let mut d = config.flatten_len()?;
        let mut hidden = Vec::new();
        for (i, &wd) in config.classifier_widths.iter().enumerate() {
            let (w, b) = kaiming(&[wd, d], seed, &format!("fc{i}.dense"));
            hidden.push(HiddenLayer {
                dense: Dense::new(w, b),
                bn: BatchNorm::new(wd),
                relu: Relu::default(),
                dropout: Dropout::new(config.dropout)?,
            });
            d = wd;
        }
        let (w, b) = kaiming(&[2, d], seed, "head");
        Ok(Self {
            config: config.clone(),
            embedding,
            cell,
            blocks,
            hidden,
            head: Dense::new(w, b),
            flat_shape: None,
        })
    }

    fn check(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        if batch.size != c.patch_size || batch.channels != c.continuous_channels || batch.temporal_len != c.temporal_len {
            return Err(Error::shape(
                "model input",
                format!(
                    "{} expects {} x {} x {}^2 per sample, batch holds {} x {} x {}^2",
                    c.architecture, c.temporal_len, c.continuous_channels, c.patch_size,
                    batch.temporal_len, batch.channels, batch.size
                ),
            ));
        }
        if batch.n == 0 {
            return Err(Error::shape("model input", "empty batch"));
        }
        Ok(())
    }

    /// Eval-mode logits without touching any cache.
    pub fn infer(&self, batch: &Batch<T>) -> Result<NdArray<T>> {
        self.check(batch)?;
        let s = batch.size;
        let emb = self.embedding.infer(&batch.clc, batch.n, s, s)?;
        let mut x = match &self.cell {
            Some(cell) => {
                let xs = (0..batch.temporal_len)
                    .map(|t| concat_channels(&batch.step(t), &emb))
                    .collect::<Result<Vec<_>>>()?;
                cell.infer(&xs)?
            }
            None => concat_channels(&batch.step(0), &emb)?,
        };
        for b in &self.blocks {
            x = b.infer(&x)?;
        }
        let n = x.shape()[0];
        let flat = x.len() / n;
        let mut x = x.reshape(&[n, flat])?;
        for h in &self.hidden {
            x = h.infer(&x)?;
        }
        self.head.infer(&x)
    }

    pub fn log_probs(&self, batch: &Batch<T>) -> Result<NdArray<T>> {
        log_softmax(&self.infer(batch)?)
    }

    /// Logits with caches filled for `backward`. Train mode needs a dropout
    /// stream when the dropout rate is positive.
    pub fn forward(&mut self, batch: &Batch<T>, mode: Mode, mut rng: Option<&mut Rng>) -> Result<NdArray<T>> {
        self.check(batch)?;
        let s = batch.size;
        let emb = self.embedding.forward(&batch.clc, batch.n, s, s)?;
        let mut x = match &mut self.cell {
            Some(cell) => {
                let xs = (0..batch.temporal_len)
                    .map(|t| concat_channels(&batch.step(t), &emb))
                    .collect::<Result<Vec<_>>>()?;
                cell.forward(&xs)?
            }
            None => concat_channels(&batch.step(0), &emb)?,
        };
        for b in &mut self.blocks {
            x = b.forward(&x, mode)?;
        }
        self.flat_shape = Some(x.shape().to_vec());
        let n = x.shape()[0];
        let flat = x.len() / n;
        let mut x = x.reshape(&[n, flat])?;
        for h in &mut self.hidden {
            x = h.forward(&x, mode, rng.as_deref_mut())?;
        }
        self.head.forward(&x)
    }

    /// Accumulates parameter gradients from a gradient on the logits.
    pub fn backward(&mut self, grad_logits: &NdArray<T>) -> Result<()> {
        let shape = self.flat_shape.clone().ok_or(Error::BackwardBeforeForward("network"))?;
        let mut g = self.head.backward(grad_logits)?;
        for h in self.hidden.iter_mut().rev() {
            g = h.backward(&g)?;
        }
        let mut g = g.reshape(&shape)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let cont = self.config.continuous_channels;
        let demb = match &mut self.cell {
            Some(cell) => {
                let dxs = cell.backward(&g)?;
                let mut acc: Option<NdArray<T>> = None;
                for dx in dxs {
                    let (_, de) = split_channels(&dx, cont)?;
                    acc = Some(match acc {
                        None => de,
                        Some(mut a) => {
                            for (p, q) in a.data_mut().iter_mut().zip(de.data()) {
                                *p += *q;
                            }
                            a
                        }
                    });
                }
                acc.ok_or(Error::BackwardBeforeForward("convlstm"))?
            }
            None => split_channels(&g, cont)?.1,
        };
        self.embedding.backward(&demb)
    }

    pub fn clear_cache(&mut self) {
        self.embedding.clear_cache();
        if let Some(c) = &mut self.cell {
            c.clear_cache();
        }
        for b in &mut self.blocks {
            b.clear_cache();
        }
        for h in &mut self.hidden {
            h.clear_cache();
        }
        self.head.clear_cache();
        self.flat_shape = None;
    }

    /// Learnable parameters in a fixed order.
    pub fn named_params(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out: Vec<(String, &mut Param<T>)> = vec![("embedding.table".into(), &mut self.embedding.table)];
        if let Some(c) = &mut self.cell {
            out.push(("cell.weight".into(), &mut c.weight));
            out.push(("cell.bias".into(), &mut c.bias));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("block{i}.conv.bias"), &mut b.conv.bias));
            out.push((format!("block{i}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.bn.beta));
        }
        for (i, h) in self.hidden.iter_mut().enumerate() {
            out.push((format!("fc{i}.dense.weight"), &mut h.dense.weight));
            out.push((format!("fc{i}.dense.bias"), &mut h.dense.bias));
            out.push((format!("fc{i}.bn.gamma"), &mut h.bn.gamma));
            out.push((format!("fc{i}.bn.beta"), &mut h.bn.beta));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Every persisted array (parameter values, then batchnorm running
    /// statistics) in a fixed order.
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut NdArray<T>)> {
        let mut bn: Vec<(String, &mut BatchNorm<T>)> = Vec::new();
        let mut out: Vec<(String, &mut NdArray<T>)> = Vec::new();
        out.push(("embedding.table".into(), &mut self.embedding.table.value));
        if let Some(c) = &mut self.cell {
            out.push(("cell.weight".into(), &mut c.weight.value));
            out.push(("cell.bias".into(), &mut c.bias.value));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv.weight"), &mut b.conv.weight.value));
            out.push((format!("block{i}.conv.bias"), &mut b.conv.bias.value));
            bn.push((format!("block{i}.bn"), &mut b.bn));
        }
        for (i, h) in self.hidden.iter_mut().enumerate() {
            out.push((format!("fc{i}.dense.weight"), &mut h.dense.weight.value));
            out.push((format!("fc{i}.dense.bias"), &mut h.dense.bias.value));
            bn.push((format!("fc{i}.bn"), &mut h.bn));
        }
        out.push(("head.weight".into(), &mut self.head.weight.value));
        out.push(("head.bias".into(), &mut self.head.bias.value));
        for (name, b) in bn {
            let BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } = b;
            out.push((format!("{name}.gamma"), &mut gamma.value));
            out.push((format!("{name}.beta"), &mut beta.value));
            out.push((format!("{name}.running_mean"), running_mean));
            out.push((format!("{name}.running_var"), running_var));
        }
        out
    }

    /// Snapshot of all persisted arrays.
    pub fn arrays(&self) -> Vec<(String, NdArray<T>)> {
        let mut copy = self.clone();
        copy.arrays_mut().into_iter().map(|(n, a)| (n, a.clone())).collect()
    }

    pub fn cast<U: Float>(&self) -> Result<Network<U>> {
        let mut out = Network::<U>::new(&self.config)?;
        let src = self.arrays();
        for ((_, dst), (_, s)) in out.arrays_mut().into_iter().zip(&src) {
            *dst = s.cast();
        }
        Ok(out)
    }
}

/// Mean NLL of a network on a fixed batch, with batchnorm in eval mode and
/// dropout off, for finite-difference checks.
pub struct ClassifierGradTarget {
    pub network: Network<f64>,
    pub batch: Batch<f64>,
    pub labels: Vec<u8>,
}

impl GradTarget for ClassifierGradTarget {
    fn params(&mut self) -> Vec<(String, &mut Param<f64>)> {
        self.network.named_params()
    }

    fn loss(&mut self) -> Result<f64> {
        let logits = self.network.infer(&self.batch)?;
        Ok(log_softmax_nll(&logits, &self.labels)?.0)
    }

    fn loss_and_backward(&mut self) -> Result<f64> {
        let logits = self.network.forward(&self.batch, Mode::Eval, None)?;
        let (loss, grad) = log_softmax_nll(&logits, &self.labels)?;
        self.network.backward(&grad)?;
        Ok(loss)
    }
}
