//! Convolutional LSTM cell.
//!
//! Gates are computed by a single same-padded convolution over the channel
//! concatenation `[x, h]`, producing `4F` maps split as `i, f, o, g`:
//!
//! ```text
//! i, f, o = sigmoid(.)    g = tanh(.)
//! c' = f * c + i * g
//! h' = o * tanh(c')
//! ```

use super::array::{Float, NdArray, Param};
use super::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};

/// Concatenates two N x A x H x W and N x B x H x W batches along axis 1.
pub fn concat_channels<T: Float>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
    }
    let n = sa[0];
    let (la, lb) = (a.item_len(), b.item_len());
    let mut data = Vec::with_capacity(n * (la + lb));
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    NdArray::from_vec(&[n, sa[1] + sb[1], sa[2], sa[3]], data)
}

/// Splits an N x (A+B) x H x W batch into its first `a` channels and the rest.
pub fn split_channels<T: Float>(x: &NdArray<T>, a: usize) -> Result<(NdArray<T>, NdArray<T>)> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let b = s[1] - a;
    let mut first = Vec::with_capacity(s[0] * a * plane);
    let mut second = Vec::with_capacity(s[0] * b * plane);
    for i in 0..s[0] {
        let item = x.item(i);
        first.extend_from_slice(&item[..a * plane]);
        second.extend_from_slice(&item[a * plane..]);
    }
    Ok((
        NdArray::from_vec(&[s[0], a, s[2], s[3]], first)?,
        NdArray::from_vec(&[s[0], b, s[2], s[3]], second)?,
    ))
}

fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Intermediate values of one step, kept for backpropagation through time.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    combined: NdArray<T>,
    i: Vec<T>,
    f: Vec<T>,
    o: Vec<T>,
    g: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
}

/// One cell step. Returns `(h', c')` and the step cache.
pub fn convlstm_cell_step<T: Float>(
    x: &NdArray<T>,
    h: &NdArray<T>,
    c: &NdArray<T>,
    weight: &NdArray<T>,
    bias: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, StepCache<T>)> {
    if x.ndim() != 4 || h.ndim() != 4 || h.shape() != c.shape() {
        return Err(Error::shape(
            "convlstm_cell_step",
            format!("input {:?}, hidden {:?}, cell {:?}", x.shape(), h.shape(), c.shape()),
        ));
    }
    if x.shape()[2..] != h.shape()[2..] || x.shape()[0] != h.shape()[0] {
        return Err(Error::shape(
            "convlstm_cell_step",
            format!("spatial extent drifted: input {:?} vs state {:?}", x.shape(), h.shape()),
        ));
    }
    let feat = h.shape()[1];
    if weight.shape()[0] != 4 * feat {
        return Err(Error::shape(
            "convlstm_cell_step",
            format!("gate weights {:?} do not produce 4 x {feat} maps", weight.shape()),
        ));
    }
    let k = weight.shape()[2];
    let combined = concat_channels(x, h)?;
    let gates = conv2d(&combined, weight, bias, (k - 1) / 2)?;
    let n = x.shape()[0];
    let plane = x.shape()[2] * x.shape()[3];
    let per = feat * plane;
    let total = n * per;
    let (mut i, mut f, mut o, mut g) = (
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
    );
    for s in 0..n {
        let gs = gates.item(s);
        i.extend(gs[..per].iter().map(|v| sigmoid(*v)));
        f.extend(gs[per..2 * per].iter().map(|v| sigmoid(*v)));
        o.extend(gs[2 * per..3 * per].iter().map(|v| sigmoid(*v)));
        g.extend(gs[3 * per..].iter().map(|v| v.tanh()));
    }
    let c_prev = c.data().to_vec();
    let mut c_next = NdArray::zeros(h.shape());
    let mut h_next = NdArray::zeros(h.shape());
    let mut tanh_c = vec![T::zero(); total];
    for k in 0..total {
        let cn = f[k] * c_prev[k] + i[k] * g[k];
        c_next.data_mut()[k] = cn;
        tanh_c[k] = cn.tanh();
        h_next.data_mut()[k] = o[k] * tanh_c[k];
    }
    Ok((
        h_next,
        c_next,
        StepCache {
            combined,
            i,
            f,
            o,
            g,
            c_prev,
            tanh_c,
        },
    ))
}

/// ConvLSTM cell unrolled over a sequence from zero initial state.
#[derive(Clone, Debug)]
pub struct ConvLstmCell<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub hidden: usize,
    steps: Vec<StepCache<T>>,
    input_channels: usize,
}

impl<T: Float> ConvLstmCell<T> {
    pub fn new(weight: NdArray<T>, bias: NdArray<T>) -> Result<Self> {
        if weight.shape()[0] % 4 != 0 {
            return Err(Error::shape("convlstm", "gate filter count must be a multiple of 4"));
        }
        let hidden = weight.shape()[0] / 4;
        if weight.shape()[1] <= hidden {
            return Err(Error::shape("convlstm", "gate weights must cover input and hidden channels"));
        }
        let input_channels = weight.shape()[1] - hidden;
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            hidden,
            steps: Vec::new(),
            input_channels,
        })
    }

    fn zero_state(&self, first: &NdArray<T>) -> NdArray<T> {
        let s = first.shape();
        NdArray::zeros(&[s[0], self.hidden, s[2], s[3]])
    }

    /// Runs the sequence (oldest first) and returns the final hidden state.
    pub fn infer(&self, xs: &[NdArray<T>]) -> Result<NdArray<T>> {
        let first = xs.first().ok_or_else(|| Error::shape("convlstm", "empty sequence"))?;
        let mut h = self.zero_state(first);
        let mut c = h.clone();
        for x in xs {
            let (hn, cn, _) = convlstm_cell_step(x, &h, &c, &self.weight.value, &self.bias.value)?;
            h = hn;
            c = cn;
        }
        Ok(h)
    }

    pub fn forward(&mut self, xs: &[NdArray<T>]) -> Result<NdArray<T>> {
        let first = xs.first().ok_or_else(|| Error::shape("convlstm", "empty sequence"))?;
        let mut h = self.zero_state(first);
        let mut c = h.clone();
        self.steps.clear();
        for x in xs {
            let (hn, cn, cache) = convlstm_cell_step(x, &h, &c, &self.weight.value, &self.bias.value)?;
            self.steps.push(cache);
            h = hn;
            c = cn;
        }
        Ok(h)
    }

    /// Backpropagation through time from a gradient on the final hidden state.
    /// Returns the input gradient of every step, oldest first.
    pub fn backward(&mut self, grad_h: &NdArray<T>) -> Result<Vec<NdArray<T>>> {
        if self.steps.is_empty() {
            return Err(Error::BackwardBeforeForward("convlstm"));
        }
        let feat = self.hidden;
        let k = self.weight.value.shape()[2];
        let shape = grad_h.shape().to_vec();
        let n = shape[0];
        let plane = shape[2] * shape[3];
        let per = feat * plane;
        let mut dh = grad_h.data().to_vec();
        let mut dc = vec![T::zero(); dh.len()];
        let mut dxs = Vec::with_capacity(self.steps.len());
        for step in self.steps.iter().rev() {
            let mut dgates = NdArray::zeros(&[n, 4 * feat, shape[2], shape[3]]);
            let mut dc_prev = vec![T::zero(); dh.len()];
            for s in 0..n {
                let dg = &mut dgates.data_mut()[s * 4 * per..(s + 1) * 4 * per];
                for p in 0..per {
                    let kk = s * per + p;
                    let (i, f, o, g, tc) = (step.i[kk], step.f[kk], step.o[kk], step.g[kk], step.tanh_c[kk]);
                    let dcell = dc[kk] + dh[kk] * o * (T::one() - tc * tc);
                    let d_o = dh[kk] * tc;
                    let d_i = dcell * g;
                    let d_g = dcell * i;
                    let d_f = dcell * step.c_prev[kk];
                    dc_prev[kk] = dcell * f;
                    dg[p] = d_i * i * (T::one() - i);
                    dg[per + p] = d_f * f * (T::one() - f);
                    dg[2 * per + p] = d_o * o * (T::one() - o);
                    dg[3 * per + p] = d_g * (T::one() - g * g);
                }
            }
            let (dcomb, gw, gb) = conv2d_backward(&step.combined, &self.weight.value, (k - 1) / 2, &dgates)?;
            for (a, b) in self.weight.grad.data_mut().iter_mut().zip(gw.data()) {
                *a += *b;
            }
            for (a, b) in self.bias.grad.data_mut().iter_mut().zip(gb.data()) {
                *a += *b;
            }
            let (dx, dhp) = split_channels(&dcomb, self.input_channels)?;
            dxs.push(dx);
            dh = dhp.into_data();
            dc = dc_prev;
        }
        dxs.reverse();
        Ok(dxs)
    }

    pub fn clear_cache(&mut self) {
        self.steps.clear();
    }
}
