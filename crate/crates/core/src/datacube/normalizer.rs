//! Per-channel z-score statistics fitted on a training day range.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DataCube, N_CHANNELS};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Read access to one channel raster of one day. Lets tests observe which
/// frames a fit touches.
pub trait ChannelFrames {
    fn frame(&self, channel: usize, day: usize) -> &[f32];
}

impl ChannelFrames for DataCube {
    fn frame(&self, channel: usize, day: usize) -> &[f32] {
        DataCube::frame(self, channel, day)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fit_days: Range<usize>,
}

impl Normalizer {
    #[inline]
    pub fn apply(&self, channel: usize, v: f32) -> f32 {
        ((v as f64 - self.mean[channel]) / self.std[channel]) as f32
    }

    pub fn apply_slice(&self, channel: usize, values: &mut [f32]) {
        for v in values {
            *v = self.apply(channel, *v);
        }
    }
}

/// Fits mean and population std of each continuous channel over every pixel
/// of `days`. Frames outside `days` are never read.
pub fn fit_normalizer<C: ChannelFrames + ?Sized>(cube: &C, days: Range<usize>) -> Result<Normalizer> {
    if days.is_empty() {
        return Err(Error::Invalid("normalizer fit range is empty".into()));
    }
    let mut mean = Vec::with_capacity(N_CHANNELS);
    let mut std = Vec::with_capacity(N_CHANNELS);
    for c in 0..N_CHANNELS {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for d in days.clone() {
            let f = cube.frame(c, d);
            n += f.len();
            sum += f.iter().map(|v| *v as f64).sum::<f64>();
        }
        let m = sum / n as f64;
        let mut ss = 0.0f64;
        for d in days.clone() {
            ss += cube.frame(c, d).iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>();
        }
        mean.push(m);
        std.push((ss / n as f64).sqrt().max(STD_FLOOR));
    }
    Ok(Normalizer {
        mean,
        std,
        fit_days: days,
    })
}
