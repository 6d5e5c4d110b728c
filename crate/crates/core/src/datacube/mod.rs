//! Spatiotemporal fire datacube: 14 continuous predictor channels per day, a
//! static land-cover (CLC) class map, a static susceptibility mask and a daily
//! burn mask.

mod format;
mod normalizer;
mod patch;
pub mod synthetic;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use format::{load_cube, payload_checksums, save_cube, FORMAT_VERSION};
pub use normalizer::{fit_normalizer, ChannelFrames, Normalizer};
pub use patch::{extract_normalized_into, extract_patch, reflect_index, RawPatch};
pub use synthetic::{generate_synthetic_cube, generate_with_truth, weather_index, LatentHazard, SyntheticConfig};

use crate::error::{Error, Result};

/// Continuous predictors, in storage order.
pub const CHANNELS: [&str; 14] = [
    "ndvi",
    "lst_day",
    "lst_night",
    "d2m_max",
    "t2m_max",
    "sp_max",
    "tp_max",
    "wind_max",
    "rh_min",
    "dem",
    "slope",
    "dist_roads",
    "dist_waterway",
    "population",
];

pub const N_CHANNELS: usize = CHANNELS.len();

/// Border margin (pixels) that keeps a 25 x 25 training patch inside the grid.
pub const PATCH_MARGIN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub days: usize,
    /// ISO-8601 date of day index 0.
    pub start_date: String,
    /// Length of one (possibly synthetic) year in days; year boundaries are
    /// the only calendar arithmetic performed.
    pub days_per_year: usize,
    pub channels: Vec<String>,
    pub clc_classes: u16,
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
}

impl CubeHeader {
    pub fn start_year(&self) -> Result<i32> {
        self.start_date
            .get(..4)
            .and_then(|y| y.parse().ok())
            .ok_or_else(|| Error::Invalid(format!("start date `{}` is not ISO-8601", self.start_date)))
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Invalid("cube must hold at least one day".into()));
        }
        if self.height == 0 || self.width == 0 || self.days_per_year == 0 {
            return Err(Error::Invalid("cube extents must be positive".into()));
        }
        let expected: Vec<String> = CHANNELS.iter().map(|s| s.to_string()).collect();
        if self.channels != expected {
            return Err(Error::Invalid(format!(
                "channel schema {:?} differs from the fixed predictor order",
                self.channels
            )));
        }
        self.start_year()?;
        Ok(())
    }
}

/// In-memory cube. Immutable once built; all rasters are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCube {
    pub header: CubeHeader,
    /// One day-major `days x H x W` buffer per channel.
    pub channels: Vec<Vec<f32>>,
    pub clc: Vec<u16>,
    pub susceptible: Vec<bool>,
    /// Day-major `days x H x W`.
    pub burn: Vec<bool>,
}

impl DataCube {
    /// Checks the structural invariants (extents, class range, burn only on
    /// susceptible pixels, finite values).
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let px = self.header.pixels();
        let total = px * self.header.days;
        if self.channels.len() != N_CHANNELS || self.channels.iter().any(|c| c.len() != total) {
            return Err(Error::Invalid("channel rasters do not match the header extents".into()));
        }
        if self.clc.len() != px || self.susceptible.len() != px || self.burn.len() != total {
            return Err(Error::Invalid("static or burn rasters do not match the header extents".into()));
        }
        if let Some(c) = self.clc.iter().find(|c| **c >= self.header.clc_classes) {
            return Err(Error::ClassOutOfRange {
                class: *c as usize,
                classes: self.header.clc_classes as usize,
            });
        }
        for (i, b) in self.burn.iter().enumerate() {
            if *b && !self.susceptible[i % px] {
                return Err(Error::Invalid(format!(
                    "burn pixel at day {} index {} lies outside the susceptibility mask",
                    i / px,
                    i % px
                )));
            }
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite channel value".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.header.height
    }

    pub fn width(&self) -> usize {
        self.header.width
    }

    pub fn days(&self) -> usize {
        self.header.days
    }

    pub fn frame(&self, channel: usize, day: usize) -> &[f32] {
        let px = self.header.pixels();
        &self.channels[channel][day * px..(day + 1) * px]
    }

    pub fn value(&self, channel: usize, day: usize, x: usize, y: usize) -> f32 {
        self.frame(channel, day)[y * self.header.width + x]
    }

    pub fn burn_frame(&self, day: usize) -> &[bool] {
        let px = self.header.pixels();
        &self.burn[day * px..(day + 1) * px]
    }

    pub fn is_burning(&self, day: usize, x: usize, y: usize) -> bool {
        self.burn_frame(day)[y * self.header.width + x]
    }

    pub fn fire_count(&self, day: usize) -> usize {
        self.burn_frame(day).iter().filter(|b| **b).count()
    }

    pub fn year_of(&self, day: usize) -> i32 {
        self.header.start_year().unwrap_or(0) + (day / self.header.days_per_year) as i32
    }

    pub fn years(&self) -> Vec<i32> {
        let mut ys: Vec<i32> = (0..self.days()).map(|d| self.year_of(d)).collect();
        ys.dedup();
        ys
    }

    /// Day indices belonging to `year` (empty if outside the cube).
    pub fn days_of_year(&self, year: i32) -> Range<usize> {
        let first = self.header.start_year().unwrap_or(0);
        if year < first {
            return 0..0;
        }
        let k = (year - first) as usize;
        let start = (k * self.header.days_per_year).min(self.days());
        let end = ((k + 1) * self.header.days_per_year).min(self.days());
        start..end
    }

    pub fn day_of_year(&self, day: usize) -> usize {
        day % self.header.days_per_year
    }

    pub fn is_interior(&self, x: usize, y: usize, margin: usize) -> bool {
        x >= margin && y >= margin && x + margin < self.width() && y + margin < self.height()
    }
}
