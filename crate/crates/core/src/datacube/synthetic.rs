//! Planted-signal generator.
//!
//! Static layers are smooth random fields; daily weather is a seasonal cycle
//! plus regional AR(1) drivers and smooth anomaly fields; NDVI refreshes every
//! 10 days. Fires follow a known logistic hazard
//! `z = intercept + coefficients . standardized(channels) + class_offset + noise`,
//! sampled per pixel-day inside the fire window with probability
//! `min(1, q * sigmoid(z))`, `q` chosen per year so the expected count is the
//! target.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CubeHeader, DataCube, CHANNELS, FORMAT_VERSION, N_CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const NDVI: usize = 0;
const LST_DAY: usize = 1;
const T2M: usize = 4;
const TP: usize = 6;
const WIND: usize = 7;
const RH: usize = 8;
const SLOPE: usize = 10;
const ROADS: usize = 11;
const POP: usize = 13;

/// Classes 0..4 stand for urban fabric, water bodies, sea and bare rock.
pub const DEFAULT_SUSCEPTIBLE: [u16; 11] = [4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub years: usize,
    pub days_per_year: usize,
    pub start_date: String,
    /// One weight per channel, in storage order.
    pub coefficients: Vec<f64>,
    /// Std of the iid logit noise added to the clean hazard.
    pub noise_scale: f64,
    pub hazard_intercept: f64,
    /// Day-of-year range `[start, end)` in which fires may occur.
    pub fire_window: [usize; 2],
    pub target_fires_per_year: usize,
    pub clc_classes: u16,
    pub susceptible_classes: Vec<u16>,
    /// Per-class hazard offsets are drawn from `U(-class_effect, class_effect)`.
    pub class_effect: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let mut coefficients = vec![0.0; N_CHANNELS];
        coefficients[NDVI] = -0.5;
        coefficients[LST_DAY] = 0.8;
        coefficients[T2M] = 1.2;
        coefficients[TP] = -0.6;
        coefficients[WIND] = 0.7;
        coefficients[RH] = -1.2;
        coefficients[SLOPE] = 0.3;
        coefficients[ROADS] = -0.5;
        coefficients[POP] = 0.2;
        Self {
            height: 96,
            width: 96,
            years: 3,
            days_per_year: 100,
            start_date: "2009-01-01".into(),
            coefficients,
            noise_scale: 0.5,
            hazard_intercept: -10.0,
            fire_window: [20, 80],
            target_fires_per_year: 1100,
            clc_classes: 15,
            susceptible_classes: DEFAULT_SUSCEPTIBLE.to_vec(),
            class_effect: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.years == 0 || self.days_per_year == 0 {
            return bad("grid size, years and days per year must be positive".into());
        }
        if self.coefficients.len() != N_CHANNELS {
            return bad(format!(
                "expected {N_CHANNELS} hazard coefficients, got {}",
                self.coefficients.len()
            ));
        }
        if self.coefficients.iter().any(|c| !c.is_finite())
            || !self.noise_scale.is_finite()
            || self.noise_scale < 0.0
            || !self.hazard_intercept.is_finite()
            || !self.class_effect.is_finite()
        {
            return bad("hazard parameters must be finite (noise scale non-negative)".into());
        }
        let [a, b] = self.fire_window;
        if a >= b || b > self.days_per_year {
            return bad(format!(
                "fire window [{a}, {b}) must be non-empty and inside a {}-day year",
                self.days_per_year
            ));
        }
        if self.clc_classes == 0 {
            return bad("at least one CLC class is required".into());
        }
        if let Some(c) = self.susceptible_classes.iter().find(|c| **c >= self.clc_classes) {
            return Err(Error::ClassOutOfRange {
                class: *c as usize,
                classes: self.clc_classes as usize,
            });
        }
        if self.start_date.get(..4).and_then(|y| y.parse::<i32>().ok()).is_none() {
            return bad(format!("start date `{}` is not ISO-8601", self.start_date));
        }
        Ok(())
    }
}

/// Noise-free hazard logits (`days x H x W`) and the per-year thinning
/// factors used while sampling fires.
#[derive(Clone, Debug)]
pub struct LatentHazard {
    pub clean: Vec<f32>,
    pub thinning: Vec<f64>,
}

impl LatentHazard {
    pub fn at(&self, cube: &DataCube, day: usize, x: usize, y: usize) -> f32 {
        self.clean[day * cube.header.pixels() + y * cube.width() + x]
    }

    /// Log fire probability of a pixel-day under the noise-free hazard,
    /// `ln(q_year * sigmoid(z))`.
    pub fn log_risk(&self, cube: &DataCube, day: usize, x: usize, y: usize) -> f64 {
        let z = self.at(cube, day, x, y) as f64;
        let q = self.thinning[day / cube.header.days_per_year];
        q.ln() - (-z).exp().ln_1p()
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Zero-mean, roughly unit-variance field: Gaussian values on a coarse
/// lattice, bilinearly interpolated.
fn smooth_field(r: &mut Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| normal(r)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            // bilinear blending shrinks the variance; rescale towards 1
            out[y * w + x] = (top * (1.0 - ty) + bottom * ty) * 1.5;
        }
    }
    out
}

fn segment_distance(r: &mut Rng, h: usize, w: usize, segments: usize) -> Vec<f64> {
    let segs: Vec<[f64; 4]> = (0..segments)
        .map(|_| {
            [
                r.random_range(0.0..w as f64),
                r.random_range(0.0..h as f64),
                r.random_range(0.0..w as f64),
                r.random_range(0.0..h as f64),
            ]
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            out[y * w + x] = segs
                .iter()
                .map(|&[ax, ay, bx, by]| {
                    let (dx, dy) = (bx - ax, by - ay);
                    let len2 = (dx * dx + dy * dy).max(1e-12);
                    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
                    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Voronoi blobs: each site carries a class; non-susceptible classes are rarer.
fn clc_map(r: &mut Rng, cfg: &SyntheticConfig) -> Vec<u16> {
    let (h, w) = (cfg.height, cfg.width);
    let sites = (h * w / 120).max(4);
    let weights: Vec<f64> = (0..cfg.clc_classes)
        .map(|c| if cfg.susceptible_classes.contains(&c) { 1.0 } else { 0.35 })
        .collect();
    let total: f64 = weights.iter().sum();
    let pts: Vec<(f64, f64, u16)> = (0..sites)
        .map(|_| {
            let x = r.random_range(0.0..w as f64);
            let y = r.random_range(0.0..h as f64);
            let mut u = r.random_range(0.0..total);
            let mut class = cfg.clc_classes - 1;
            for (c, wt) in weights.iter().enumerate() {
                if u < *wt {
                    class = c as u16;
                    break;
                }
                u -= wt;
            }
            (x, y, class)
        })
        .collect();
    let mut out = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = (f64::INFINITY, 0u16);
            for &(sx, sy, c) in &pts {
                let d = (sx - x as f64).powi(2) + (sy - y as f64).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            out[y * w + x] = best.1;
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn generate_synthetic_cube(cfg: &SyntheticConfig) -> Result<DataCube> {
    generate_with_truth(cfg).map(|(c, _)| c)
}

/// Generates the cube together with the noise-free hazard that drove it.
pub fn generate_with_truth(cfg: &SyntheticConfig) -> Result<(DataCube, LatentHazard)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let px = h * w;
    let days = cfg.years * cfg.days_per_year;
    let dpy = cfg.days_per_year as f64;

    let mut rs = rng::stream(cfg.seed, "synthetic/static");
    let dem: Vec<f64> = {
        let a = smooth_field(&mut rs, h, w, 24);
        let b = smooth_field(&mut rs, h, w, 8);
        a.iter().zip(&b).map(|(a, b)| (600.0 + 400.0 * a + 80.0 * b).max(0.0)).collect()
    };
    let slope: Vec<f64> = (0..px)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let gx = dem[y * w + (x + 1).min(w - 1)] - dem[y * w + x.saturating_sub(1)];
            let gy = dem[(y + 1).min(h - 1) * w + x] - dem[y.saturating_sub(1) * w + x];
            // 1 km pixels, central difference over 2 km
            ((gx * gx + gy * gy).sqrt() / 2000.0).atan().to_degrees()
        })
        .collect();
    let roads = segment_distance(&mut rs, h, w, 6);
    let water = segment_distance(&mut rs, h, w, 4);
    let pop_field = smooth_field(&mut rs, h, w, 16);
    let pop: Vec<f64> = (0..px)
        .map(|p| 50.0 * (1.2 * pop_field[p]).exp() / (1.0 + roads[p] / 5.0))
        .collect();
    let veg = smooth_field(&mut rs, h, w, 12);
    let clc = clc_map(&mut rs, cfg);
    let susceptible: Vec<bool> = clc.iter().map(|c| cfg.susceptible_classes.contains(c)).collect();
    let class_offset: Vec<f64> = (0..cfg.clc_classes)
        .map(|_| rs.random_range(-1.0..=1.0) * cfg.class_effect)
        .collect();

    let mut channels: Vec<Vec<f32>> = vec![Vec::with_capacity(days * px); N_CHANNELS];
    let mut rw = rng::stream(cfg.seed, "synthetic/weather");
    const PHI: f64 = 0.85;
    let innov = (1.0 - PHI * PHI).sqrt();
    // heat, dryness, wind, pressure, rain
    let mut regional = [0.0f64; 5];
    let mut anomaly: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(&mut rw, h, w, 16)).collect();
    let mut dry10 = vec![0.0f64; px];
    let mut ndvi = vec![0.0f32; px];
    for d in 0..days {
        let doy = (d % cfg.days_per_year) as f64;
        let s = -(2.0 * std::f64::consts::PI * doy / dpy).cos();
        for v in regional.iter_mut() {
            *v = PHI * *v + innov * normal(&mut rw);
        }
        let [heat, dry, wind, pres, rain] = regional;
        for a in anomaly.iter_mut() {
            let fresh = smooth_field(&mut rw, h, w, 16);
            for (v, f) in a.iter_mut().zip(&fresh) {
                *v = PHI * *v + innov * f;
            }
        }
        let jitter: Vec<f64> = (0..px).map(|_| 0.3 * normal(&mut rw)).collect();
        if d % 10 == 0 {
            for p in 0..px {
                dry10[p] = dry + 0.5 * anomaly[1][p];
                ndvi[p] = (0.45 + 0.15 * veg[p] - 0.12 * s - 0.04 * dry10[p]).clamp(0.0, 1.0) as f32;
            }
        }
        for p in 0..px {
            let (ah, ad, aw) = (anomaly[0][p], anomaly[1][p], anomaly[2][p]);
            let t2m = 24.0 + 9.0 * s + 6.0 * heat + 2.5 * ah - 0.0065 * (dem[p] - 600.0) + jitter[p];
            let lst_day = t2m + 6.0 + 3.0 * heat + 1.5 * ah + jitter[p];
            let lst_night = t2m - 11.0 - 0.5 * jitter[p];
            let d2m = 10.0 + 3.0 * s - 3.0 * dry - 1.5 * ad;
            let rh = (50.0 - 12.0 * s - 12.0 * dry - 5.0 * heat - 5.0 * ad - 2.0 * ah).clamp(3.0, 100.0);
            let sp = 1013.0 + 5.0 * pres - 0.11 * (dem[p] - 600.0);
            let tp = (3.0 * (rain - 0.8 * s) + 0.8 * ad.min(0.0).abs()).max(0.0);
            let wnd = (5.0 + 3.5 * wind + 1.5 * aw + 0.002 * dem[p]).max(0.0);
            let vals = [
                ndvi[p] as f64,
                lst_day,
                lst_night,
                d2m,
                t2m,
                sp,
                tp,
                wnd,
                rh,
                dem[p],
                slope[p],
                roads[p],
                water[p],
                pop[p],
            ];
            for (c, v) in vals.iter().enumerate() {
                channels[c].push(*v as f32);
            }
        }
    }

    // standardize with the generator's own whole-cube statistics
    let stats: Vec<(f64, f64)> = channels
        .iter()
        .map(|ch| {
            let n = ch.len() as f64;
            let m = ch.iter().map(|v| *v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / n;
            (m, var.sqrt().max(1e-6))
        })
        .collect();
    let mut clean = vec![0.0f32; days * px];
    for d in 0..days {
        for p in 0..px {
            let i = d * px + p;
            let mut z = cfg.hazard_intercept + class_offset[clc[p] as usize];
            for c in 0..N_CHANNELS {
                let k = cfg.coefficients[c];
                if k != 0.0 {
                    z += k * (channels[c][i] as f64 - stats[c].0) / stats[c].1;
                }
            }
            clean[i] = z as f32;
        }
    }

    let [w0, w1] = cfg.fire_window;
    let n_susceptible = susceptible.iter().filter(|s| **s).count();
    let available = (w1 - w0) * n_susceptible;
    if cfg.target_fires_per_year > available {
        return Err(Error::InfeasibleFireTarget {
            requested: cfg.target_fires_per_year,
            available,
        });
    }
    let mut rn = rng::stream(cfg.seed, "synthetic/hazard-noise");
    let mut noisy = vec![f64::NEG_INFINITY; days * px];
    for d in 0..days {
        let doy = d % cfg.days_per_year;
        for p in 0..px {
            let e = normal(&mut rn) * cfg.noise_scale;
            if susceptible[p] && (w0..w1).contains(&doy) {
                noisy[d * px + p] = clean[d * px + p] as f64 + e;
            }
        }
    }
    let year_len = cfg.days_per_year * px;
    let mut rf = rng::stream(cfg.seed, "synthetic/fires");
    let mut burn = Vec::with_capacity(days * px);
    let mut thinning = Vec::with_capacity(cfg.years);
    for year in noisy.chunks(year_len) {
        let mass: f64 = year.iter().map(|z| sigmoid(*z)).sum();
        let q = if mass > 0.0 {
            cfg.target_fires_per_year as f64 / mass
        } else {
            0.0
        };
        thinning.push(q);
        for z in year {
            let u: f64 = rf.random();
            burn.push(u < (q * sigmoid(*z)).min(1.0));
        }
    }

    let cube = DataCube {
        header: CubeHeader {
            height: h,
            width: w,
            days,
            start_date: cfg.start_date.clone(),
            days_per_year: cfg.days_per_year,
            channels: CHANNELS.iter().map(|s| s.to_string()).collect(),
            clc_classes: cfg.clc_classes,
            format_version: FORMAT_VERSION,
            generator_seed: Some(cfg.seed),
        },
        channels,
        clc,
        susceptible,
        burn,
    };
    cube.validate()?;
    Ok((cube, LatentHazard { clean, thinning }))
}

/// Weather-only danger index (a stand-in for an externally supplied
/// fire-weather raster): hot, dry, windy and rainless days score high.
/// Unscaled; consumers rescale by min-max.
pub fn weather_index(cube: &DataCube, day: usize) -> Vec<f32> {
    let px = cube.header.pixels();
    (0..px)
        .map(|p| {
            let t = cube.frame(T2M, day)[p] as f64;
            let rh = cube.frame(RH, day)[p] as f64;
            let wind = cube.frame(WIND, day)[p] as f64;
            let tp = cube.frame(TP, day)[p] as f64;
            (0.1 * t - 0.05 * rh + 0.12 * wind - 0.3 * tp.min(5.0)) as f32
        })
        .collect()
}
