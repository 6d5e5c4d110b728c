//! Labeled sample selection: CLC-filtered fire samples, rule-based no-fire
//! samples, chronological splits and lazily extracted patch datasets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datacube::synthetic::DEFAULT_SUSCEPTIBLE;
use crate::datacube::{extract_normalized_into, DataCube, Normalizer, N_CHANNELS};
use crate::error::{Error, Result};
use crate::rng;

pub const FIRE: u8 = 0;
pub const NO_FIRE: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleIndex {
    pub year: i32,
    #[serde(rename = "date_index")]
    pub date: usize,
    pub x: usize,
    pub y: usize,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// No-fire samples per fire sample.
    pub ratio: usize,
    pub patch_size: usize,
    /// Admit a class when it hosts at least this fraction of all fires.
    /// When unset, the most fire-prone classes jointly covering
    /// `clc_coverage` of fires are admitted.
    pub clc_threshold: Option<f64>,
    pub clc_coverage: f64,
    /// Classes eligible for no-fire samples.
    pub susceptible_classes: Vec<u16>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            ratio: 2,
            patch_size: 25,
            clc_threshold: None,
            clc_coverage: 0.95,
            susceptible_classes: DEFAULT_SUSCEPTIBLE.to_vec(),
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            return Err(Error::Config("negative:positive ratio must be >= 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch size {} must be odd", self.patch_size)));
        }
        if let Some(t) = self.clc_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("CLC threshold {t} must lie in [0, 1)")));
            }
        }
        if !(self.clc_coverage > 0.0 && self.clc_coverage <= 1.0) {
            return Err(Error::Config(format!("CLC coverage {} must lie in (0, 1]", self.clc_coverage)));
        }
        Ok(())
    }

    pub fn margin(&self) -> usize {
        self.patch_size / 2
    }
}

/// Burn-pixel counts per CLC class.
pub fn fire_clc_histogram(cube: &DataCube) -> Vec<usize> {
    let px = cube.header.pixels();
    let mut hist = vec![0; cube.header.clc_classes as usize];
    for (i, b) in cube.burn.iter().enumerate() {
        if *b {
            hist[cube.clc[i % px] as usize] += 1;
        }
    }
    hist
}

/// Classes allowed to contribute fire samples.
pub fn admitted_classes(hist: &[usize], cfg: &SamplingConfig) -> Vec<u16> {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut out: Vec<u16> = match cfg.clc_threshold {
        Some(t) => (0..hist.len())
            .filter(|&c| hist[c] > 0 && hist[c] as f64 / total as f64 >= t)
            .map(|c| c as u16)
            .collect(),
        None => {
            let mut order: Vec<usize> = (0..hist.len()).filter(|&c| hist[c] > 0).collect();
            order.sort_by(|a, b| hist[*b].cmp(&hist[*a]).then(a.cmp(b)));
            let mut covered = 0;
            let mut picked = Vec::new();
            for c in order {
                if covered as f64 >= cfg.clc_coverage * total as f64 {
                    break;
                }
                covered += hist[c];
                picked.push(c as u16);
            }
            picked
        }
    };
    out.sort_unstable();
    out
}

/// One sample per admitted, interior burn pixel; a location burning several
/// times in a year keeps its first date.
pub fn select_fire_samples(cube: &DataCube, cfg: &SamplingConfig) -> Result<Vec<SampleIndex>> {
    cfg.validate()?;
    let admitted = admitted_classes(&fire_clc_histogram(cube), cfg);
    let (w, m) = (cube.width(), cfg.margin());
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for d in 0..cube.days() {
        let year = cube.year_of(d);
        for (p, b) in cube.burn_frame(d).iter().enumerate() {
            let (x, y) = (p % w, p / w);
            if *b && admitted.contains(&cube.clc[p]) && cube.is_interior(x, y, m) && seen.insert((year, p)) {
                out.push(SampleIndex {
                    year,
                    date: d,
                    x,
                    y,
                    label: FIRE,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoFireSamples);
    }
    Ok(out)
}

/// Per-year no-fire candidates: zero-fire dates between the year's first and
/// last fire, and interior susceptible locations that never burn that year.
pub fn nofire_candidates(cube: &DataCube, year: i32, cfg: &SamplingConfig) -> (Vec<usize>, Vec<usize>) {
    let days = cube.days_of_year(year);
    let fire_days: Vec<usize> = days.clone().filter(|d| cube.fire_count(*d) > 0).collect();
    let (w, px, m) = (cube.width(), cube.header.pixels(), cfg.margin());
    let dates = match (fire_days.first(), fire_days.last()) {
        (Some(a), Some(b)) => (*a..=*b).filter(|d| cube.fire_count(*d) == 0).collect(),
        _ => Vec::new(),
    };
    let mut burnt = vec![false; px];
    for d in days {
        for (p, b) in cube.burn_frame(d).iter().enumerate() {
            burnt[p] |= *b;
        }
    }
    let locations = (0..px)
        .filter(|&p| {
            !burnt[p]
                && cube.susceptible[p]
                && cfg.susceptible_classes.contains(&cube.clc[p])
                && cube.is_interior(p % w, p / w, m)
        })
        .collect();
    (dates, locations)
}

pub fn select_nofire_samples(
    cube: &DataCube,
    fires: &[SampleIndex],
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<SampleIndex>> {
    cfg.validate()?;
    let mut per_year: BTreeMap<i32, usize> = BTreeMap::new();
    for f in fires {
        *per_year.entry(f.year).or_default() += 1;
    }
    let w = cube.width();
    let mut out = Vec::new();
    for (&year, &n_fire) in &per_year {
        let required = cfg.ratio * n_fire;
        let (dates, locations) = nofire_candidates(cube, year, cfg);
        let pool = if dates.is_empty() { 0 } else { locations.len() };
        if pool < required {
            return Err(Error::NegativePool { year, pool, required });
        }
        let mut r = rng::stream_indexed(seed, "sampling/nofire", year as u64);
        let mut picks = sample(&mut r, locations.len(), required).into_vec();
        picks.sort_unstable();
        for i in picks {
            let p = locations[i];
            let date = dates[r.random_range(0..dates.len())];
            out.push(SampleIndex {
                year,
                date,
                x: p % w,
                y: p / w,
                label: NO_FIRE,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitYears {
    pub train: Vec<i32>,
    pub val: Vec<i32>,
    pub test: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub years: SplitYears,
    pub train: Vec<SampleIndex>,
    pub val: Vec<SampleIndex>,
    pub test: Vec<SampleIndex>,
}

pub fn chronological_split(samples: &[SampleIndex], years: &SplitYears) -> Result<DatasetSplit> {
    for (name, set) in [("train", &years.train), ("val", &years.val), ("test", &years.test)] {
        if set.is_empty() {
            return Err(Error::Config(format!("{name} year set is empty")));
        }
    }
    let mut all = BTreeSet::new();
    for y in years.train.iter().chain(&years.val).chain(&years.test) {
        if !all.insert(*y) {
            return Err(Error::Config(format!("year {y} appears in more than one split")));
        }
    }
    let mut split = DatasetSplit {
        years: years.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for s in samples {
        if years.train.contains(&s.year) {
            split.train.push(*s);
        } else if years.val.contains(&s.year) {
            split.val.push(*s);
        } else if years.test.contains(&s.year) {
            split.test.push(*s);
        } else {
            return Err(Error::UncoveredYear(s.year));
        }
    }
    Ok(split)
}

/// Patches are extracted on demand from the cube, so a dataset costs only its
/// index list.
#[derive(Clone, Debug)]
pub struct PatchDataset<'a> {
    pub cube: &'a DataCube,
    pub normalizer: &'a Normalizer,
    pub samples: Vec<SampleIndex>,
    pub patch_size: usize,
    pub temporal_len: usize,
}

impl PatchDataset<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Continuous values per sample: `temporal_len x 14 x size x size`.
    pub fn values_len(&self) -> usize {
        self.temporal_len * N_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn plane_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn label(&self, i: usize) -> u8 {
        self.samples[i].label
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn fill(&self, i: usize, values: &mut [f32], clc: &mut [u16]) -> Result<()> {
        let s = &self.samples[i];
        extract_normalized_into(
            self.cube,
            self.normalizer,
            s.date,
            s.x,
            s.y,
            self.patch_size,
            self.temporal_len,
            values,
            clc,
        )
    }

    /// Standardized values, CLC plane and label of sample `i`.
    pub fn get(&self, i: usize) -> Result<(Vec<f32>, Vec<u16>, u8)> {
        let mut v = vec![0.0; self.values_len()];
        let mut c = vec![0; self.plane_len()];
        self.fill(i, &mut v, &mut c)?;
        Ok((v, c, self.label(i)))
    }
}

/// Drops samples whose temporal window would start before the first cube day.
pub fn assemble_dataset<'a>(
    cube: &'a DataCube,
    samples: &[SampleIndex],
    normalizer: &'a Normalizer,
    patch_size: usize,
    temporal_len: usize,
) -> PatchDataset<'a> {
    let kept: Vec<SampleIndex> = samples
        .iter()
        .filter(|s| s.date + 1 >= temporal_len)
        .copied()
        .collect();
    if kept.len() < samples.len() {
        log::warn!(
            "dropped {} samples dated before day {} (temporal length {temporal_len})",
            samples.len() - kept.len(),
            temporal_len.saturating_sub(1)
        );
    }
    PatchDataset {
        cube,
        normalizer,
        samples: kept,
        patch_size,
        temporal_len,
    }
}

pub fn write_manifest(path: impl AsRef<Path>, samples: &[SampleIndex]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for s in samples {
        w.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleIndex>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["year", "date_index", "x", "y", "label"] {
        return Err(Error::Parse {
            path: path.into(),
            detail: format!("unexpected manifest columns {header:?}"),
        });
    }
    let rows: std::result::Result<Vec<SampleIndex>, _> = r.deserialize().collect();
    let rows = rows.map_err(|e| csv_error(path, e))?;
    if let Some(s) = rows.iter().find(|s| s.label > NO_FIRE) {
        return Err(Error::InvalidLabel(s.label));
    }
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        detail: e.to_string(),
    }
}
