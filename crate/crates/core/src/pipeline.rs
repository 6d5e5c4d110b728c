//! Run configuration and the stage functions that connect the modules:
//! sampling, dataset assembly, map production and evaluation.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datacube::{fit_normalizer, weather_index, DataCube, Normalizer, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_baseline, daily_recall, ensemble_consistency, fdi_distribution, fire_days, recall_quantiles,
    rescale_min_max, select_nofire_days, EvalReport, MemberDistribution, DEFAULT_BINS, DEFAULT_LEVELS,
};
use crate::inference::{ensemble_average, full_map_inference_with, FdiMap, InferenceOptions};
use crate::models::{ArchitectureId, ModelBundle, ModelConfig, Padding};
use crate::sampling::{
    assemble_dataset, chronological_split, select_fire_samples, select_nofire_samples, DatasetSplit, PatchDataset,
    SampleIndex, SamplingConfig, SplitYears,
};
use crate::trainer::{EnsembleSpec, TrainConfig};

/// Model overrides on top of the architecture's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: ArchitectureId,
    pub conv_channels: Option<Vec<usize>>,
    pub kernel: Option<usize>,
    pub padding: Option<Padding>,
    pub classifier_widths: Option<Vec<usize>>,
    pub dropout: Option<f64>,
    pub convlstm_hidden: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub temporal_len: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: ArchitectureId::BasicCnn,
            conv_channels: None,
            kernel: None,
            padding: None,
            classifier_widths: None,
            dropout: None,
            convlstm_hidden: None,
            embedding_dim: None,
            temporal_len: None,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    /// Patch size and class count follow the sampling and cube sections.
    pub fn resolve(&self, patch_size: usize, clc_classes: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::default_for(self.architecture);
        if let Some(v) = &self.conv_channels {
            c.conv_channels = v.clone();
        }
        if let Some(v) = &self.classifier_widths {
            c.classifier_widths = v.clone();
        }
        c.kernel = self.kernel.unwrap_or(c.kernel);
        c.padding = self.padding.unwrap_or(c.padding);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.convlstm_hidden = self.convlstm_hidden.unwrap_or(c.convlstm_hidden);
        c.embedding_dim = self.embedding_dim.unwrap_or(c.embedding_dim);
        c.temporal_len = self.temporal_len.unwrap_or(c.temporal_len);
        c.patch_size = patch_size;
        c.clc_classes = clc_classes;
        c.init_seed = self.init_seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub levels: Vec<u32>,
    pub bins: usize,
    pub threshold: f32,
    pub baseline_threshold: f32,
    /// Day-of-year range `[start, end)` of the evaluation season in the test
    /// years; defaults to the generator's fire window.
    pub season: Option<[usize; 2]>,
    pub nofire_days: usize,
    pub nofire_seed: u64,
    /// Evaluate fire days on burn pixels only. Each pixel's FDI depends only
    /// on its own patch, so recall is unchanged; false-alarm fractions are
    /// then reported for no-fire days only.
    pub fire_pixels_only: bool,
    pub batch_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS.to_vec(),
            bins: DEFAULT_BINS,
            threshold: 0.5,
            baseline_threshold: 0.5,
            season: None,
            nofire_days: 6,
            nofire_seed: 0,
            fire_pixels_only: false,
            batch_width: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cube: SyntheticConfig,
    pub sampling: SamplingConfig,
    /// Empty splits are derived from the cube: the last year tests, the one
    /// before validates, all earlier years train.
    pub split: SplitYears,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ensemble: EnsembleSpec,
    pub eval: EvalConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses TOML text and applies `section.key=value` overrides; values are
    /// read as TOML literals and fall back to strings.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form section.key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut t = &mut table;
            for part in &path[..path.len() - 1] {
                t = t
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` in override `{o}` is not a section")))?;
            }
            t.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.cube.validate()?;
        self.sampling.validate()?;
        self.train.validate()?;
        self.model_config()?;
        self.ensemble.seeds()?;
        if self.eval.bins == 0 || self.eval.batch_width == 0 {
            return Err(Error::Config("eval.bins and eval.batch_width must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(self.sampling.patch_size, self.cube.clc_classes as usize)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn split_years(&self, cube: &DataCube) -> Result<SplitYears> {
        if self.split != SplitYears::default() {
            return Ok(self.split.clone());
        }
        let years = cube.years();
        if years.len() < 3 {
            return Err(Error::Config(format!(
                "a chronological split needs at least 3 years, the cube has {}",
                years.len()
            )));
        }
        let n = years.len();
        Ok(SplitYears {
            train: years[..n - 2].to_vec(),
            val: vec![years[n - 2]],
            test: vec![years[n - 1]],
        })
    }

    /// Evaluation-season day indices of the test years.
    pub fn season_days(&self, cube: &DataCube) -> Result<Vec<usize>> {
        let [a, b] = self.eval.season.unwrap_or(self.cube.fire_window);
        let dpy = cube.header.days_per_year;
        if a >= b || b > dpy {
            return Err(Error::Config(format!("eval.season [{a}, {b}) is outside a {dpy}-day year")));
        }
        let mut days = Vec::new();
        for y in self.split_years(cube)?.test {
            days.extend(cube.days_of_year(y).filter(|d| (a..b).contains(&cube.day_of_year(*d))));
        }
        Ok(days)
    }

    pub fn eval_days(&self, cube: &DataCube) -> Result<EvalDays> {
        let season = self.season_days(cube)?;
        let t = self.model_config()?.temporal_len;
        let usable: Vec<usize> = season.into_iter().filter(|d| d + 1 >= t).collect();
        let (Some(&first), Some(&last)) = (usable.first(), usable.last()) else {
            return Err(Error::Config("the evaluation season is empty".into()));
        };
        let range = first..last + 1;
        let fire = fire_days(cube, range.clone())
            .into_iter()
            .filter(|d| usable.contains(d))
            .collect();
        let candidates: Vec<usize> = range.filter(|d| usable.contains(d)).collect();
        let nofire = pick_nofire(cube, &candidates, self.eval.nofire_days, self.eval.nofire_seed)?;
        Ok(EvalDays { fire, nofire })
    }
}

fn pick_nofire(cube: &DataCube, candidates: &[usize], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let (Some(&a), Some(&b)) = (candidates.first(), candidates.last()) else {
        return Ok(Vec::new());
    };
    select_nofire_days(cube, a..b + 1, count, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDays {
    pub fire: Vec<usize>,
    pub nofire: Vec<usize>,
}

impl EvalDays {
    pub fn all(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.fire.iter().chain(&self.nofire).copied().collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// Fire samples followed by the rule-based no-fire samples.
pub fn draw_samples(cube: &DataCube, cfg: &SamplingConfig) -> Result<Vec<SampleIndex>> {
    let mut s = select_fire_samples(cube, cfg)?;
    let nofire = select_nofire_samples(cube, &s, cfg, cfg.seed)?;
    s.extend(nofire);
    Ok(s)
}

/// Contiguous day range covered by `years`.
pub fn year_days(cube: &DataCube, years: &[i32]) -> Result<Range<usize>> {
    let ranges: Vec<Range<usize>> = years.iter().map(|y| cube.days_of_year(*y)).collect();
    let start = ranges.iter().map(|r| r.start).min().unwrap_or(0);
    let end = ranges.iter().map(|r| r.end).max().unwrap_or(0);
    if start >= end {
        return Err(Error::Config(format!("years {years:?} are not in the cube")));
    }
    Ok(start..end)
}

/// Standardization statistics from the training years only.
pub fn fit_training_normalizer(cube: &DataCube, split: &SplitYears) -> Result<Normalizer> {
    fit_normalizer(cube, year_days(cube, &split.train)?)
}

pub struct Datasets<'a> {
    pub split: DatasetSplit,
    pub train: PatchDataset<'a>,
    pub val: PatchDataset<'a>,
    pub test: PatchDataset<'a>,
}

pub fn build_datasets<'a>(
    cube: &'a DataCube,
    samples: &[SampleIndex],
    split: &SplitYears,
    norm: &'a Normalizer,
    model: &ModelConfig,
) -> Result<Datasets<'a>> {
    let s = chronological_split(samples, split)?;
    let make = |v: &[SampleIndex]| assemble_dataset(cube, v, norm, model.patch_size, model.temporal_len);
    Ok(Datasets {
        train: make(&s.train),
        val: make(&s.val),
        test: make(&s.test),
        split: s,
    })
}

/// Maps of one model for each of `days`. With `fire_pixels_only`, fire days
/// are evaluated on that day's burn pixels.
pub fn infer_days(
    bundle: &ModelBundle,
    cube: &DataCube,
    norm: &Normalizer,
    days: &EvalDays,
    eval: &EvalConfig,
) -> Result<Vec<FdiMap>> {
    days.all()
        .into_iter()
        .map(|d| {
            let pixels = (eval.fire_pixels_only && days.fire.contains(&d)).then(|| cube.burn_frame(d).to_vec());
            let opts = InferenceOptions {
                batch_width: eval.batch_width,
                pixels,
            };
            full_map_inference_with(bundle, cube, d, norm, &opts)
        })
        .collect()
}

/// Min-max rescaled weather index of `day` over the susceptible pixels.
pub fn baseline_map(cube: &DataCube, day: usize) -> FdiMap {
    let raw = FdiMap {
        height: cube.height(),
        width: cube.width(),
        date: day,
        model_id: "weather-index".into(),
        values: weather_index(cube, day),
        mask: cube.susceptible.clone(),
    };
    rescale_min_max(&raw)
}

/// Builds the report from per-member maps (`members[m]` holds one map per
/// evaluated day, in date order). With more than one member the averaged map
/// is the evaluated map and the ensemble rows are filled in.
pub fn evaluate(cube: &DataCube, members: &[Vec<FdiMap>], days: &EvalDays, eval: &EvalConfig) -> Result<EvalReport> {
    let first = members.first().ok_or_else(|| Error::Empty("no member maps to evaluate".into()))?;
    let all = days.all();
    for m in members {
        if m.iter().map(|x| x.date).collect::<Vec<_>>() != all {
            return Err(Error::MaskMismatch("member maps do not cover the evaluation days".into()));
        }
    }
    let evaluated: Vec<FdiMap> = if members.len() == 1 {
        first.clone()
    } else {
        (0..all.len())
            .map(|i| ensemble_average(&members.iter().map(|m| m[i].clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?
    };
    let mut report = EvalReport {
        member_ids: members.iter().map(|m| m[0].model_id.clone()).collect(),
        ..Default::default()
    };
    for (i, d) in all.iter().enumerate() {
        let burn = cube.burn_frame(*d);
        let map = &evaluated[i];
        if days.fire.contains(d) {
            if let Some(r) = daily_recall(map, burn, eval.threshold)? {
                report.daily_recall.push(r);
            }
        }
        if days.nofire.contains(d) {
            report.distributions.push(fdi_distribution(map, eval.bins)?);
            if members.len() > 1 {
                for m in members {
                    report.member_distributions.push(MemberDistribution {
                        member: m[i].model_id.clone(),
                        distribution: fdi_distribution(&m[i], eval.bins)?,
                    });
                }
            }
        }
        let full = !(eval.fire_pixels_only && days.fire.contains(d));
        if full {
            report.baseline.push(compare_baseline(
                map,
                &baseline_map(cube, *d),
                burn,
                (eval.threshold, eval.baseline_threshold),
            )?);
        }
    }
    if !report.daily_recall.is_empty() {
        report.quantiles = Some(recall_quantiles(&report.daily_recall, &eval.levels)?);
    }
    if members.len() > 1 {
        let fire_idx: Vec<usize> = (0..all.len()).filter(|i| days.fire.contains(&all[*i])).collect();
        let per_day: Vec<Vec<FdiMap>> = fire_idx
            .iter()
            .map(|&i| members.iter().map(|m| m[i].clone()).collect())
            .collect();
        let burns: Vec<&[bool]> = fire_idx.iter().map(|&i| cube.burn_frame(all[i])).collect();
        report.consistency = ensemble_consistency(&per_day, &burns, eval.threshold)?;
    }
    Ok(report)
}
