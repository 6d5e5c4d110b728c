//! Map-based evaluation: daily recall, recall quantiles, no-fire-day FDI
//! distributions, ensemble consistency and baseline comparison.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacube::DataCube;
use crate::error::{Error, Result};
use crate::inference::{ensemble_average, FdiMap};
use crate::rng;

pub const DEFAULT_LEVELS: [u32; 6] = [40, 50, 60, 70, 80, 90];
pub const DEFAULT_BINS: usize = 20;
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyRecallRecord {
    pub date: usize,
    pub fires: usize,
    pub detected: usize,
    pub recall: f64,
}

/// Fraction of the valid burn pixels whose FDI is strictly above `threshold`;
/// `None` when no burn pixel is valid.
pub fn daily_recall(map: &FdiMap, burn: &[bool], threshold: f32) -> Result<Option<DailyRecallRecord>> {
    if burn.len() != map.mask.len() {
        return Err(Error::shape("daily_recall", "burn mask does not match the map grid"));
    }
    let (mut fires, mut detected) = (0, 0);
    for ((v, m), b) in map.values.iter().zip(&map.mask).zip(burn) {
        if *m && *b {
            fires += 1;
            if *v > threshold {
                detected += 1;
            }
        }
    }
    if fires == 0 {
        log::debug!("day {} has no valid fire pixels; skipped", map.date);
        return Ok(None);
    }
    Ok(Some(DailyRecallRecord {
        date: map.date,
        fires,
        detected,
        recall: detected as f64 / fires as f64,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub levels: Vec<u32>,
    pub values: Vec<f64>,
    pub days: usize,
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(Q/100 * n)` of
/// the sorted recalls.
pub fn recall_quantiles(records: &[DailyRecallRecord], levels: &[u32]) -> Result<QuantileTable> {
    if records.is_empty() {
        return Err(Error::Empty("daily recall records".into()));
    }
    let mut r: Vec<f64> = records.iter().map(|d| d.recall).collect();
    r.sort_by(f64::total_cmp);
    let n = r.len();
    let mut sorted_levels = levels.to_vec();
    sorted_levels.sort_unstable();
    let values = sorted_levels
        .iter()
        .map(|&q| {
            if q == 0 || q > 100 {
                return Err(Error::Config(format!("quantile level {q} is outside 1..=100")));
            }
            let rank = (q as usize * n).div_ceil(100);
            Ok(r[rank - 1])
        })
        .collect::<Result<_>>()?;
    Ok(QuantileTable {
        levels: sorted_levels,
        values,
        days: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdiDistribution {
    pub date: usize,
    pub histogram: Vec<usize>,
    pub n_valid: usize,
    pub skewness: f64,
}

/// Fisher-Pearson (biased) sample skewness `m3 / m2^1.5`; 0 for constant data.
pub fn skewness(values: &[f64]) -> f64 {
    // the rounded mean of constant data can differ from the constant by an
    // ulp, which would turn the 0/0 case into noise
    if values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Equal-width bins over [0, 1]; the last bin includes 1.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

pub fn fdi_distribution(map: &FdiMap, bins: usize) -> Result<FdiDistribution> {
    let v: Vec<f64> = map.valid_values().into_iter().map(f64::from).collect();
    if v.len() < 3 {
        return Err(Error::Empty(format!(
            "day {}: skewness needs at least 3 valid pixels, found {}",
            map.date,
            v.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Config("histogram bin count must be positive".into()));
    }
    Ok(FdiDistribution {
        date: map.date,
        histogram: histogram(&v, bins),
        n_valid: v.len(),
        skewness: skewness(&v),
    })
}

/// Mean of member recalls (`lhs`) against the recall of the mean map (`rhs`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub date: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub member_recalls: Vec<f64>,
}

/// One row per day with valid fire pixels; `members[d]` holds the member
/// maps of `burns[d]`'s day.
pub fn ensemble_consistency(members: &[Vec<FdiMap>], burns: &[&[bool]], threshold: f32) -> Result<Vec<ConsistencyRow>> {
    if members.len() != burns.len() {
        return Err(Error::shape("ensemble_consistency", "one burn mask per day is required"));
    }
    let rows: Vec<Option<ConsistencyRow>> = members
        .par_iter()
        .zip(burns.par_iter())
        .map(|(maps, burn)| {
            if maps.len() < 2 {
                return Err(Error::Invalid("ensemble consistency needs at least two members".into()));
            }
            let avg = ensemble_average(maps)?;
            let Some(rhs) = daily_recall(&avg, burn, threshold)? else {
                return Ok(None);
            };
            let mut member_recalls = Vec::with_capacity(maps.len());
            for m in maps {
                let r = daily_recall(m, burn, threshold)?.expect("same mask as the average");
                member_recalls.push(r.recall);
            }
            let lhs = member_recalls.iter().sum::<f64>() / maps.len() as f64;
            Ok(Some(ConsistencyRow {
                date: avg.date,
                lhs,
                rhs: rhs.recall,
                gap: (lhs - rhs.recall).abs(),
                member_recalls,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub date: usize,
    pub model_recall: Option<f64>,
    pub baseline_recall: Option<f64>,
    pub model_false_alarm: f64,
    pub baseline_false_alarm: f64,
}

/// Min-max rescaling to [0, 1] over the valid pixels; a constant raster maps to 0.
pub fn rescale_min_max(map: &FdiMap) -> FdiMap {
    let v = map.valid_values();
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = map.clone();
    for (x, m) in out.values.iter_mut().zip(&map.mask) {
        *x = if !*m || span <= 0.0 { 0.0 } else { (*x - lo) / span };
    }
    out
}

/// Valid non-fire pixels above `threshold` over all valid non-fire pixels.
pub fn false_alarm_fraction(map: &FdiMap, burn: &[bool], threshold: f32) -> f64 {
    let (mut n, mut above) = (0usize, 0usize);
    for ((v, m), b) in map.values.iter().zip(&map.mask).zip(burn) {
        if *m && !*b {
            n += 1;
            above += (*v > threshold) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        above as f64 / n as f64
    }
}

/// The baseline is expected already rescaled to [0, 1].
pub fn compare_baseline(
    model: &FdiMap,
    baseline: &FdiMap,
    burn: &[bool],
    thresholds: (f32, f32),
) -> Result<BaselineRow> {
    if model.height != baseline.height || model.width != baseline.width || burn.len() != model.mask.len() {
        return Err(Error::shape("compare_baseline", "model, baseline and burn grids differ"));
    }
    // compare on pixels valid in both
    let mask: Vec<bool> = model.mask.iter().zip(&baseline.mask).map(|(a, b)| *a && *b).collect();
    let restrict = |m: &FdiMap| FdiMap {
        mask: mask.clone(),
        ..m.clone()
    };
    let (m, b) = (restrict(model), restrict(baseline));
    Ok(BaselineRow {
        date: model.date,
        model_recall: daily_recall(&m, burn, thresholds.0)?.map(|r| r.recall),
        baseline_recall: daily_recall(&b, burn, thresholds.1)?.map(|r| r.recall),
        model_false_alarm: false_alarm_fraction(&m, burn, thresholds.0),
        baseline_false_alarm: false_alarm_fraction(&b, burn, thresholds.1),
    })
}

/// `count` distinct zero-fire days from `days`, chosen under `seed` and
/// returned in date order.
pub fn select_nofire_days(cube: &DataCube, days: std::ops::Range<usize>, count: usize, seed: u64) -> Result<Vec<usize>> {
    let pool: Vec<usize> = days.filter(|&d| cube.fire_count(d) == 0).collect();
    if pool.len() < count {
        return Err(Error::Empty(format!(
            "only {} zero-fire days are available, {count} requested",
            pool.len()
        )));
    }
    let mut r = rng::stream(seed, "evaluation/nofire-days");
    let mut picked: Vec<usize> = sample(&mut r, pool.len(), count).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Days of `days` with at least one burn pixel.
pub fn fire_days(cube: &DataCube, days: std::ops::Range<usize>) -> Vec<usize> {
    days.filter(|&d| cube.fire_count(d) > 0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberDistribution {
    pub member: String,
    pub distribution: FdiDistribution,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub daily_recall: Vec<DailyRecallRecord>,
    pub quantiles: Option<QuantileTable>,
    /// Distributions of the evaluated (averaged, for ensembles) maps.
    pub distributions: Vec<FdiDistribution>,
    /// Per-member distributions of the same days, for ensembles.
    pub member_distributions: Vec<MemberDistribution>,
    pub consistency: Vec<ConsistencyRow>,
    pub member_ids: Vec<String>,
    pub baseline: Vec<BaselineRow>,
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG bar chart of a histogram over [0, 1].
pub fn histogram_svg(title: &str, hist: &[usize]) -> String {
    let (w, h, pad) = (420.0, 240.0, 30.0);
    let max = hist.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (w - 2.0 * pad) / hist.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <text x=\"{pad}\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        xml_escape(title)
    );
    for (i, c) in hist.iter().enumerate() {
        let bh = (h - 2.0 * pad) * *c as f64 / max;
        s.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"#c0392b\"><title>{c}</title></rect>\n",
            pad + i as f64 * bw,
            h - pad - bh,
            bw * 0.9
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{t}\" font-size=\"10\">0</text>\n\
         <text x=\"{x2}\" y=\"{t}\" font-size=\"10\" text-anchor=\"end\">1</text>\n</svg>\n",
        y = h - pad,
        x2 = w - pad,
        t = h - pad + 14.0
    ));
    s
}

/// Member x day heatmap of daily recall (white 0, dark red 1).
pub fn heatmap_svg(rows: &[ConsistencyRow], members: &[String]) -> String {
    let cell = 12.0;
    let left = 110.0;
    let w = left + cell * rows.len() as f64 + 10.0;
    let h = 20.0 + cell * members.len() as f64 + 10.0;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    for (m, name) in members.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"2\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"9\">{}</text>\n",
            20.0 + cell * (m as f64 + 0.8),
            xml_escape(name)
        ));
        for (d, row) in rows.iter().enumerate() {
            let r = row.member_recalls.get(m).copied().unwrap_or(0.0);
            let shade = (255.0 * (1.0 - r)).round() as u8;
            s.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb(255,{shade},{shade})\"><title>day {} recall {r:.3}</title></rect>\n",
                left + cell * d as f64,
                20.0 + cell * m as f64,
                row.date
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the CSV tables, `summary.json` and SVG charts into `dir`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut t = String::from("date,fires,detected,recall\n");
    for r in &report.daily_recall {
        t.push_str(&format!("{},{},{},{}\n", r.date, r.fires, r.detected, r.recall));
    }
    write(&dir.join("daily_recall.csv"), t)?;

    let mut t = String::from("level,value\n");
    if let Some(q) = &report.quantiles {
        for (l, v) in q.levels.iter().zip(&q.values) {
            t.push_str(&format!("{l},{v}\n"));
        }
    }
    write(&dir.join("quantiles.csv"), t)?;

    let mut t = String::from("date,skewness,n_valid\n");
    for d in &report.distributions {
        t.push_str(&format!("{},{},{}\n", d.date, d.skewness, d.n_valid));
        write(
            &dir.join(format!("histogram_{}.svg", d.date)),
            histogram_svg(&format!("FDI distribution, day {} (skewness {:.3})", d.date, d.skewness), &d.histogram),
        )?;
    }
    write(&dir.join("skewness.csv"), t)?;

    if !report.member_distributions.is_empty() {
        let mut t = String::from("member,date,skewness,n_valid\n");
        for m in &report.member_distributions {
            let d = &m.distribution;
            t.push_str(&format!("{},{},{},{}\n", m.member, d.date, d.skewness, d.n_valid));
        }
        write(&dir.join("member_skewness.csv"), t)?;
    }

    let mut t = String::from("date,lhs,rhs,gap\n");
    for r in &report.consistency {
        t.push_str(&format!("{},{},{},{}\n", r.date, r.lhs, r.rhs, r.gap));
    }
    write(&dir.join("eq1.csv"), t)?;

    if !report.consistency.is_empty() {
        let mut t = String::from("date");
        for m in &report.member_ids {
            t.push(',');
            t.push_str(m);
        }
        t.push('\n');
        for r in &report.consistency {
            t.push_str(&r.date.to_string());
            for v in &r.member_recalls {
                t.push_str(&format!(",{v}"));
            }
            t.push('\n');
        }
        write(&dir.join("member_recall.csv"), t)?;
        write(&dir.join("member_recall.svg"), heatmap_svg(&report.consistency, &report.member_ids))?;
    }

    let mut t = String::from("date,model_recall,baseline_recall,model_false_alarm,baseline_false_alarm\n");
    for r in &report.baseline {
        t.push_str(&format!(
            "{},{},{},{},{}\n",
            r.date,
            opt(r.model_recall),
            opt(r.baseline_recall),
            r.model_false_alarm,
            r.baseline_false_alarm
        ));
    }
    write(&dir.join("baseline.csv"), t)?;

    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write(&path, text + "\n")
}

pub fn read_summary(dir: impl AsRef<Path>) -> Result<EvalReport> {
    let path = dir.as_ref().join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}
