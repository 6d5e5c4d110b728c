//! Dense FDI maps: the patch classifier evaluated at every susceptible pixel.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checksum::{crc64, f32_bytes, f32_from_bytes, from_hex, to_hex};
use crate::datacube::{extract_normalized_into, DataCube, Normalizer, N_CHANNELS};
use crate::error::{Error, Result};
use crate::models::{Batch, ModelBundle};

/// FDI over an `height x width` grid. `values` is only meaningful where
/// `mask` is set; elsewhere it holds 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FdiMap {
    pub height: usize,
    pub width: usize,
    pub date: usize,
    pub model_id: String,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl FdiMap {
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let p = y * self.width + x;
        self.mask[p].then(|| self.values[p])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Valid values in row-major order.
    pub fn valid_values(&self) -> Vec<f32> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn mask_crc(&self) -> u64 {
        crc64(&self.mask.iter().map(|m| *m as u8).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOptions {
    /// Patches per forward call.
    pub batch_width: usize,
    /// Further restricts the susceptible pixels to this row-major subset.
    pub pixels: Option<Vec<bool>>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            batch_width: 256,
            pixels: None,
        }
    }
}

/// FDI of a single pixel from a standalone one-patch forward.
pub fn pixel_fdi(bundle: &ModelBundle, cube: &DataCube, date: usize, norm: &Normalizer, x: usize, y: usize) -> Result<f32> {
    let tile = infer_tile(bundle, cube, date, norm, &[y * cube.width() + x])?;
    Ok(tile[0])
}

fn infer_tile(bundle: &ModelBundle, cube: &DataCube, date: usize, norm: &Normalizer, pixels: &[usize]) -> Result<Vec<f32>> {
    let cfg = bundle.config();
    let (s, t) = (cfg.patch_size, cfg.temporal_len);
    let vl = t * N_CHANNELS * s * s;
    let pl = s * s;
    let mut values = vec![0.0f32; pixels.len() * vl];
    let mut clc = vec![0u16; pixels.len() * pl];
    let w = cube.width();
    for (k, &p) in pixels.iter().enumerate() {
        extract_normalized_into(
            cube,
            norm,
            date,
            p % w,
            p / w,
            s,
            t,
            &mut values[k * vl..(k + 1) * vl],
            &mut clc[k * pl..(k + 1) * pl],
        )?;
    }
    let batch = Batch::new(pixels.len(), t, N_CHANNELS, s, values, clc)?;
    let logp = bundle.network.log_probs(&batch)?;
    Ok((0..pixels.len()).map(|i| logp.item(i)[0].exp()).collect())
}

pub fn full_map_inference(bundle: &ModelBundle, cube: &DataCube, date: usize, norm: &Normalizer) -> Result<FdiMap> {
    full_map_inference_with(bundle, cube, date, norm, &InferenceOptions::default())
}

/// Tiles of `batch_width` pixels are evaluated in parallel on the current
/// rayon pool; every pixel's value depends only on its own patch, so the map
/// is identical for any thread count or tile width.
pub fn full_map_inference_with(
    bundle: &ModelBundle,
    cube: &DataCube,
    date: usize,
    norm: &Normalizer,
    opts: &InferenceOptions,
) -> Result<FdiMap> {
    let t = bundle.config().temporal_len;
    if date >= cube.days() || date + 1 < t {
        return Err(Error::DateOutOfRange {
            date,
            reason: format!(
                "inference needs {t} days of history inside a cube of {} days",
                cube.days()
            ),
        });
    }
    let px = cube.header.pixels();
    let mut mask = cube.susceptible.clone();
    if let Some(subset) = &opts.pixels {
        if subset.len() != px {
            return Err(Error::shape("full_map_inference", "pixel subset does not match the grid"));
        }
        for (m, s) in mask.iter_mut().zip(subset) {
            *m &= *s;
        }
    }
    let pixels: Vec<usize> = (0..px).filter(|&p| mask[p]).collect();
    let tiles: Vec<Vec<f32>> = pixels
        .par_chunks(opts.batch_width.max(1))
        .map(|tile| infer_tile(bundle, cube, date, norm, tile))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0f32; px];
    for (p, v) in pixels.iter().zip(tiles.into_iter().flatten()) {
        values[*p] = v;
    }
    Ok(FdiMap {
        height: cube.height(),
        width: cube.width(),
        date,
        model_id: model_id(bundle),
        values,
        mask,
    })
}

pub fn model_id(bundle: &ModelBundle) -> String {
    format!("{}-{}", bundle.config().architecture, bundle.provenance.init_seed)
}

/// Pixel-wise mean over members, summed in member order.
pub fn ensemble_average(maps: &[FdiMap]) -> Result<FdiMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("ensemble map set".into()))?;
    for m in &maps[1..] {
        if m.height != first.height || m.width != first.width || m.mask != first.mask || m.date != first.date {
            return Err(Error::MaskMismatch(format!(
                "member {} differs from {} in grid, date or validity mask",
                m.model_id, first.model_id
            )));
        }
    }
    let n = maps.len() as f64;
    let values = (0..first.values.len())
        .map(|p| {
            if !first.mask[p] {
                return 0.0;
            }
            let mut sum = 0.0f64;
            for m in maps {
                sum += f64::from(m.values[p]);
            }
            (sum / n) as f32
        })
        .collect();
    Ok(FdiMap {
        height: first.height,
        width: first.width,
        date: first.date,
        model_id: format!("ensemble({})", maps.iter().map(|m| m.model_id.as_str()).collect::<Vec<_>>().join(",")),
        values,
        mask: first.mask.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SidecarMeta {
    date: usize,
    model_id: String,
    height: usize,
    width: usize,
    valid_pixels: usize,
    mask_crc64: String,
}

/// 8-bit level of an FDI value: 0 is reserved for invalid pixels.
pub fn quantize(v: f32) -> u8 {
    1 + (f64::from(v.clamp(0.0, 1.0)) * 254.0).round() as u8
}

pub fn sidecar_paths(dir: &Path, date: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("fdi_{date}.pgm")),
        dir.join(format!("fdi_{date}.f32")),
        dir.join(format!("fdi_{date}.json")),
    )
}

/// Writes `fdi_<date>.pgm` (binary graymap), `fdi_<date>.f32` (row-major
/// little-endian, NaN at invalid pixels) and `fdi_<date>.json`.
pub fn render_map(map: &FdiMap, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (pgm, raw, meta) = sidecar_paths(dir, map.date);
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend(map.values.iter().zip(&map.mask).map(|(v, m)| if *m { quantize(*v) } else { 0 }));
    fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;
    let floats: Vec<f32> = map
        .values
        .iter()
        .zip(&map.mask)
        .map(|(v, m)| if *m { *v } else { f32::NAN })
        .collect();
    fs::write(&raw, f32_bytes(&floats)).map_err(|e| Error::io(&raw, e))?;
    let m = SidecarMeta {
        date: map.date,
        model_id: map.model_id.clone(),
        height: map.height,
        width: map.width,
        valid_pixels: map.valid_count(),
        mask_crc64: to_hex(map.mask_crc()),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Json {
        path: meta.clone(),
        source: e,
    })?;
    fs::write(&meta, text + "\n").map_err(|e| Error::io(&meta, e))
}

pub fn read_map(dir: impl AsRef<Path>, date: usize) -> Result<FdiMap> {
    let (_, raw, meta) = sidecar_paths(dir.as_ref(), date);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let m: SidecarMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta.clone(),
        source: e,
    })?;
    read_raster(&raw, m.height, m.width).and_then(|(values, mask)| {
        let map = FdiMap {
            height: m.height,
            width: m.width,
            date: m.date,
            model_id: m.model_id.clone(),
            values,
            mask,
        };
        let expected = from_hex(&m.mask_crc64).ok_or_else(|| Error::Parse {
            path: meta.clone(),
            detail: "malformed mask checksum".into(),
        })?;
        if map.mask_crc() != expected {
            return Err(Error::Checksum {
                what: format!("{} validity mask", raw.display()),
                expected,
                found: map.mask_crc(),
            });
        }
        Ok(map)
    })
}

/// Reads a row-major little-endian f32 raster; NaN marks invalid pixels.
pub fn read_raster(path: &Path, height: usize, width: usize) -> Result<(Vec<f32>, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (height * width * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let raw = f32_from_bytes(&bytes);
    let mask: Vec<bool> = raw.iter().map(|v| !v.is_nan()).collect();
    let values = raw.into_iter().map(|v| if v.is_nan() { 0.0 } else { v }).collect();
    Ok((values, mask))
}
