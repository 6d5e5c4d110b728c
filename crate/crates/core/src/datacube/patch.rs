//! Square patch extraction around a center pixel, with mirror padding at
//! the grid border.

use super::{DataCube, Normalizer, N_CHANNELS};
use crate::error::{Error, Result};

/// Reflects `i` into `0..n` without repeating the edge (`-1 -> 1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Un-normalized patch: `temporal_len x 14 x size x size` continuous values
/// (oldest step first) plus the static `size x size` CLC plane.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatch {
    pub size: usize,
    pub temporal_len: usize,
    pub values: Vec<f32>,
    pub clc: Vec<u16>,
}

impl RawPatch {
    pub fn get(&self, step: usize, channel: usize, row: usize, col: usize) -> f32 {
        let s = self.size;
        self.values[((step * N_CHANNELS + channel) * s + row) * s + col]
    }
}

fn check(cube: &DataCube, date: usize, x: usize, y: usize, size: usize, temporal_len: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Invalid(format!("patch size {size} must be odd")));
    }
    if temporal_len == 0 {
        return Err(Error::Invalid("temporal length must be positive".into()));
    }
    if date >= cube.days() {
        return Err(Error::DateOutOfRange {
            date,
            reason: format!("cube holds {} days", cube.days()),
        });
    }
    if date + 1 < temporal_len {
        return Err(Error::DateOutOfRange {
            date,
            reason: format!("a {temporal_len}-step window needs date >= {}", temporal_len - 1),
        });
    }
    if x >= cube.width() || y >= cube.height() {
        return Err(Error::Invalid(format!(
            "center ({x}, {y}) outside the {}x{} grid",
            cube.width(),
            cube.height()
        )));
    }
    Ok(())
}

fn offsets(center: usize, size: usize, n: usize) -> Vec<usize> {
    let half = (size / 2) as isize;
    (0..size as isize)
        .map(|k| reflect_index(center as isize - half + k, n))
        .collect()
}

fn fill(
    cube: &DataCube,
    norm: Option<&Normalizer>,
    date: usize,
    x: usize,
    y: usize,
    size: usize,
    temporal_len: usize,
    values: &mut [f32],
    clc: &mut [u16],
) {
    let w = cube.width();
    let cols = offsets(x, size, w);
    let rows = offsets(y, size, cube.height());
    let contiguous = cols.windows(2).all(|p| p[1] == p[0] + 1);
    let plane = size * size;
    for step in 0..temporal_len {
        let day = date + 1 + step - temporal_len;
        for c in 0..N_CHANNELS {
            let frame = cube.frame(c, day);
            let out = &mut values[(step * N_CHANNELS + c) * plane..][..plane];
            for (r, &row) in rows.iter().enumerate() {
                let dst = &mut out[r * size..(r + 1) * size];
                let src = &frame[row * w..(row + 1) * w];
                if contiguous {
                    dst.copy_from_slice(&src[cols[0]..cols[0] + size]);
                } else {
                    for (d, &col) in dst.iter_mut().zip(&cols) {
                        *d = src[col];
                    }
                }
            }
            if let Some(n) = norm {
                n.apply_slice(c, out);
            }
        }
    }
    for (r, &row) in rows.iter().enumerate() {
        for (k, &col) in cols.iter().enumerate() {
            clc[r * size + k] = cube.clc[row * w + col];
        }
    }
}

pub fn extract_patch(
    cube: &DataCube,
    date: usize,
    x: usize,
    y: usize,
    size: usize,
    temporal_len: usize,
) -> Result<RawPatch> {
    check(cube, date, x, y, size, temporal_len)?;
    let mut values = vec![0.0; temporal_len * N_CHANNELS * size * size];
    let mut clc = vec![0; size * size];
    fill(cube, None, date, x, y, size, temporal_len, &mut values, &mut clc);
    Ok(RawPatch {
        size,
        temporal_len,
        values,
        clc,
    })
}

/// Writes the standardized patch into caller-owned buffers of length
/// `temporal_len * 14 * size * size` and `size * size`.
#[allow(clippy::too_many_arguments)]
pub fn extract_normalized_into(
    cube: &DataCube,
    norm: &Normalizer,
    date: usize,
    x: usize,
    y: usize,
    size: usize,
    temporal_len: usize,
    values: &mut [f32],
    clc: &mut [u16],
) -> Result<()> {
    check(cube, date, x, y, size, temporal_len)?;
    if values.len() != temporal_len * N_CHANNELS * size * size || clc.len() != size * size {
        return Err(Error::shape("extract_normalized_into", "output buffers do not match the patch size"));
    }
    fill(cube, Some(norm), date, x, y, size, temporal_len, values, clc);
    Ok(())
}
