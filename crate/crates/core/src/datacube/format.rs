//! Directory-based cube format.
//!
//! ```text
//! <dir>/header.json          CubeHeader keys + "payloads": { file: crc64-hex }
//! <dir>/chan_<name>.f32      days x H x W, little-endian f32
//! <dir>/clc.u16              H x W, little-endian u16
//! <dir>/susceptible.u8       H x W, 0/1
//! <dir>/burn.u8              days x H x W, 0/1
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CubeHeader, DataCube, CHANNELS};
use crate::checksum::{crc64, from_hex, to_hex, Crc64Stream};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderFile {
    #[serde(flatten)]
    header: CubeHeader,
    payloads: BTreeMap<String, String>,
}

fn write_payload(dir: &Path, name: &str, bytes: impl Iterator<Item = u8>) -> Result<u64> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let mut crc = Crc64Stream::default();
    let mut buf = Vec::with_capacity(1 << 16);
    for b in bytes {
        buf.push(b);
        if buf.len() == buf.capacity() {
            crc.update(&buf);
            w.write_all(&buf).map_err(|e| Error::io(&path, e))?;
            buf.clear();
        }
    }
    crc.update(&buf);
    w.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(crc.finish())
}

pub fn save_cube(cube: &DataCube, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    cube.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payloads = BTreeMap::new();
    for (name, data) in CHANNELS.iter().zip(&cube.channels) {
        let file = format!("chan_{name}.f32");
        let crc = write_payload(dir, &file, data.iter().flat_map(|v| v.to_le_bytes()))?;
        payloads.insert(file, to_hex(crc));
    }
    let crc = write_payload(dir, "clc.u16", cube.clc.iter().flat_map(|v| v.to_le_bytes()))?;
    payloads.insert("clc.u16".into(), to_hex(crc));
    let crc = write_payload(dir, "susceptible.u8", cube.susceptible.iter().map(|b| *b as u8))?;
    payloads.insert("susceptible.u8".into(), to_hex(crc));
    let crc = write_payload(dir, "burn.u8", cube.burn.iter().map(|b| *b as u8))?;
    payloads.insert("burn.u8".into(), to_hex(crc));
    let header = HeaderFile {
        header: cube.header.clone(),
        payloads,
    };
    let path = dir.join("header.json");
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_checked(dir: &Path, name: &str, expected_len: u64, payloads: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expected_len {
        return Err(Error::Truncated {
            path,
            expected: expected_len,
            found: bytes.len() as u64,
        });
    }
    let expected = payloads
        .get(name)
        .and_then(|h| from_hex(h))
        .ok_or_else(|| Error::Parse {
            path: dir.join("header.json"),
            detail: format!("missing or malformed checksum for {name}"),
        })?;
    let found = crc64(&bytes);
    if found != expected {
        return Err(Error::Checksum {
            what: path.display().to_string(),
            expected,
            found,
        });
    }
    Ok(bytes)
}

/// Reads a cube directory. Either the whole cube is returned or an error;
/// checks run in order version, extents, checksums, invariants.
pub fn load_cube(dir: impl AsRef<Path>) -> Result<DataCube> {
    let dir = dir.as_ref();
    let path = dir.join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let file: HeaderFile = serde_json::from_value(raw).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let header = file.header;
    header.validate()?;
    let px = header.pixels() as u64;
    let total = px * header.days as u64;
    let mut channels = Vec::with_capacity(CHANNELS.len());
    for name in CHANNELS {
        let bytes = read_checked(dir, &format!("chan_{name}.f32"), total * 4, &file.payloads)?;
        channels.push(crate::checksum::f32_from_bytes(&bytes));
    }
    let clc = read_checked(dir, "clc.u16", px * 2, &file.payloads)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let susceptible = read_checked(dir, "susceptible.u8", px, &file.payloads)?
        .into_iter()
        .map(|b| b != 0)
        .collect();
    let burn = read_checked(dir, "burn.u8", total, &file.payloads)?
        .into_iter()
        .map(|b| b != 0)
        .collect();
    let cube = DataCube {
        header,
        channels,
        clc,
        susceptible,
        burn,
    };
    cube.validate()?;
    Ok(cube)
}

/// CRC of every payload as recorded in the header, for run manifests.
pub fn payload_checksums(dir: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = dir.as_ref().join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: HeaderFile = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
    Ok(file.payloads)
}
