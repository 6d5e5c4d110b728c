//! `model.json` (config, provenance, array manifest with CRC-64 per array)
//! plus `weights.f32`, the arrays concatenated little-endian in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureId, ModelBundle, ModelConfig, Network, Provenance};
use crate::checksum::{crc64, f32_bytes, f32_from_bytes, from_hex, to_hex};
use crate::error::{Error, Result};
use crate::nncore::NdArray;

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    crc64: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    provenance: Provenance,
    arrays: Vec<ArrayEntry>,
}

pub fn save_weights(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut arrays = Vec::new();
    for (name, a) in bundle.network.arrays() {
        let bytes = f32_bytes(a.data());
        arrays.push(ArrayEntry {
            name,
            shape: a.shape().to_vec(),
            offset: payload.len() / 4,
            crc64: to_hex(crc64(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    let file = ModelFile {
        format_version: WEIGHTS_VERSION,
        config: bundle.network.config.clone(),
        provenance: bundle.provenance.clone(),
        arrays,
    };
    let wpath = dir.join("weights.f32");
    fs::write(&wpath, &payload).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join("model.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))
}

/// Loads a bundle; with `expected` set, a file holding another architecture
/// is rejected.
pub fn load_weights(dir: impl AsRef<Path>, expected: Option<ArchitectureId>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join("model.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            path: mpath,
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(raw).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    if let Some(arch) = expected {
        if arch != file.config.architecture {
            return Err(Error::ArchitectureMismatch {
                expected: arch.to_string(),
                found: file.config.architecture.to_string(),
            });
        }
    }
    let wpath = dir.join("weights.f32");
    let payload = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut network = Network::<f32>::new(&file.config)?;
    let targets = network.arrays_mut();
    if targets.len() != file.arrays.len() {
        return Err(Error::ArchitectureMismatch {
            expected: format!("{} arrays for {}", targets.len(), file.config.architecture),
            found: format!("{} arrays", file.arrays.len()),
        });
    }
    for ((name, dst), entry) in targets.into_iter().zip(&file.arrays) {
        if name != entry.name || dst.shape() != entry.shape.as_slice() {
            return Err(Error::ArchitectureMismatch {
                expected: format!("{name} {:?}", dst.shape()),
                found: format!("{} {:?}", entry.name, entry.shape),
            });
        }
        let (start, end) = (entry.offset * 4, (entry.offset + dst.len()) * 4);
        if end > payload.len() {
            return Err(Error::Truncated {
                path: wpath,
                expected: end as u64,
                found: payload.len() as u64,
            });
        }
        let bytes = &payload[start..end];
        let expected = from_hex(&entry.crc64).ok_or_else(|| Error::Parse {
            path: mpath.clone(),
            detail: format!("malformed checksum for {name}"),
        })?;
        let found = crc64(bytes);
        if found != expected {
            return Err(Error::Checksum {
                what: format!("{} array {name}", wpath.display()),
                expected,
                found,
            });
        }
        *dst = NdArray::from_vec(&entry.shape, f32_from_bytes(bytes))?;
    }
    Ok(ModelBundle {
        network,
        provenance: file.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Batch};
    use rand::{Rng, SeedableRng};

    fn bundle() -> ModelBundle {
        let mut cfg = ModelConfig::default_for(ArchitectureId::BasicCnn);
        cfg.init_seed = 4;
        let mut b = build_model(&cfg).unwrap();
        b.network.blocks[0].bn.running_mean.data_mut()[3] = 0.25;
        b
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        save_weights(&b, dir.path()).unwrap();
        let l = load_weights(dir.path(), Some(ArchitectureId::BasicCnn)).unwrap();
        assert_eq!(l.network.arrays(), b.network.arrays());
        let mut r = crate::rng::Rng::seed_from_u64(0);
        let batch = Batch::new(
            2,
            1,
            14,
            25,
            (0..2 * 14 * 625).map(|_| r.random_range(-1.0..1.0)).collect(),
            (0..2 * 625).map(|_| r.random_range(0..15)).collect(),
        )
        .unwrap();
        assert_eq!(l.network.infer(&batch).unwrap(), b.network.infer(&batch).unwrap());
    }

    #[test]
    fn tampered_payload() {
        let dir = tempfile::tempdir().unwrap();
        save_weights(&bundle(), dir.path()).unwrap();
        let p = dir.path().join("weights.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[1000] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_weights(dir.path(), None), Err(Error::Checksum { .. })));
    }

    #[test]
    fn wrong_architecture() {
        let dir = tempfile::tempdir().unwrap();
        save_weights(&bundle(), dir.path()).unwrap();
        assert!(matches!(
            load_weights(dir.path(), Some(ArchitectureId::ConvLstm)),
            Err(Error::ArchitectureMismatch { .. })
        ));
    }
}
