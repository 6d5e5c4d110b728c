//! CRC-64 (ECMA-182 polynomial, XZ parameterisation) used by every on-disk payload.

use crc::{Crc, CRC_64_XZ};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Incremental hasher for payloads written in pieces.
pub struct Crc64Stream {
    digest: crc::Digest<'static, u64>,
}

impl Default for Crc64Stream {
    fn default() -> Self {
        Self {
            digest: CRC64.digest(),
        }
    }
}

impl Crc64Stream {
    pub fn update(&mut self, bytes: &[u8]) {
        self.digest.update(bytes);
    }

    pub fn finish(self) -> u64 {
        self.digest.finalize()
    }
}

pub fn to_hex(v: u64) -> String {
    format!("{v:016x}")
}

pub fn from_hex(s: &str) -> Option<u64> {
    u64::from_str_radix(s, 16).ok()
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_value() {
        // standard check input for CRC-64/XZ
        assert_eq!(crc64(b"123456789"), 0x995d_c9bb_df19_39fa);
    }

    #[test]
    fn streaming_matches_one_shot() {
        let data: Vec<u8> = (0..1000u32).map(|i| (i * 31 % 251) as u8).collect();
        let mut s = Crc64Stream::default();
        for chunk in data.chunks(77) {
            s.update(chunk);
        }
        assert_eq!(s.finish(), crc64(&data));
    }
}
