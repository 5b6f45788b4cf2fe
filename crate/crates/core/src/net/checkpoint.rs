//! Binary checkpoint format:
//!
//! ```text
//! "AWMCKPT1" | u64 header_len | JSON header | f64 params (LE) | u64 FNV-1a checksum
//! ```
//!
//! The checksum covers everything after the magic, so truncation anywhere is detected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Lineage, VelocityNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AWMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    arch: Arch,
    param_count: usize,
    lineage: Lineage,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(net: &VelocityNet) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        arch: net.arch().clone(),
        param_count: net.param_count(),
        lineage: net.lineage().clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut body = Vec::with_capacity(16 + json.len() + 8 * net.param_count());
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    for p in net.params() {
        body.extend_from_slice(&p.to_le_bytes());
    }
    let sum = fnv1a(&body);
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&body);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<VelocityNet> {
    let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes.len() < 8 + 8 + 8 {
        return Err(corrupt("file too short"));
    }
    let (body, tail) = bytes[8..].split_at(bytes.len() - 16);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let hlen = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(8..8 + hlen)
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let raw = &body[8 + hlen..];
    if raw.len() != 8 * header.param_count {
        return Err(corrupt("parameter payload length mismatch"));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    VelocityNet::from_params(header.arch, params, header.lineage)
}

pub fn save(net: &VelocityNet, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<VelocityNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn net() -> VelocityNet {
        VelocityNet::init(
            Arch {
                dim: 2,
                hidden: vec![8, 8],
                num_classes: 3,
                embed_dim: 4,
                time_features: 6,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let a = net();
        save(&a, &path).unwrap();
        let b = load(&path).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.lineage(), b.lineage());
        let x = Array2::from_shape_fn((5, 2), |(i, j)| i as f64 * 0.3 - j as f64);
        let t = [0.1, 0.3, 0.5, 0.7, 0.9];
        let c = [0, 1, 2, 0, 1];
        let ya = a.forward(x.view(), &t, &c).unwrap();
        let yb = b.forward(x.view(), &t, &c).unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = encode(&net());
        for cut in [9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::CheckpointCorrupt(_))));
        assert!(decode(b"NOTACKPT").is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let n = net();
        let header = Header {
            format_version: 99,
            arch: n.arch().clone(),
            param_count: n.param_count(),
            lineage: n.lineage().clone(),
        };
        let json = serde_json::to_vec(&header).unwrap();
        let mut body = (json.len() as u64).to_le_bytes().to_vec();
        body.extend_from_slice(&json);
        for p in n.params() {
            body.extend_from_slice(&p.to_le_bytes());
        }
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        let sum = fnv1a(&body);
        bytes.extend_from_slice(&body);
        bytes.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }
}
