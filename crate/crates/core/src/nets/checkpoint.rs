//! Raw array files: parameters as little-endian `f32`, optimizer state as
//! little-endian `f64`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{snap, Block, ParamSet};
use crate::error::{Error, Result};

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes the parameter values as `f32` and returns the file's SHA-256.
pub fn write_params(path: &Path, params: &ParamSet) -> Result<String> {
    let mut bytes = Vec::with_capacity(params.len() * 4);
    for (i, &v) in params.values.iter().enumerate() {
        if snap(v) != v {
            return Err(ckpt_err(
                path,
                format!("parameter {i} = {v} is not representable in f32"),
            ));
        }
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_params(path: &Path, layout: Vec<Block>, sha256: Option<&str>) -> Result<ParamSet> {
    let bytes = std::fs::read(path)?;
    verify(path, &bytes, sha256)?;
    if bytes.len() % 4 != 0 {
        return Err(ckpt_err(path, "length is not a multiple of 4"));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ParamSet::from_parts(layout, values).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<String> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_f64s(path: &Path, sha256: Option<&str>) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    verify(path, &bytes, sha256)?;
    if bytes.len() % 8 != 0 {
        return Err(ckpt_err(path, "length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn verify(path: &Path, bytes: &[u8], sha256: Option<&str>) -> Result<()> {
    match sha256 {
        Some(expected) if sha256_hex(bytes) != expected => Err(ckpt_err(path, "checksum mismatch")),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::models::{DiffusionNet, DiffusionNetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = DiffusionNet::new(DiffusionNetConfig::default());
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(9));
        let path = dir.path().join("d.f32");
        let sum = write_params(&path, &p).unwrap();
        let back = read_params(&path, p.layout().to_vec(), Some(&sum)).unwrap();
        let bits = |s: &ParamSet| s.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&p));
        assert!(read_params(&path, p.layout().to_vec(), Some("00")).is_err());
        assert!(read_params(&path, p.layout()[..2].to_vec(), None).is_err());
    }

    #[test]
    fn unrepresentable_values_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let net = DiffusionNet::new(DiffusionNetConfig::default());
        let mut p = net.init(&mut ChaCha8Rng::seed_from_u64(9));
        p.values[0] = 0.1;
        assert!(write_params(&dir.path().join("x"), &p).is_err());
    }

    #[test]
    fn f64_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.f64");
        let v = vec![0.1, -3.5e-300, f64::MIN_POSITIVE];
        let sum = write_f64s(&path, &v).unwrap();
        assert_eq!(read_f64s(&path, Some(&sum)).unwrap(), v);
    }
}
