//! VLUM model checkpoints.
//!
//! Layout (little-endian): `b"VLUM"`, `u8` version, `u32` length of the JSON
//! config, the config as UTF-8 JSON, then every parameter as `f32` in store
//! order, each tensor row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::ParamStore;
use crate::vilu::{ViluConfig, ViluModel};

pub const MAGIC: [u8; 4] = *b"VLUM";
pub const VERSION: u8 = 1;

pub fn encode(model: &ViluModel<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let values = model.params().flat_values();
    let mut out = Vec::with_capacity(9 + config.len() + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated {
            what,
            needed: n as u64,
            available: bytes.len() as u64,
        });
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<ViluModel<f32>> {
    let magic = take(&mut bytes, 4, "checkpoint magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = take(&mut bytes, 1, "checkpoint version")?[0];
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(
        take(&mut bytes, 4, "config length")?
            .try_into()
            .expect("4 bytes"),
    ) as usize;
    let config: ViluConfig = serde_json::from_slice(take(&mut bytes, len, "config")?)?;
    config.validate()?;

    let mut params = ParamStore::<f32>::init(&config.param_specs(), config.seed)?;
    let n = params.num_scalars();
    let raw = take(&mut bytes, 4 * n, "parameters")?;
    if !bytes.is_empty() {
        return Err(Error::Invariant(format!(
            "{} trailing bytes after parameters",
            bytes.len()
        )));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    params.load_flat(&values)?;
    ViluModel::from_params(config, params)
}

pub fn write_checkpoint(path: &Path, model: &ViluModel<f32>) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ViluModel<f32>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ViluModel<f32> {
        ViluModel::new(
            ViluConfig::full(6)
                .with_hidden(&[5, 4])
                .with_mcm_score(true)
                .with_seed(9),
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let m = model();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().flat_values(), m.params().flat_values());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vlum");
        write_checkpoint(&path, &model()).unwrap();
        assert_eq!(
            read_checkpoint(&path).unwrap().params().flat_values(),
            model().params().flat_values()
        );
    }
}
