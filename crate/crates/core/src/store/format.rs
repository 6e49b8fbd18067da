//! VLUE v1: the on-disk embedding dataset format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VLUE"
//! 4       1     version (1)
//! 5       1     mode (0 = image-label, 1 = image-caption)
//! 6       1     dtype (0 = f32)
//! 7       1     reserved (0)
//! 8       4     tau, f32
//! 12      4     d, u32
//! 16      8     N, u64
//! 24      8     K, u64
//! 32      ...   images, N*d f32 row-major
//!               texts, K*d f32 row-major
//!               labels, N u32 (mode 0) | text ids, K u32 (mode 1)
//! ```
//!
//! Everything is little-endian. An optional `<path>.meta.json` sidecar holds
//! free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::dataset::{DatasetMeta, EmbeddingDataset, Mode};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: [u8; 4] = *b"VLUE";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 32;

/// Size in bytes of a VLUE file for the given shape.
pub fn encoded_len(mode: Mode, n: usize, k: usize, d: usize) -> usize {
    let tail = match mode {
        Mode::ImageLabel => n,
        Mode::ImageCaption => k,
    };
    HEADER_LEN + 4 * (n * d + k * d + tail)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn encode(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let (n, k, d) = (ds.len(), ds.num_texts(), ds.dim());
    let mut buf = Vec::with_capacity(encoded_len(ds.mode(), n, k, d));
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(ds.mode().code());
    buf.push(DTYPE_F32);
    buf.push(0);
    buf.extend_from_slice(&ds.tau().to_le_bytes());
    let d32 =
        u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("d = {d} exceeds u32")))?;
    buf.extend_from_slice(&d32.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    for x in ds.images().iter().chain(ds.texts().iter()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let tail = match ds.mode() {
        Mode::ImageLabel => ds.labels(),
        Mode::ImageCaption => ds.text_ids(),
    };
    for v in tail {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(Error::Truncated {
                what,
                needed: len as u64,
                available: available as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn f32_vec(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(byte_len(count, what)?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn u32_vec(&mut self, count: usize, what: &'static str) -> Result<Vec<u32>> {
        let raw = self.take(byte_len(count, what)?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn byte_len(count: usize, what: &'static str) -> Result<usize> {
    count.checked_mul(4).ok_or(Error::Truncated {
        what,
        needed: u64::MAX,
        available: 0,
    })
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let ds = decode_unvalidated(bytes)?;
    ds.validate()?;
    Ok(ds)
}

/// Parses the layout without checking norms, labels or ids, so a validator
/// can report every violation instead of stopping at the first.
pub fn decode_unvalidated(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = cur.take(HEADER_LEN, "header")?;
    let magic = [header[0], header[1], header[2], header[3]];
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    if header[4] != VERSION {
        return Err(Error::UnsupportedVersion(header[4]));
    }
    let mode = Mode::from_code(header[5])?;
    if header[6] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header[6]));
    }
    let tau = f32::from_le_bytes(header[8..12].try_into().unwrap());
    let d = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let k = u64::from_le_bytes(header[24..32].try_into().unwrap());
    let too_big = |what| Error::Truncated {
        what,
        needed: u64::MAX,
        available: bytes.len() as u64,
    };
    let n = usize::try_from(n).map_err(|_| too_big("images"))?;
    let k = usize::try_from(k).map_err(|_| too_big("texts"))?;
    let n_d = n.checked_mul(d).ok_or_else(|| too_big("images"))?;
    let k_d = k.checked_mul(d).ok_or_else(|| too_big("texts"))?;

    let images = cur.f32_vec(n_d, "images")?;
    let texts = cur.f32_vec(k_d, "texts")?;
    let (labels, text_ids) = match mode {
        Mode::ImageLabel => (cur.u32_vec(n, "labels")?, (0..k as u32).collect()),
        Mode::ImageCaption => (Vec::new(), cur.u32_vec(k, "text ids")?),
    };
    if cur.pos != bytes.len() {
        return Err(Error::Invariant(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }

    let images = Array2::from_shape_vec((n, d), images).map_err(|e| Error::Shape(e.to_string()))?;
    let texts = Array2::from_shape_vec((k, d), texts).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(EmbeddingDataset::from_parts_unchecked(
        mode, tau, images, texts, labels, text_ids,
    ))
}

/// Writes `ds` to `path`, plus the metadata sidecar when the dataset has one.
pub fn write_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode(ds)?)?;
    if let Some(meta) = ds.meta() {
        write_atomic(&meta_path(path), &serde_json::to_vec_pretty(meta)?)?;
    }
    Ok(())
}

/// Reads and validates a VLUE file, attaching the sidecar if present.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let ds = decode(&bytes)?;
    let sidecar = meta_path(path);
    if sidecar.exists() {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(sidecar)?)?;
        return Ok(ds.with_meta(meta));
    }
    Ok(ds)
}
