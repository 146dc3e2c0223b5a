//! Binary tensor container and the embedding cache built on it.
//!
//! Wire format, all integers little-endian:
//!
//! ```text
//! magic "SLVM" | version u16 = 1 | ndim u8 | dims ndim x u32 | dtype u8 = 0 (f32)
//! | payload: row-major f32 | crc32 of payload (u32)
//! ```
//!
//! The embedding cache stores one 3-D container per feature level, named
//! `<id>.high.bin` / `<id>.mid.bin`. Checkpoints reuse the same container
//! with `ndim` 1, 2, or 4 for parameter tensors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLVM";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

/// A tensor of up to 4 dimensions plus its true shape, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<u32>,
    /// Values are f32-exact: they round-trip through the payload unchanged.
    pub values: Vec<f64>,
}

pub fn encode(dims: &[u32], values: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::Shape(format!(
            "container supports 1..=4 dims, got {}",
            dims.len()
        )));
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .filter(|&n| n <= u32::MAX as usize)
    });
    let count = count.ok_or_else(|| Error::Shape("dimension product overflows".into()))?;
    if count != values.len() {
        return Err(Error::Shape(format!(
            "dims {:?} imply {} values, got {}",
            dims,
            count,
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 2 + 1 + dims.len() * 4 + 1 + values.len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    let mut payload = Vec::with_capacity(values.len() * 4);
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<StoredTensor> {
    let fail = |reason: &str| Error::format(path, reason);
    if bytes.len() < 7 {
        return Err(fail("file shorter than fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 || ndim > 4 {
        return Err(fail(&format!("unsupported ndim {ndim}")));
    }
    let dims_end = 7 + ndim * 4;
    if bytes.len() < dims_end + 1 {
        return Err(fail("truncated dimension header"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 7 + i * 4;
        dims.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]));
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .filter(|&n| n <= u32::MAX as usize)
    });
    let count = count.ok_or_else(|| fail("dimension product overflows"))?;
    let dtype = bytes[dims_end];
    if dtype != DTYPE_F32 {
        return Err(fail(&format!("unsupported dtype {dtype}")));
    }
    let payload_start = dims_end + 1;
    let expected = payload_start + count * 4 + 4;
    if bytes.len() < expected {
        return Err(fail(&format!(
            "truncated payload: header claims {} bytes, file has {}",
            expected,
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(fail("trailing bytes after checksum"));
    }
    let payload = &bytes[payload_start..payload_start + count * 4];
    let stored_crc = u32::from_le_bytes([
        bytes[expected - 4],
        bytes[expected - 3],
        bytes[expected - 2],
        bytes[expected - 1],
    ]);
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(fail(&format!(
            "payload checksum mismatch: stored {stored_crc:08x}, computed {crc:08x}"
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(StoredTensor { dims, values })
}

pub fn write_tensor_file(path: &Path, dims: &[u32], values: &[f64]) -> Result<()> {
    let bytes = encode(dims, values)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Quick validity probe used by idempotent cache preparation: true iff the
/// file exists, parses, and passes its checksum.
pub fn is_valid_tensor_file(path: &Path) -> bool {
    fs::read(path).ok().and_then(|b| decode(&b, path).ok()).is_some()
}

/// Write one feature level of the embedding cache (`h x w x c`, 3-D).
pub fn save_feature_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.shape();
    write_tensor_file(path, &[h as u32, w as u32, c as u32], t.data())
}

/// Read one feature level; enforces the 3-D layout of the cache.
pub fn load_feature_tensor(path: &Path) -> Result<Tensor> {
    let stored = read_tensor_file(path)?;
    if stored.dims.len() != 3 {
        return Err(Error::format(
            path,
            format!("embedding cache expects 3 dims, got {}", stored.dims.len()),
        ));
    }
    let t = Tensor::from_vec(
        stored.dims[0] as usize,
        stored.dims[1] as usize,
        stored.dims[2] as usize,
        stored.values,
    )?;
    if !t.all_finite() {
        return Err(Error::format(path, "non-finite feature values"));
    }
    Ok(t)
}

/// Cache file names for an image id.
pub fn feature_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id}.high.bin")),
        dir.join(format!("{id}.mid.bin")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("test.bin")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let values: Vec<f64> = (0..24).map(|i| (i as f32 * 0.37 - 3.0) as f64).collect();
        let bytes = encode(&[2, 3, 4], &values).unwrap();
        let back = decode(&bytes, &p()).unwrap();
        assert_eq!(back.dims, vec![2, 3, 4]);
        assert_eq!(back.values, values);
        // re-encoding yields the same bytes
        assert_eq!(encode(&back.dims, &back.values).unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&[1, 1, 2], &[1.0, 2.0]).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = decode(&bytes[..bytes.len() - 6], &p()).unwrap_err();
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn short_payload_behind_large_header_is_rejected() {
        // header claims 16x16x128 but carries a 4-value payload
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.push(3);
        for d in [16u32, 16, 128] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&[0u8; 16 + 4]);
        let err = decode(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let payload_start = 4 + 2 + 1 + 12 + 1;
        bytes[payload_start] ^= 0x01;
        let err = decode(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn dim_overflow_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.push(3);
        for d in [u32::MAX, u32::MAX, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&[0u8; 8]);
        let err = decode(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("overflow"));
    }

    #[test]
    fn crc_reference_vector() {
        // IEEE CRC-32 of "123456789"
        assert_eq!(crc32fast::hash(b"123456789"), 0xcbf4_3926);
    }
}
