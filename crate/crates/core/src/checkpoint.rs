//! On-disk training state: a directory holding `header.json` and a raw
//! little-endian array blob `params.bin` described by the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT_VERSION: u32 = 1;

/// Location of one named array inside the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string, since the position is a `u128`.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInfo {
    pub name: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header<C> {
    pub format: u32,
    pub config: C,
    pub config_hash: String,
    pub prompts: PromptInfo,
    pub tau: u64,
    pub epoch: usize,
    pub rng: RngState,
    /// Per-parameter optimizer step counts, in parameter order.
    pub optimizer_steps: Vec<u64>,
    pub arrays: Vec<ArrayEntry>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported array dtype {other:?}"))),
    }
}

/// Serializes tensors back to back, returning the blob and its manifest.
pub fn pack(arrays: &[(String, &Tensor)]) -> Result<(Vec<u8>, Vec<ArrayEntry>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        let dtype = dtype_name(t.dtype())?;
        let offset = blob.len() as u64;
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
        }
        entries.push(ArrayEntry {
            name: name.clone(),
            dtype: dtype.to_string(),
            shape: t.dims().to_vec(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    Ok((blob, entries))
}

/// Reads one array described by `entry` out of `blob`.
pub fn unpack(blob: &[u8], entry: &ArrayEntry) -> Result<Tensor> {
    let start = entry.offset as usize;
    let end = start + entry.bytes as usize;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("array `{}` runs past the end of the blob", entry.name)))?;
    let n: usize = entry.shape.iter().product();
    let t = match entry.dtype.as_str() {
        "f32" if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        "f64" if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "array `{}`: {} bytes do not hold {n} values of {other}",
                entry.name,
                bytes.len()
            )))
        }
    };
    Ok(t)
}

/// Writes the blob first and the header last, so a directory with a header
/// always has a complete blob.
pub fn write<C: Serialize>(dir: impl AsRef<Path>, header: &Header<C>, blob: &[u8]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(HEADER_FILE));
    fs::File::create(dir.join(BLOB_FILE))?.write_all(blob)?;
    fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(header)?)?;
    Ok(())
}

pub fn read<C: for<'de> Deserialize<'de>>(dir: impl AsRef<Path>) -> Result<(Header<C>, Vec<u8>)> {
    let dir = dir.as_ref();
    let header_path = dir.join(HEADER_FILE);
    if !header_path.exists() {
        return Err(Error::MissingFile(header_path));
    }
    let header: Header<C> = serde_json::from_str(&fs::read_to_string(&header_path)?)?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    Ok((header, blob))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_round_trips_both_dtypes() {
        let a = Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[std::f64::consts::PI, -1e-300], &Device::Cpu).unwrap();
        let (blob, entries) = pack(&[("a".into(), &a), ("b".into(), &b)]).unwrap();
        assert_eq!(blob.len(), 16 + 16);
        assert_eq!(entries[1].offset, 16);
        let a2 = unpack(&blob, &entries[0]).unwrap();
        let b2 = unpack(&blob, &entries[1]).unwrap();
        assert_eq!(a2.to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
        assert_eq!(b2.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let a = Tensor::new(&[1f32, 2.0, 3.0], &Device::Cpu).unwrap();
        let (blob, entries) = pack(&[("a".into(), &a)]).unwrap();
        assert!(matches!(unpack(&blob[..8], &entries[0]), Err(Error::Checkpoint(_))));
    }
}
