//! MTNS v1 tensor file format.
//!
//! Layout: 8-byte magic `MTNS0001`, 1 dtype byte (0 = fp32, 1 = fp64),
//! 1 rank byte, rank x 8-byte little-endian unsigned extents, then the
//! raw little-endian row-major payload. Used by checkpoints and datasets.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dtype, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTNS0001";
const MAX_RANK: usize = 8;

/// Parsed MTNS header; readable without touching the payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtnsHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl MtnsHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn encode<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + t.shape().len() * 8 + t.numel() * E::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(E::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<(MtnsHeader, usize)> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "missing MTNS0001 magic"));
    }
    let dtype = Dtype::from_code(bytes[8])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(path, format!("unsupported rank {rank}")));
    }
    if bytes.len() < 10 + rank * 8 {
        return Err(Error::format(path, "truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let ext = u64::from_le_bytes(bytes[10 + i * 8..18 + i * 8].try_into().unwrap());
        shape.push(ext as usize);
    }
    Ok((MtnsHeader { dtype, shape }, 10 + rank * 8))
}

pub fn decode<E: Element>(bytes: &[u8], path: &Path) -> Result<Tensor<E>> {
    let (header, offset) = decode_header(bytes, path)?;
    if header.dtype != E::DTYPE {
        return Err(Error::format(
            path,
            format!("dtype is {} but {} was requested", header.dtype, E::DTYPE),
        ));
    }
    let numel = header.numel();
    let esize = E::DTYPE.size_bytes();
    let payload = &bytes[offset..];
    if payload.len() != numel * esize {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes but shape {:?} needs {}",
                payload.len(),
                header.shape,
                numel * esize
            ),
        ));
    }
    let data: Vec<E> = payload.chunks_exact(esize).map(E::read_le).collect();
    Tensor::new(header.shape, data)
}

/// Writes a tensor atomically (temp file + rename).
pub fn write_mtns<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("mtns.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode(t)).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_mtns<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the header (dtype and shape).
pub fn read_mtns_header(path: impl AsRef<Path>) -> Result<MtnsHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes, path).map(|(h, _)| h)
}
