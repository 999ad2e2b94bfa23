//! Flat binary tensor format used by checkpoints.
//!
//! Layout: magic `Q2LT`, version u32, rank u32, extents u32[rank], then the
//! elements as little-endian scalars. All header integers are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Scalar, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"Q2LT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SerialError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("extent {0} does not fit the platform")]
    ExtentOverflow(u32),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
}

/// Writes one tensor. Gradient state is not serialized.
pub fn write_tensor<S: Scalar>(w: &mut impl Write, t: &Tensor<S>) -> Result<(), SerialError> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * S::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, SerialError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor, leaving the reader positioned after its payload.
/// The result is a plain leaf (`requires_grad = false`).
pub fn read_tensor<S: Scalar>(r: &mut impl Read) -> Result<Tensor<S>, SerialError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(SerialError::BadMagic {
            found: magic,
            expected: TENSOR_MAGIC,
        });
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(SerialError::UnsupportedVersion(version));
    }
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let e = read_u32(r)?;
        let extent = usize::try_from(e).map_err(|_| SerialError::ExtentOverflow(e))?;
        numel = numel
            .checked_mul(extent)
            .ok_or(SerialError::ExtentOverflow(e))?;
        shape.push(extent);
    }
    let mut payload = vec![0u8; numel * S::BYTES];
    r.read_exact(&mut payload)?;
    let data: Vec<S> = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    Ok(Tensor::from_vec(&shape, data).expect("shape/data built consistently"))
}

pub fn write_tensor_file<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<(), SerialError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a tensor from a standalone file, rejecting trailing bytes.
pub fn read_tensor_file<S: Scalar>(path: &Path) -> Result<Tensor<S>, SerialError> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(t),
        _ => {
            let rest = io::copy(&mut r, &mut io::sink())?;
            Err(SerialError::TrailingBytes(rest + 1))
        }
    }
}
