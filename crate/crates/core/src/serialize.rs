//! Binary tensor and checkpoint files.
//!
//! Tensor record: `"IMXT"`, u8 version (1), u8 dtype (0 = f32, 1 = f64),
//! u8 rank, `rank` little-endian u64 dims, then the row-major little-endian
//! payload. A checkpoint is a little-endian u32 count followed by
//! `(u16 name length, UTF-8 name, tensor record)` entries in parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"IMXT";
pub const TENSOR_VERSION: u8 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit in a u8", t.rank())));
    }
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(buf)
}

/// Reads one tensor record, converting the stored element type to `T`.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let magic = read_exact::<4, _>(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let [version, dtype, rank] = read_exact::<3, _>(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_code(dtype).ok_or_else(|| Error::Format(format!("unknown dtype code {dtype}")))?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact::<8, _>(r)?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut payload = vec![0u8; n * dtype.size()];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn write_checkpoint<T: Scalar, W: Write>(w: &mut W, params: &ModelParams<T>) -> Result<()> {
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: &mut R) -> Result<ModelParams<T>> {
    let count = u32::from_le_bytes(read_exact::<4, _>(r)?);
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact::<2, _>(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("name is not UTF-8: {e}")))?;
        params.insert(name, read_tensor(r)?);
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
