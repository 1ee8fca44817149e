//! Binary feature-file format.
//!
//! Layout: magic "AVTN", u32 rank, u32 dims[rank], then row-major 32-bit
//! little-endian floats. In-memory tensors are f64; files narrow to f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AVTN";

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + tensor.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let fail = |detail: &str| Error::FeatureFile {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 8 {
        return Err(fail("file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(fail("implausible rank"));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + numel * 4 {
        return Err(fail(&format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            shape,
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = header + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::new(shape, data)
}
