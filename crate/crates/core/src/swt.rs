//! SWT1 tensor container.
//!
//! Layout: 8-byte magic "SWTENS1\0", four little-endian u32 dims (N, C, H, W),
//! one dtype tag byte (0 = f32, 1 = f64), then raw little-endian values in
//! row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SWTENS1\0";

pub fn encode<S: Scalar>(tensor: &Tensor<S>) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(8 + 16 + 1 + tensor.numel() * S::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    for dim in [shape.n, shape.c, shape.h, shape.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(S::DTYPE as u8);
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decode a tensor, converting dtype if the stored tag differs from `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(Tensor<S>, usize)> {
    if bytes.len() < 25 {
        return Err(Error::Format("SWT1 record truncated before header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad SWT1 magic".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    shape
        .validate()
        .map_err(|e| Error::Format(format!("SWT1 header: {e}")))?;
    let dtype = Dtype::from_tag(bytes[24])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[24])))?;
    let width = dtype.size_bytes();
    let need = 25 + shape.numel() * width;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "SWT1 record truncated: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let payload = &bytes[25..need];
    let data: Vec<S> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::read_le(c) as f64))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::read_le(c)))
            .collect(),
    };
    Ok((Tensor::from_vec(shape, data)?, need))
}

pub fn write_file<S: Scalar>(tensor: &Tensor<S>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(tensor))?;
    Ok(())
}

pub fn read_file<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes after SWT1 record in {}",
            path.display()
        )));
    }
    Ok(t)
}
