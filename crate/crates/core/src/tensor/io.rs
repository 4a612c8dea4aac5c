//! Binary tensor records.
//!
//! One record, all integers little-endian:
//!
//! ```text
//! u32        name length in bytes
//! [u8]       name, UTF-8
//! u8         dtype tag (0 = f32, 1 = f64)
//! u32        rank
//! [u64]      extents, `rank` entries
//! [f32|f64]  payload, product(extents) elements, row-major
//! ```
//!
//! Records are concatenated with no padding. A reader converts the payload
//! to its own element type when the tags differ.

use std::io::{self, Read, Write};

use super::Tensor;
use crate::scalar::{DType, Scalar};

/// Magic prefix for files that hold a sequence of tensor records.
pub const TENSOR_MAGIC: &[u8; 8] = b"SRPTTNSR";

const MAX_RANK: u32 = 16;
const MAX_NAME: u32 = 4096;

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, name: &str, tensor: &Tensor<T>) -> io::Result<()> {
    let mut buf = Vec::with_capacity(32 + name.len() + tensor.numel() * T::DTYPE.size());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE as u8);
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(&mut buf);
    }
    w.write_all(&buf)
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> io::Result<(String, Tensor<T>)> {
    let name_len = read_u32(r)?;
    if name_len > MAX_NAME {
        return Err(bad(format!("tensor name length {name_len} out of range")));
    }
    let mut name = vec![0u8; name_len as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0]).ok_or_else(|| bad(format!("unknown dtype tag {}", tag[0])))?;
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(bad(format!("tensor `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("extent overflow"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflow"))?;
    let mut payload = vec![0u8; count * dtype.size()];
    r.read_exact(&mut payload)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    let tensor = Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?;
    Ok((name, tensor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, "w", &t).unwrap();
        let mut expected = vec![1, 0, 0, 0, b'w', 0, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0];
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn f64_record_loads_as_f32() {
        let t = Tensor::<f64>::new(&[1, 2], vec![0.5, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, "x", &t).unwrap();
        let (name, back) = read_tensor::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "x");
        assert_eq!(back.shape(), &[1, 2]);
        assert_eq!(back.data(), &[0.5f32, 0.25]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::<f32>::zeros(&[4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "z", &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn bad_dtype_tag_is_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "z", &t).unwrap();
        buf[5] = 9;
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }
}
