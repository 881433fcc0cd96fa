//! Tensor serialization: a length-prefixed JSON header describing dtype and
//! shape, followed by the flat little-endian IEEE-754 buffer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Dtype, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

pub(crate) fn encode_values<T: Real>(values: &[T], out: &mut Vec<u8>) {
    out.reserve(values.len() * T::DTYPE.size_of());
    for &v in values {
        v.write_le(out);
    }
}

/// Decode a buffer stored as `dtype` into `T`, converting precision if needed.
pub(crate) fn decode_values<T: Real>(dtype: Dtype, bytes: &[u8]) -> Vec<T> {
    match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    }
}

pub fn write_tensor<T: Real, W: Write>(tensor: &Tensor<T>, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&TensorHeader { dtype: T::DTYPE, shape: tensor.shape().to_vec() })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::new();
    encode_values(tensor.data(), &mut buf);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Real, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible tensor header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: TensorHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("bad tensor header: {e}")))?;
    let numel: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; numel * header.dtype.size_of()];
    r.read_exact(&mut bytes)?;
    Tensor::new(&header.shape, decode_values(header.dtype, &bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 2], |i| (i as f32 * 0.731).sin() * 1e-3);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let back: Tensor<f32> = read_tensor(buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_buffer_is_an_error() {
        let t = Tensor::<f64>::ones(&[4]);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor::<f64, _>(buf.as_slice()).is_err());
    }
}
