//! Raw tensor dumps: four little-endian `u32` dimensions (n, c, h, w)
//! followed by the scalars in row-major order, little-endian.

use std::io::{Read, Write};

use super::{Scalar, Shape, Tensor4, TensorError};

pub fn write_dump<T: Scalar, W: Write>(t: &Tensor4<T>, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + std::mem::size_of_val(t.data()));
    for d in t.shape().dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)
}

pub fn read_dump<T: Scalar, R: Read>(mut input: R) -> Result<Tensor4<T>, TensorError> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| TensorError::Dump(e.to_string()))?;
    if bytes.len() < 16 {
        return Err(TensorError::Dump(format!(
            "header needs 16 bytes, found {}",
            bytes.len()
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let width = std::mem::size_of::<T>();
    let body = &bytes[16..];
    if body.len() != shape.numel() * width {
        return Err(TensorError::Dump(format!(
            "shape {shape} needs {} payload bytes, found {}",
            shape.numel() * width,
            body.len()
        )));
    }
    let data = body.chunks_exact(width).map(T::read_le).collect();
    Tensor4::from_vec(shape, data)
}
