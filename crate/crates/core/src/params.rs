//! Named trainable tensors and the checkpoint file format.
//!
//! A checkpoint is:
//!
//! ```text
//! magic   "DCGACKPT"            8 bytes
//! version u32 LE                currently 1
//! dtype   u32 LE                4 = f32, 8 = f64
//! meta    u32 LE length + UTF-8 free-form key=value text (run configuration)
//! count   u32 LE                number of parameter records
//! record  u32 LE name length, UTF-8 name, 4 × u32 LE dims, raw LE scalars
//! ```
//!
//! Records appear in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{DType, Scalar, Shape, Tensor4};

const MAGIC: &[u8; 8] = b"DCGACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
}

/// Ordered collection of named parameters. Ids are positions in
/// declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores {found:?} scalars, expected {expected:?}")]
    DType { found: Option<DType>, expected: DType },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("checkpoint parameter {index} is {found:?}, expected {expected:?}")]
    Mismatch {
        index: usize,
        found: String,
        expected: String,
    },
    #[error("checkpoint holds {found} parameters, model declares {expected}")]
    Count { found: usize, expected: usize },
    #[error("invalid checkpoint text: {0}")]
    Utf8(#[from] std::string::FromUtf8Error),
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count over every parameter.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, meta: &str, mut out: W) -> std::io::Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            for d in p.value.shape().dims() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
        }
        out.write_all(&buf)
    }

    pub fn save(&self, meta: &str, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(meta, std::io::BufWriter::new(file))
    }

    /// Parse a checkpoint, returning its metadata text and parameters.
    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(String, Self), CheckpointError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let found = DType::from_tag(cur.u32()?);
        if found != Some(T::DTYPE) {
            return Err(CheckpointError::DType {
                found,
                expected: T::DTYPE,
            });
        }
        let meta_len = cur.u32()? as usize;
        let meta = String::from_utf8(cur.take(meta_len)?.to_vec())?;
        let count = cur.u32()? as usize;
        let width = std::mem::size_of::<T>();
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())?;
            let dims = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?].map(|d| d as usize);
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let at = cur.pos;
            let raw = cur.take(shape.numel() * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let value = Tensor4::from_vec(shape, data).map_err(|_| CheckpointError::Truncated(at))?;
            store.params.push(Param { name, value });
        }
        Ok((meta, store))
    }

    pub fn load(path: &Path) -> Result<(String, Self), CheckpointError> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Overwrite values from `other`, which must declare the same names and
    /// shapes in the same order.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<(), CheckpointError> {
        if other.len() != self.len() {
            return Err(CheckpointError::Count {
                found: other.len(),
                expected: self.len(),
            });
        }
        for (i, (mine, theirs)) in self.params.iter().zip(&other.params).enumerate() {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(CheckpointError::Mismatch {
                    index: i,
                    found: format!("{} {}", theirs.name, theirs.value.shape()),
                    expected: format!("{} {}", mine.name, mine.value.shape()),
                });
            }
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor4::from_fn(Shape::new(2, 1, 3, 3), |n, _, y, x| {
            (n as f32 + 0.1) * (y as f32 - x as f32) / 7.0
        }));
        s.add("a.bias", Tensor4::full(Shape::new(2, 1, 1, 1), -0.25));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let s = store();
        let mut bytes = Vec::new();
        s.write_checkpoint("channels=4,8\n", &mut bytes).unwrap();
        let (meta, back) = ParamStore::<f32>::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(meta, "channels=4,8\n");
        assert_eq!(back, s);
        for (a, b) in back.iter().zip(s.iter()) {
            let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.1.value), bits(&b.1.value));
        }
    }

    #[test]
    fn checkpoint_errors() {
        let s = store();
        let mut bytes = Vec::new();
        s.write_checkpoint("", &mut bytes).unwrap();
        assert!(matches!(
            ParamStore::<f64>::read_checkpoint(&bytes[..]),
            Err(CheckpointError::DType { .. })
        ));
        assert!(matches!(
            ParamStore::<f32>::read_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::<f32>::read_checkpoint(&bad[..]),
            Err(CheckpointError::Magic)
        ));
    }

    #[test]
    fn assign_checks_layout() {
        let mut s = store();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor4::zeros(Shape::new(2, 1, 3, 3)));
        other.add("a.bias", Tensor4::zeros(Shape::new(3, 1, 1, 1)));
        assert!(matches!(s.assign_from(&other), Err(CheckpointError::Mismatch { index: 1, .. })));
        let zeros = store().cast::<f32>();
        s.assign_from(&zeros).unwrap();
        assert_eq!(s.numel(), 20);
    }
}
