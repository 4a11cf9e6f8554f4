//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCNV"            4 bytes magic
//! version           u32 (currently 1)
//! count             u64 number of records
//! record*:
//!   name_len        u32
//!   name            name_len bytes of UTF-8
//!   rank            u32
//!   dims            rank × u64
//!   payload         product(dims) × f64
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCNV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("parameter name is not valid UTF-8")]
    Utf8,
    #[error("invalid tensor payload for `{0}`")]
    Payload(String),
    #[error("trailing bytes after last record")]
    Trailing,
    #[error("checkpoint has {found} parameters, model expects {expected}")]
    Count { expected: usize, found: usize },
    #[error("parameter `{name}` missing from checkpoint")]
    Missing { name: String },
    #[error("parameter `{name}`: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
        for d in r.tensor.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u64()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name: String = core::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Utf8)?
            .into();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| CheckpointError::Payload(name.clone()))?;
        records.push(Record { name, tensor });
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Trailing);
    }
    Ok(records)
}

/// Serializes every entry of a store, in insertion order.
pub fn save_store(store: &ParamStore) -> Vec<u8> {
    let records: Vec<Record> = store
        .entries()
        .iter()
        .map(|e| Record {
            name: e.name.clone(),
            tensor: e.value.clone(),
        })
        .collect();
    encode(&records)
}

/// Overwrites the values of `store` from checkpoint bytes, matching by name and shape.
pub fn load_into_store(store: &mut ParamStore, bytes: &[u8]) -> Result<(), CheckpointError> {
    let records = decode(bytes)?;
    if records.len() != store.len() {
        return Err(CheckpointError::Count {
            expected: store.len(),
            found: records.len(),
        });
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let rec = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
        if rec.tensor.shape() != store.get(id).shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: store.get(id).shape().to_vec(),
                found: rec.tensor.shape().to_vec(),
            });
        }
        *store.get_mut(id) = rec.tensor.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("agent.a", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap(), true);
        s.add("agent.b", Tensor::scalar(4.0), false);
        s
    }

    #[test]
    fn header_layout() {
        let bytes = save_store(&sample());
        assert_eq!(&bytes[..4], b"DCNV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 7);
        assert_eq!(&bytes[20..27], b"agent.a");
        // name, rank, dims, payload of the first record; then the scalar record
        let first = 4 + 7 + 4 + 16 + 48;
        let second = 4 + 7 + 4 + 8;
        assert_eq!(bytes.len(), 16 + first + second);
    }

    #[test]
    fn load_restores_values() {
        let src = sample();
        let bytes = save_store(&src);
        let mut dst = sample();
        dst.get_mut(dst.find("agent.a").unwrap()).data_mut().fill(0.0);
        load_into_store(&mut dst, &bytes).unwrap();
        assert_eq!(src, dst);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = save_store(&sample());
        assert_eq!(decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(CheckpointError::BadMagic));
        let mut extra = bytes;
        extra.push(0);
        assert_eq!(decode(&extra), Err(CheckpointError::Trailing));
    }

    #[test]
    fn reports_shape_mismatch() {
        let bytes = save_store(&sample());
        let mut other = ParamStore::new();
        other.add("agent.a", Tensor::zeros(&[3, 2]), true);
        other.add("agent.b", Tensor::scalar(0.0), false);
        match load_into_store(&mut other, &bytes) {
            Err(CheckpointError::Shape { expected, found, .. }) => {
                assert_eq!(expected, vec![3, 2]);
                assert_eq!(found, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
