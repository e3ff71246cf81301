//! `TFM1` binary tensor files.
//!
//! Layout, all integers little-endian:
//! magic `TFM1`, u32 tensor count, then per tensor a u16 name length, the
//! UTF-8 name, a u8 rank, one u64 per dim and the f64 payload in row-major
//! order. Tensors here are matrices, so rank 2 is written; rank 1 and rank 0
//! are read back as a single row.

use std::fs;
use std::io;
use std::path::Path;

use crate::neural::{ParamStore, Tensor2D};

pub const MAGIC: &[u8; 4] = b"TFM1";

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a TFM1 file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor name longer than {} bytes", u16::MAX)]
    NameTooLong,
    #[error("tensor `{name}` has unsupported rank {rank}")]
    Rank { name: String, rank: u8 },
    #[error("tensor `{0}` dims overflow")]
    DimOverflow(String),
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("tensor `{0}` not found")]
    Missing(String),
}

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor2D)>;

pub fn encode(tensors: &[(String, Tensor2D)]) -> Result<Vec<u8>, TensorIoError> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 2 + n.len() + 1 + 16 + 8 * t.data().len())
        .sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(tensors.len()).expect("tensor count fits u32");
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| TensorIoError::NameTooLong)?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorIoError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(TensorIoError::Truncated(self.pos))?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(TensorIoError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TensorIoError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors, TensorIoError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut out: NamedTensors = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TensorIoError::BadName)?
            .to_string();
        let rank = r.array::<1>()?[0];
        if rank > 2 {
            return Err(TensorIoError::Rank { name, rank });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            dims.push(usize::try_from(d).map_err(|_| TensorIoError::DimOverflow(name.clone()))?);
        }
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => unreachable!("rank checked"),
        };
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| TensorIoError::DimOverflow(name.clone()))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if out.iter().any(|(existing, _)| *existing == name) {
            return Err(TensorIoError::Duplicate(name));
        }
        let t = Tensor2D::from_vec(rows, cols, data).expect("length matches dims");
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(TensorIoError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[(String, Tensor2D)]) -> Result<(), TensorIoError> {
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|source| TensorIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<NamedTensors, TensorIoError> {
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Looks up one tensor by name.
pub fn find<'a>(
    tensors: &'a [(String, Tensor2D)],
    name: &str,
) -> Result<&'a Tensor2D, TensorIoError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| TensorIoError::Missing(name.to_string()))
}

/// Parameter values of `store` in name order.
pub fn store_tensors(store: &ParamStore) -> NamedTensors {
    store
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect()
}

/// Builds a store holding `tensors` as parameters. Modules registered on it
/// afterwards keep these values and initialize only what is missing.
pub fn store_from_tensors(seed: u64, tensors: NamedTensors) -> ParamStore {
    let mut store = ParamStore::new(seed);
    for (n, t) in tensors {
        store.insert(&n, t);
    }
    store
}
