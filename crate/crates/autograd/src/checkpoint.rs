//! Self-describing checkpoint files.
//!
//! Layout: the 8-byte magic `F2RCKPT1`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor as raw little-endian `f64` in header
//! order (row-major). Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Mat;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"F2RCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint truncated: expected {expected} tensor bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write<W: Write>(mut w: W, meta: &serde_json::Value, store: &ParamStore) -> Result<(), CheckpointError> {
    let header = Header {
        meta: meta.clone(),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in store.iter() {
        for &x in t.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    let mut data = Vec::with_capacity(expected);
    r.read_to_end(&mut data)?;
    if data.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: data.len(),
        });
    }
    let mut store = ParamStore::new();
    let mut chunks = data.chunks_exact(8);
    for t in header.tensors {
        let values: Vec<f64> = chunks
            .by_ref()
            .take(t.rows * t.cols)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        store.add(t.name, m);
    }
    Ok((header.meta, store))
}

pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<(), CheckpointError> {
    write(BufWriter::new(File::create(path)?), meta, store)
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("a", array![[1.0, -0.0, f64::MIN_POSITIVE], [1e-300, 3.5, -7.25]]);
        store.add("b", array![[0.1 + 0.2]]);
        let meta = serde_json::json!({"kind": "test"});
        let mut buf = Vec::new();
        write(&mut buf, &meta, &store).unwrap();
        let (meta2, store2) = read(buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        for ((n1, t1), (n2, t2)) in store.iter().zip(store2.iter()) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = t1.iter().map(|x| x.to_bits()).collect();
            let bits2: Vec<u64> = t2.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read(&b"not a checkpoint"[..]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn detects_truncation() {
        let mut store = ParamStore::new();
        store.add("a", array![[1.0, 2.0]]);
        let mut buf = Vec::new();
        write(&mut buf, &serde_json::Value::Null, &store).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read(buf.as_slice()), Err(CheckpointError::Truncated { .. })));
    }
}
