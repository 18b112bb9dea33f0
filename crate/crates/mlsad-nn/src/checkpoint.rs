//! Self-describing binary tensor container.
//!
//! Layout: 8-byte magic, u64 little-endian header length, JSON header, then
//! raw little-endian f64 payload. The header carries arbitrary caller
//! metadata plus name/shape/offset for every tensor, so files are readable
//! without knowing the producing architecture. f64 bytes round-trip exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::{NnError, Result};

const MAGIC: &[u8; 8] = b"MLSADBIN";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() as u64;
    }
    let header = Header {
        meta: meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| NnError::Format(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for (_, t) in tensors {
        let owned;
        let slice = match t.as_slice() {
            Some(s) => s,
            None => {
                owned = t.as_standard_layout().to_owned();
                owned.as_slice().unwrap()
            }
        };
        for &v in slice {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, HashMap<String, ArrayD<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let hlen = r.read_u64::<LittleEndian>()? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| NnError::Format(format!("header decode: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(NnError::Format("payload not a multiple of 8 bytes".into()));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = HashMap::new();
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start + len > floats.len() {
            return Err(NnError::Format(format!("tensor {} out of bounds", e.name)));
        }
        let arr = ArrayD::from_shape_vec(e.shape.clone(), floats[start..start + len].to_vec())
            .map_err(|e2| NnError::Format(format!("tensor {}: {e2}", e.name)))?;
        out.insert(e.name, arr);
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = ArrayD::from_shape_vec(
            vec![2, 3],
            vec![1.0, -0.5, 1e-300, f64::MIN_POSITIVE, 3.15, -0.0],
        )
        .unwrap();
        let b = ArrayD::from_shape_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let meta = serde_json::json!({"kind": "test", "level": 4});
        save(
            &path,
            &meta,
            &[("a".to_string(), a.clone()), ("b".to_string(), b.clone())],
        )
        .unwrap();
        let (m2, tensors) = load(&path).unwrap();
        assert_eq!(m2["kind"], "test");
        assert_eq!(m2["level"], 4);
        let a2 = &tensors["a"];
        assert_eq!(a2.shape(), a.shape());
        for (x, y) in a.iter().zip(a2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(tensors["b"], b);
    }
}
