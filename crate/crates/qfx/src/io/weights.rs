//! Named-tensor weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "QFXW"
//! version u32      currently 1
//! count   u32      number of tensors
//! table   count entries:
//!     name_len u16, name bytes (utf-8)
//!     dtype    u8   (0 = f32)
//!     ndim     u8
//!     dims     ndim * u32
//!     offset   u64  byte offset of the payload from file start
//! payload  f32 little-endian values per tensor, contiguous
//! ```
//!
//! Payload values are 32-bit floats; saving narrows f64 tensors to f32 and
//! loading widens them back, so a loaded store round-trips bit-exactly.

use crate::error::{QfxError, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const WEIGHT_MAGIC: &[u8; 4] = b"QFXW";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered name -> tensor map; BTreeMap keeps serialization deterministic.
pub type WeightStore = BTreeMap<String, Tensor>;

/// Serialize a store. Tensors are written in name order.
pub fn save_weights(store: &WeightStore) -> Result<Vec<u8>> {
    let mut header: Vec<u8> = Vec::new();
    header.extend_from_slice(WEIGHT_MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(store.len() as u32).to_le_bytes());

    // Two passes: sizes first so offsets are known, then the table.
    let mut table_len = 0usize;
    for (name, t) in store {
        if name.len() > u16::MAX as usize {
            return Err(QfxError::WeightFile(format!("tensor name too long: {name:?}")));
        }
        if t.rank() > u8::MAX as usize {
            return Err(QfxError::WeightFile(format!("tensor rank too large: {name:?}")));
        }
        table_len += 2 + name.len() + 1 + 1 + 4 * t.rank() + 8;
    }
    let payload_start = header.len() + table_len;

    let mut table: Vec<u8> = Vec::with_capacity(table_len);
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in store {
        table.extend_from_slice(&(name.len() as u16).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.push(DTYPE_F32);
        table.push(t.rank() as u8);
        for &d in t.shape() {
            if d > u32::MAX as usize {
                return Err(QfxError::WeightFile(format!("dimension too large in {name:?}")));
            }
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let offset = (payload_start + payload.len()) as u64;
        table.extend_from_slice(&offset.to_le_bytes());
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let mut out = header;
    out.extend_from_slice(&table);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a weight file, validating magic, version, name uniqueness, and that
/// every payload slice is in bounds and non-overlapping.
pub fn load_weights(bytes: &[u8]) -> Result<WeightStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != WEIGHT_MAGIC {
        return Err(QfxError::WeightFile(format!(
            "bad magic {:02x?}, expected {WEIGHT_MAGIC:02x?}",
            magic
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(QfxError::WeightFile(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = cur.u32()? as usize;

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        byte_len: u64,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| QfxError::WeightFile("non-utf8 tensor name".into()))?;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(QfxError::WeightFile(format!(
                "unknown dtype code {dtype} for {name:?}"
            )));
        }
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let offset = cur.u64()?;
        let elems: usize = shape.iter().product();
        entries.push(Entry {
            name,
            shape,
            offset,
            byte_len: elems as u64 * 4,
        });
    }

    // Bounds and overlap checks over the declared payload slices.
    let file_len = bytes.len() as u64;
    let mut spans: Vec<(u64, u64, usize)> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.offset, e.offset + e.byte_len, i))
        .collect();
    spans.sort_unstable();
    for window in spans.windows(2) {
        let (_, end_a, ia) = window[0];
        let (start_b, _, ib) = window[1];
        if end_a > start_b {
            return Err(QfxError::WeightFile(format!(
                "overlapping payloads for {:?} and {:?}",
                entries[ia].name, entries[ib].name
            )));
        }
    }

    let mut store = WeightStore::new();
    for e in &entries {
        let end = e.offset.checked_add(e.byte_len).ok_or_else(|| {
            QfxError::WeightFile(format!("offset overflow for {:?}", e.name))
        })?;
        if end > file_len {
            return Err(QfxError::WeightFile(format!(
                "payload for {:?} ends at {end}, beyond file length {file_len}"
            , e.name)));
        }
        let raw = &bytes[e.offset as usize..end as usize];
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::from_vec(&e.shape, data)?;
        if store.insert(e.name.clone(), tensor).is_some() {
            return Err(QfxError::WeightFile(format!("duplicate tensor name {:?}", e.name)));
        }
    }
    Ok(store)
}

/// Hex SHA-256 of the store's serialized bytes; used for PTQ provenance.
pub fn store_hash(store: &WeightStore) -> Result<String> {
    let bytes = save_weights(store)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(QfxError::WeightFile(format!(
                "truncated file: wanted {n} bytes at {}, have {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Random store whose values are exactly f32-representable.
    fn random_store(seed: u64) -> WeightStore {
        let mut rng = Rng::new(seed);
        let mut store = WeightStore::new();
        for (name, shape) in [
            ("block1.conv1.weight", vec![4usize, 1, 3, 3]),
            ("block1.bn1.gamma", vec![4]),
            ("head.bias", vec![7]),
        ] {
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| (rng.next_normal() as f32) as f64)
                .collect();
            store.insert(name.into(), Tensor::from_vec(&shape, data).unwrap());
        }
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = random_store(1);
        let bytes = save_weights(&store).unwrap();
        let loaded = load_weights(&bytes).unwrap();
        assert_eq!(store.len(), loaded.len());
        for (name, t) in &store {
            let l = &loaded[name];
            assert_eq!(t.shape(), l.shape());
            assert_eq!(t.data(), l.data(), "tensor {name} changed in round trip");
        }
        // Serialization itself is deterministic.
        assert_eq!(bytes, save_weights(&loaded).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = save_weights(&random_store(2)).unwrap();
        bytes[0] = b'X';
        let err = load_weights(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn out_of_bounds_offset_is_rejected() {
        let store = random_store(3);
        let bytes = save_weights(&store).unwrap();
        // Truncate the payload so the last tensor runs past the end.
        let truncated = &bytes[..bytes.len() - 5];
        let err = load_weights(truncated).unwrap_err();
        assert!(err.to_string().contains("beyond file length"), "{err}");
    }

    #[test]
    fn truncated_header_is_rejected() {
        let bytes = save_weights(&random_store(4)).unwrap();
        let err = load_weights(&bytes[..9]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = save_weights(&random_store(5)).unwrap();
        bytes[4] = 99;
        assert!(load_weights(&bytes).is_err());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = store_hash(&random_store(6)).unwrap();
        let b = store_hash(&random_store(6)).unwrap();
        let c = store_hash(&random_store(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }
}
