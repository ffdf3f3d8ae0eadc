//! Named tensor maps and the binary archive they serialize to.
//!
//! Archive layout (little-endian throughout):
//! - bytes 0..8: u64 header length `L`
//! - bytes 8..8+L: UTF-8 JSON object mapping tensor name to
//!   `{"dtype":"F32","shape":[...],"data_offsets":[begin,end]}`, offsets
//!   relative to the first byte after the header
//! - remainder: raw f32 payload
//!
//! Offset ranges must stay inside the payload and must not overlap. Only
//! the F32 dtype is accepted. A `__metadata__` key, if present, is ignored
//! on read so headers written by common converters still load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All model weights, keyed by canonical name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serialize to archive bytes. Tensors are laid out in name order with
    /// contiguous ascending offsets, so the same map always produces the
    /// same bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header: BTreeMap<&str, HeaderRecord> = BTreeMap::new();
        let mut offset = 0u64;
        for (name, tensor) in &self.entries {
            let bytes = (tensor.len() * 4) as u64;
            header.insert(
                name,
                HeaderRecord {
                    dtype: "F32".to_string(),
                    shape: tensor.shape().to_vec(),
                    data_offsets: [offset, offset + bytes],
                },
            );
            offset += bytes;
        }
        let header_json = serde_json::to_vec(&header).expect("header serialization");
        let mut out = Vec::with_capacity(8 + header_json.len() + offset as usize);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for tensor in self.entries.values() {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("archive shorter than length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .ok_or_else(|| Error::Format("header length overflows".into()))?;
        if payload_start > bytes.len() {
            return Err(Error::Format(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..payload_start])
                .map_err(|e| Error::Format(format!("malformed header JSON: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut entries = BTreeMap::new();
        let mut ranges: Vec<(u64, u64, String)> = Vec::new();
        for (name, value) in header {
            if name == "__metadata__" {
                continue;
            }
            let record: HeaderRecord = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("bad record for {name:?}: {e}")))?;
            if record.dtype != "F32" {
                return Err(Error::Format(format!(
                    "tensor {name:?} has dtype {:?}, only F32 is supported",
                    record.dtype
                )));
            }
            let [begin, end] = record.data_offsets;
            if end < begin || end > payload.len() as u64 {
                return Err(Error::Format(format!(
                    "tensor {name:?} offsets [{begin},{end}] exceed payload length {}",
                    payload.len()
                )));
            }
            let expect_bytes = record.shape.iter().product::<usize>() as u64 * 4;
            if end - begin != expect_bytes {
                return Err(Error::Format(format!(
                    "size mismatch for {name:?}: shape {:?} wants {expect_bytes} bytes, \
                     offsets give {}",
                    record.shape,
                    end - begin
                )));
            }
            let raw = &payload[begin as usize..end as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(record.shape, data)
                .map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            ranges.push((begin, end, name.clone()));
            entries.insert(name, tensor);
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Format(format!(
                    "tensors {:?} and {:?} overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(NamedTensorMap { entries })
    }
}

pub fn write_archive(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, map.to_bytes())?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    let bytes = fs::read(&path)?;
    NamedTensorMap::from_bytes(&bytes)
}
