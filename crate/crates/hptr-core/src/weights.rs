//! Named parameter tensors and their on-disk format.
//!
//! A weight file is a one-line ASCII magic header, a JSON manifest listing
//! `(name, shape, element count, byte offset)` per tensor, then a contiguous
//! little-endian `f32` payload. Offsets are relative to the payload start;
//! the loader validates the total length before accepting anything.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "HPTRW1";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    elements: usize,
    offset: usize,
}

/// All learnable tensors of a model, keyed by a canonical
/// `stage.layer.tensor` name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore<S: Scalar> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> WeightStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, WeightsError> {
        self.tensors
            .get(name)
            .ok_or_else(|| WeightsError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, WeightsError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| WeightsError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Cast every tensor into another precision.
    pub fn cast<T: Scalar>(&self) -> WeightStore<T> {
        let mut out = WeightStore::new();
        for (name, t) in self.iter() {
            let data: Vec<T> = t.data().iter().map(|&v| T::from_f64(v.as_f64())).collect();
            out.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightsError> {
        let mut file = std::fs::File::create(path)?;
        self.write_to(&mut file)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), WeightsError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                elements: t.numel(),
                offset,
            });
            offset += t.numel() * 4;
        }
        let manifest = serde_json::to_string(&entries)?;
        writeln!(w, "{MAGIC} {}", manifest.len())?;
        w.write_all(manifest.as_bytes())?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WeightsError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, WeightsError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| WeightsError::Corrupt("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| WeightsError::Corrupt("non-utf8 header".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(WeightsError::Corrupt(format!("bad magic in {header:?}")));
        }
        let manifest_len: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| WeightsError::Corrupt("bad manifest length".into()))?;
        let manifest_start = nl + 1;
        let payload_start = manifest_start + manifest_len;
        if bytes.len() < payload_start {
            return Err(WeightsError::Corrupt("truncated manifest".into()));
        }
        let entries: Vec<ManifestEntry> =
            serde_json::from_slice(&bytes[manifest_start..payload_start])?;
        let payload = &bytes[payload_start..];
        let expected: usize = entries.iter().map(|e| e.elements * 4).sum();
        if payload.len() != expected {
            return Err(WeightsError::Corrupt(format!(
                "payload length {} does not match manifest total {expected}",
                payload.len()
            )));
        }
        let mut store = Self::new();
        for e in entries {
            if e.shape.iter().product::<usize>() != e.elements {
                return Err(WeightsError::Corrupt(format!(
                    "entry {:?}: shape {:?} does not cover {} elements",
                    e.name, e.shape, e.elements
                )));
            }
            let end = e.offset + e.elements * 4;
            if end > payload.len() {
                return Err(WeightsError::Corrupt(format!(
                    "entry {:?} overruns payload",
                    e.name
                )));
            }
            let data: Vec<S> = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.insert(e.name, Tensor::new(e.shape, data).unwrap());
        }
        Ok(store)
    }
}

/// Xavier-uniform fill: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// optionally widened by `gain`.
pub fn xavier_uniform<S: Scalar, R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<S> {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * a))
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> WeightStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut s = WeightStore::new();
        s.insert("a.w", xavier_uniform(vec![3, 4], 3, 4, 1.0, &mut rng));
        s.insert("a.b", Tensor::from_vec(vec![0.5f32, -1.25, 3.0]));
        s.insert("z.emb", xavier_uniform(vec![2, 2, 2], 2, 2, 5.0, &mut rng));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let loaded = WeightStore::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(store, loaded);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let store = sample_store();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match WeightStore::<f32>::read_from(&mut buf.as_slice()) {
            Err(WeightsError::Corrupt(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = b"NOPE 2\n[]".to_vec();
        buf.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            WeightStore::<f32>::read_from(&mut buf.as_slice()),
            Err(WeightsError::Corrupt(_))
        ));
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let store = sample_store();
        match store.get("does.not.exist") {
            Err(WeightsError::Missing(name)) => assert_eq!(name, "does.not.exist"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cast_preserves_f32_representable_values() {
        let store = sample_store();
        let as_f64: WeightStore<f64> = store.cast();
        let back: WeightStore<f32> = as_f64.cast();
        assert_eq!(store, back);
    }
}
