//! Versioned checkpoint container: a JSON metadata record followed by named
//! tensor records (`name`, `rows`, `cols`, little-endian `f32` payload), each
//! record framed with its own CRC-32.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{frame_record, put_string, write_header, ByteReader, RecordReader};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLCHKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the checkpoint holds, e.g. `"autoencoder"`.
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, metadata: &impl Serialize) -> Result<Self> {
        let metadata = serde_json::to_value(metadata).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { kind: kind.to_string(), metadata, tensors: Vec::new() })
    }

    /// Append every parameter of `store` under `prefix`.
    pub fn add_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, value) in store.named() {
            self.tensors.push((format!("{prefix}{name}"), value.cast()));
        }
    }

    /// Fill `store` from the tensors stored under `prefix`; every parameter must be present.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let tensors: Vec<(String, Matrix<T>)> = self
            .tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.cast())))
            .collect();
        store.load_named(&tensors)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Incompatible(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn metadata_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.metadata.clone())
            .map_err(|e| Error::Format(format!("{} checkpoint metadata: {e}", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_header(&mut out, CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        let mut meta = Vec::new();
        put_string(&mut meta, &self.kind);
        let json = serde_json::to_string(&self.metadata).map_err(|e| Error::Format(e.to_string()))?;
        put_string(&mut meta, &json);
        meta.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        frame_record(&mut out, &meta);
        for (name, m) in &self.tensors {
            if let Some(row) = m.first_non_finite_row() {
                return Err(Error::Numerical(format!("tensor {name} has a non-finite value in row {row}")));
            }
            let mut p = Vec::with_capacity(name.len() + 12 + 4 * m.len());
            put_string(&mut p, name);
            p.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            p.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                p.extend_from_slice(&v.to_le_bytes());
            }
            frame_record(&mut out, &p);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rec = RecordReader::new(bytes, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let mut r = ByteReader::new(rec.next_record("checkpoint metadata")?, "checkpoint metadata");
        let kind = r.string()?;
        let metadata = serde_json::from_str(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u64()? as usize;
        r.finish()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut r = ByteReader::new(rec.next_record("checkpoint tensor")?, "checkpoint tensor");
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            r.finish()?;
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        rec.finish()?;
        Ok(Self { kind, metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f32 * 0.5));
        store.add("b", Matrix::row_vector(&[-1.0, 2.5]));
        let mut ck = Checkpoint::new("test", &serde_json::json!({"width": 3})).unwrap();
        ck.add_store("net.", &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a.weight", Matrix::zeros(3, 2));
        fresh.add("b", Matrix::zeros(1, 2));
        back.load_store("net.", &mut fresh).unwrap();
        assert_eq!(fresh.named().collect::<Vec<_>>(), store.named().collect::<Vec<_>>());
    }

    #[test]
    fn damaged_and_mismatched_files_are_rejected() {
        let ck = Checkpoint::new("test", &1u32).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(ck.expect_kind("other").is_err());
    }

    #[test]
    fn non_finite_weights_are_not_written() {
        let mut ck = Checkpoint::new("test", &0u8).unwrap();
        ck.tensors.push(("w".into(), Matrix::row_vector(&[f32::NAN])));
        assert!(matches!(ck.to_bytes(), Err(Error::Numerical(_))));
    }
}
