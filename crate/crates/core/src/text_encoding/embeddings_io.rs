//! Embedding export file: a metadata record (`u32` width, `u64` count) then one
//! record per prompt (`prompt`, `u32 k`, `u32 E`, `k x E` little-endian `f32`).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{frame_record, put_string, write_header, ByteReader, RecordReader};
use crate::tensor::Matrix;

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"MLEMBED\0";
pub const EMBEDDINGS_VERSION: u32 = 1;

pub fn encode_embeddings(width: usize, entries: &[(String, Matrix<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_header(&mut out, EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION);
    let mut meta = Vec::new();
    meta.extend_from_slice(&(width as u32).to_le_bytes());
    meta.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    frame_record(&mut out, &meta);
    for (prompt, m) in entries {
        if m.cols() != width {
            return Err(Error::Shape(format!("embedding of {prompt:?} is {} wide, file width is {width}", m.cols())));
        }
        let mut p = Vec::new();
        put_string(&mut p, prompt);
        p.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        p.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            p.extend_from_slice(&v.to_le_bytes());
        }
        frame_record(&mut out, &p);
    }
    Ok(out)
}

/// Returns the embedding width and the prompt table.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, HashMap<String, Matrix<f32>>)> {
    let mut rec = RecordReader::new(bytes, EMBEDDINGS_MAGIC, "embeddings", EMBEDDINGS_VERSION)?;
    let mut r = ByteReader::new(rec.next_record("embeddings metadata")?, "embeddings metadata");
    let width = r.u32()? as usize;
    let count = r.u64()? as usize;
    r.finish()?;
    let mut table = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut r = ByteReader::new(rec.next_record("embedding")?, "embedding");
        let prompt = r.string()?;
        let k = r.u32()? as usize;
        let e = r.u32()? as usize;
        if e != width {
            return Err(Error::Shape(format!("embedding of {prompt:?} is {e} wide, file width is {width}")));
        }
        let data = (0..k * e).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        table.insert(prompt, Matrix::from_vec(k, e, data)?);
    }
    rec.finish()?;
    Ok((width, table))
}

pub fn write_embeddings(path: impl AsRef<Path>, width: usize, entries: &[(String, Matrix<f32>)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(width, entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(usize, HashMap<String, Matrix<f32>>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}
