//! Corpus container file.
//!
//! Layout: a 16-byte header (8-byte magic, `u32` version, `u32` reserved),
//! then framed records `[u64 payload length][payload][u32 CRC-32 of payload]`.
//! The first record holds the metadata and the deduplicated string table; each
//! following record holds one sequence. Integers and floats are little-endian,
//! frames are stored as `f32` in row-major order.

use std::collections::HashMap;
use std::path::Path;

use super::{Layout, MotionSequence, RepresentationSpec};
use crate::error::{Error, Result};
use crate::io::{frame_record, put_string, write_header, ByteReader, RecordReader};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CORPUS_MAGIC: &[u8; 8] = b"MLCORPUS";
pub const CORPUS_VERSION: u32 = 1;

const NO_LAYOUT: u8 = 0xff;
const NO_CLASS: u32 = u32::MAX;

fn layout_code(layout: Option<Layout>) -> u8 {
    match layout {
        Some(Layout::Toy) => 0,
        Some(Layout::Guo67Style) => 1,
        None => NO_LAYOUT,
    }
}

#[derive(Default)]
struct StringTable {
    strings: Vec<String>,
    index: HashMap<String, u32>,
}

impl StringTable {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.strings.len() as u32;
        self.strings.push(s.to_string());
        self.index.insert(s.to_string(), i);
        i
    }
}

/// Encode a corpus into the container byte layout.
pub fn encode_corpus<T: Scalar>(corpus: &[MotionSequence<T>]) -> Result<Vec<u8>> {
    let spec = corpus.first().map(|m| m.spec);
    let mut table = StringTable::default();
    let mut records = Vec::with_capacity(corpus.len());
    for (i, m) in corpus.iter().enumerate() {
        m.validate()?;
        if Some(m.spec) != spec {
            return Err(Error::Incompatible(format!("sequence {i} uses a different representation")));
        }
        let mut p = Vec::with_capacity(16 + 4 * m.frames.len());
        p.extend_from_slice(&(m.len() as u32).to_le_bytes());
        p.extend_from_slice(&m.class_id.unwrap_or(NO_CLASS).to_le_bytes());
        match &m.labels {
            Some(labels) => {
                p.push(1);
                for l in labels {
                    p.extend_from_slice(&table.intern(l).to_le_bytes());
                }
            }
            None => p.push(0),
        }
        p.extend_from_slice(&(m.prompts.len() as u32).to_le_bytes());
        for s in &m.prompts {
            p.extend_from_slice(&table.intern(s).to_le_bytes());
        }
        for &v in m.frames.data() {
            p.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        records.push(p);
    }

    let mut meta = Vec::new();
    meta.extend_from_slice(&spec.map_or(0.0, |s| s.fps).to_le_bytes());
    meta.push(layout_code(spec.map(|s| s.layout)));
    meta.extend_from_slice(&(spec.map_or(0, |s| s.joints) as u32).to_le_bytes());
    meta.extend_from_slice(&(spec.map_or(0, |s| s.dim()) as u32).to_le_bytes());
    meta.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    meta.extend_from_slice(&(table.strings.len() as u32).to_le_bytes());
    for s in &table.strings {
        put_string(&mut meta, s);
    }

    let mut out = Vec::new();
    write_header(&mut out, CORPUS_MAGIC, CORPUS_VERSION);
    frame_record(&mut out, &meta);
    for r in &records {
        frame_record(&mut out, r);
    }
    Ok(out)
}

/// Decode a corpus from the container byte layout. Zero bytes decode to an empty corpus.
pub fn decode_corpus<T: Scalar>(bytes: &[u8]) -> Result<Vec<MotionSequence<T>>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut rec = RecordReader::new(bytes, CORPUS_MAGIC, "corpus", CORPUS_VERSION)?;
    let meta = rec.next_record("corpus metadata")?;
    let mut r = ByteReader::new(meta, "corpus metadata");
    let fps = r.f64()?;
    let layout = r.u8()?;
    let joints = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let strings = (0..r.u32()?).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let spec = match layout {
        NO_LAYOUT if count == 0 => None,
        0 => Some(RepresentationSpec::toy(joints, fps)?),
        1 => Some(RepresentationSpec::guo67(fps)),
        other => return Err(Error::Format(format!("unknown representation layout code {other}"))),
    };
    if let Some(spec) = spec {
        spec.validate()?;
        if spec.joints != joints || spec.dim() != dim {
            return Err(Error::Format(format!("layout does not match J={joints}, D={dim}")));
        }
    }
    let lookup = |i: u32| {
        strings
            .get(i as usize)
            .cloned()
            .ok_or_else(|| Error::Format(format!("string index {i} outside the table of {}", strings.len())))
    };
    let mut corpus = Vec::with_capacity(count);
    for k in 0..count {
        let spec = spec.expect("nonempty corpus has a layout");
        let payload = rec.next_record("corpus sequence")?;
        let mut r = ByteReader::new(payload, "corpus sequence");
        let n = r.u32()? as usize;
        let class = r.u32()?;
        let labels = match r.u8()? {
            0 => None,
            1 => Some((0..n).map(|_| lookup(r.u32()?)).collect::<Result<Vec<_>>>()?),
            f => return Err(Error::Format(format!("sequence {k}: bad label flag {f}"))),
        };
        let prompts = (0..r.u32()?).map(|_| lookup(r.u32()?)).collect::<Result<Vec<_>>>()?;
        let data = (0..n * dim).map(|_| r.f32().map(|v| T::lit(v as f64))).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let m = MotionSequence {
            frames: Matrix::from_vec(n, dim, data)?,
            spec,
            labels,
            prompts,
            class_id: (class != NO_CLASS).then_some(class),
        };
        m.validate()?;
        corpus.push(m);
    }
    rec.finish()?;
    Ok(corpus)
}

pub fn write_corpus<T: Scalar>(path: impl AsRef<Path>, corpus: &[MotionSequence<T>]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_corpus(corpus)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_corpus<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<MotionSequence<T>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}
