//! The embedding archive: a little-endian binary container (`CNRM`,
//! version 1) holding `(utterance id, speaker id, f32 vector)` records,
//! plus a human-debuggable CSV fallback with identical content.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Embedding, LabeledEmbedding, SpeakerId};

const MAGIC: &[u8; 4] = b"CNRM";
const VERSION: u8 = 1;

/// One archived embedding, exactly as stored: 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance: String,
    pub speaker: String,
    pub values: Vec<f32>,
}

pub(super) fn archive_err(path: &Path, kind: impl Into<String>, offset: u64) -> Error {
    Error::Archive {
        path: path.display().to_string(),
        kind: kind.into(),
        offset,
    }
}

/// Write records as a version-1 binary archive. All records must share one
/// dimension; utterance ids must be unique and non-empty.
pub fn write_archive(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = validate_records(records)?;
    let mut buf = Vec::with_capacity(16 + records.len() * (8 + dim * 4));
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes()); // flags, reserved
    for r in records {
        write_str(&mut buf, &r.utterance)?;
        write_str(&mut buf, &r.speaker)?;
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Common-sense checks shared by both writers; returns the dimension
/// (0 for an empty archive).
fn validate_records(records: &[EmbeddingRecord]) -> Result<usize> {
    let dim = records.first().map_or(0, |r| r.values.len());
    let mut seen = HashMap::with_capacity(records.len());
    for r in records {
        if r.values.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: r.values.len(),
            });
        }
        if r.utterance.is_empty() || r.speaker.is_empty() {
            return Err(Error::InvalidConfig("empty id in embedding record".into()));
        }
        if seen.insert(r.utterance.as_str(), ()).is_some() {
            return Err(Error::DuplicateUtterance(r.utterance.clone()));
        }
    }
    Ok(dim)
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::InvalidConfig(format!(
            "id longer than {} bytes",
            u16::MAX
        )));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

/// Read a version-1 binary archive, rejecting malformed input with the
/// byte offset of the problem.
pub fn read_archive(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let data = fs::read(path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(archive_err(path, "bad magic (not an embedding archive)", 0));
    }
    let version = cur.take(1, "version byte")?[0];
    if version != VERSION {
        return Err(archive_err(
            path,
            format!("unsupported version {version} (expected {VERSION})"),
            4,
        ));
    }
    let dim = cur.u32("dimension")? as usize;
    let count = cur.u32("record count")? as usize;
    let _flags = cur.u32("flags")?;

    let mut records = Vec::with_capacity(count);
    let mut seen = HashMap::with_capacity(count);
    for i in 0..count {
        let utterance = cur.string(&format!("utterance id of record {i}"))?;
        let speaker = cur.string(&format!("speaker id of record {i}"))?;
        let at = cur.pos;
        let payload = cur.take(dim * 4, &format!("float payload of record {i}"))?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if seen.insert(utterance.clone(), ()).is_some() {
            return Err(Error::DuplicateUtterance(utterance));
        }
        if utterance.is_empty() || speaker.is_empty() {
            return Err(archive_err(path, format!("empty id in record {i}"), at as u64));
        }
        records.push(EmbeddingRecord {
            utterance,
            speaker,
            values,
        });
    }
    if cur.pos != data.len() {
        return Err(archive_err(
            path,
            format!("{} trailing byte(s) after the last record", data.len() - cur.pos),
            cur.pos as u64,
        ));
    }
    Ok(records)
}

pub(super) struct Cursor<'a> {
    pub(super) data: &'a [u8],
    pub(super) pos: usize,
    pub(super) path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(super) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(archive_err(
                self.path,
                format!(
                    "truncated: wanted {n} byte(s) for {what}, {} left",
                    self.data.len() - self.pos
                ),
                self.pos as u64,
            ));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(super) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(super) fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.take(2, &format!("length of {what}"))?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| archive_err(self.path, format!("{what} is not UTF-8"), at as u64))
    }
}

/// Write the CSV fallback: header-less rows `id,speaker,v0,...,v{V-1}`.
/// Floats are printed with Rust's shortest round-trip representation, so
/// the text path is also lossless at 32-bit precision.
pub fn write_csv_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    validate_records(records)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&r.utterance);
        out.push(',');
        out.push_str(&r.speaker);
        for v in &r.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read the CSV fallback. Every row must carry the same number of values.
pub fn read_csv_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(parse_err(
                lineno,
                format!("expected id,speaker,v0,... got {} field(s)", fields.len()),
            ));
        }
        let values: Vec<f32> = fields[2..]
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.trim().parse::<f32>().map_err(|e| {
                    parse_err(lineno, format!("value {} ('{}'): {e}", i, f.trim()))
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    lineno,
                    format!("row has {} values, file started with {d}", values.len()),
                ));
            }
            _ => {}
        }
        let utterance = fields[0].trim().to_string();
        let speaker = fields[1].trim().to_string();
        if utterance.is_empty() || speaker.is_empty() {
            return Err(parse_err(lineno, "empty id".into()));
        }
        if seen.insert(utterance.clone(), ()).is_some() {
            return Err(Error::DuplicateUtterance(utterance));
        }
        records.push(EmbeddingRecord {
            utterance,
            speaker,
            values,
        });
    }
    Ok(records)
}

/// Read either format, picking by extension (`.csv` = text fallback).
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_csv_embeddings(path)
    } else {
        read_archive(path)
    }
}

/// Write either format, picking by extension (`.csv` = text fallback).
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_csv_embeddings(path, records)
    } else {
        write_archive(path, records)
    }
}

/// Embeddings loaded into working precision and indexed by utterance id.
pub struct EmbeddingStore {
    entries: HashMap<String, (String, Embedding)>,
    order: Vec<String>,
    dim: usize,
}

impl EmbeddingStore {
    pub fn from_records(records: &[EmbeddingRecord]) -> Result<Self> {
        let dim = validate_records(records)?;
        let mut entries = HashMap::with_capacity(records.len());
        let mut order = Vec::with_capacity(records.len());
        for r in records {
            let values: Vec<f64> = r.values.iter().map(|&v| v as f64).collect();
            let emb = Embedding::new(values)?;
            entries.insert(r.utterance.clone(), (r.speaker.clone(), emb));
            order.push(r.utterance.clone());
        }
        Ok(EmbeddingStore {
            entries,
            order,
            dim,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&read_embeddings(path)?)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, utterance: &str) -> Option<&Embedding> {
        self.entries.get(utterance).map(|(_, e)| e)
    }

    pub fn speaker_of(&self, utterance: &str) -> Option<&str> {
        self.entries.get(utterance).map(|(s, _)| s.as_str())
    }

    /// All embeddings as labeled items (class indices unset), in archive
    /// order.
    pub fn labeled(&self) -> Vec<LabeledEmbedding> {
        self.order
            .iter()
            .map(|utt| {
                let (spk, emb) = &self.entries[utt];
                LabeledEmbedding {
                    embedding: emb.clone(),
                    speaker: SpeakerId::new(spk.clone()),
                }
            })
            .collect()
    }

    /// Labeled items restricted to the given speakers, in archive order.
    pub fn labeled_for_speakers(&self, keep: &[String]) -> Vec<LabeledEmbedding> {
        let keep: std::collections::HashSet<&str> = keep.iter().map(|s| s.as_str()).collect();
        self.order
            .iter()
            .filter_map(|utt| {
                let (spk, emb) = &self.entries[utt];
                keep.contains(spk.as_str()).then(|| LabeledEmbedding {
                    embedding: emb.clone(),
                    speaker: SpeakerId::new(spk.clone()),
                })
            })
            .collect()
    }
}
