//! Input files: JSONL corpus and query records, the binary embeddings
//! block and the triples list.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::scoring::{LanguageId, TermEmbeddingMatrix};

/// One JSONL line: `{"id", "language", "text"}` or `{"id", "language", "embeddings"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub language: LanguageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Content {
    Text(String),
    Embeddings(TermEmbeddingMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub language: LanguageId,
    pub content: Content,
}

/// Records keyed by id, ordered by id.
pub type Records = BTreeMap<String, Record>;

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses JSONL records. `path` only labels errors.
pub fn parse_records(text: &str, path: &Path, into: &mut Records) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        let content = match (rec.text, rec.embeddings) {
            (Some(t), None) => Content::Text(t),
            (None, Some(rows)) => Content::Embeddings(
                TermEmbeddingMatrix::from_rows(&rows)
                    .map_err(|e| parse_error(path, line_no, e.to_string()))?,
            ),
            _ => {
                return Err(parse_error(
                    path,
                    line_no,
                    "exactly one of `text` and `embeddings` is required",
                ))
            }
        };
        if into.contains_key(&rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        into.insert(
            rec.id,
            Record {
                language: rec.language,
                content,
            },
        );
    }
    Ok(())
}

pub fn read_records(paths: &[PathBuf]) -> Result<Records> {
    let mut records = Records::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_records(&text, path, &mut records)?;
    }
    Ok(records)
}

const EMBEDDINGS_MAGIC: &[u8; 8] = b"CXMEMB\0\0";

/// Binary embeddings block, little-endian:
/// magic, `dim` u32, record count u64, then per record an id (u16 length +
/// UTF-8), a row count u32 and `rows · dim` f32 values.
pub fn embeddings_to_bytes(dim: usize, items: &BTreeMap<String, TermEmbeddingMatrix>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for (id, m) in items {
        if m.dim() != dim {
            return Err(Error::dim(dim, m.dim()));
        }
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidConfig(format!("id `{id}` longer than 65535 bytes")))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        for v in m.values().iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, TermEmbeddingMatrix>> {
    let mut r = ByteReader::new(bytes, "embeddings file");
    if r.take(8)? != EMBEDDINGS_MAGIC {
        return Err(Error::Format("embeddings file: bad magic".into()));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut items = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("embeddings file: id is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let byte_len = rows
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("embeddings file: row count overflow".into()))?;
        let raw = r.take(byte_len)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect();
        let arr = ndarray::Array2::from_shape_vec((rows, dim), values)
            .map_err(|e| Error::Format(format!("embeddings file: {e}")))?;
        let m = TermEmbeddingMatrix::new(arr)?;
        if items.insert(id.clone(), m).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    r.finish()?;
    Ok(items)
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, TermEmbeddingMatrix>> {
    embeddings_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_embeddings(path: &Path, dim: usize, items: &BTreeMap<String, TermEmbeddingMatrix>) -> Result<()> {
    let bytes = embeddings_to_bytes(dim, items)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleIds {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

/// Whitespace-separated `query_id positive_id negative_id` lines. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_triples(text: &str, path: &Path) -> Result<Vec<TripleIds>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        let [q, p, n] = cols[..] else {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected `query_id positive_id negative_id`, got {} columns", cols.len()),
            ));
        };
        out.push(TripleIds {
            query: q.to_string(),
            positive: p.to_string(),
            negative: n.to_string(),
        });
    }
    Ok(out)
}

pub fn read_triples(path: &Path) -> Result<Vec<TripleIds>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, path)
}
