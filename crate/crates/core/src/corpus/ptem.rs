//! PTEM binary embedding container and its JSON sidecar manifest.
//!
//! Layout (little-endian): `b"PTEM"`, `u32` version (1), `u32` doc count, then per
//! document `u32` id length, UTF-8 id, `u32` T, `u32` D and `T·D` `f32` values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Document, Embeddings};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PTEM";
const VERSION: u32 = 1;
const META_KEY: &str = "__meta__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub tokens: Vec<String>,
    pub char_offsets: Vec<[usize; 2]>,
}

/// Sidecar manifest location: `corpus.ptem` → `corpus.manifest.json`.
pub fn manifest_path(embed_path: &Path) -> PathBuf {
    embed_path.with_extension("manifest.json")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Consistency(format!(
                "truncated PTEM payload while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a complete PTEM buffer. Any inconsistency fails the whole read.
pub fn read_ptem(bytes: &[u8]) -> Result<Vec<(String, Embeddings)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad PTEM magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported PTEM version {version}")));
    }
    let count = r.u32("document count")? as usize;
    let mut docs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "document id")?)
            .map_err(|e| Error::Format(format!("document id is not UTF-8: {e}")))?
            .to_string();
        let t = r.u32("row count")? as usize;
        let d = r.u32("dimension")? as usize;
        let n = t
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Consistency(format!("`{id}`: {t}×{d} overflows")))?;
        let payload = r.take(n, &format!("rows of `{id}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        docs.push((id, Embeddings::new(t, d, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Consistency(format!(
            "{} trailing bytes after {count} documents",
            bytes.len() - r.pos
        )));
    }
    Ok(docs)
}

pub fn write_ptem(path: &Path, docs: &[(&str, &Embeddings)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(docs.len() as u32).to_le_bytes())?;
    for (id, emb) in docs {
        put(&(id.len() as u32).to_le_bytes())?;
        put(id.as_bytes())?;
        put(&(emb.rows() as u32).to_le_bytes())?;
        put(&(emb.dim() as u32).to_le_bytes())?;
        for v in emb.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)?;
    raw.into_iter()
        .filter(|(k, _)| k != META_KEY)
        .map(|(k, v)| Ok((k, serde_json::from_value(v)?)))
        .collect()
}

pub fn write_manifest(
    path: &Path,
    entries: &BTreeMap<String, ManifestEntry>,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let mut out = serde_json::Map::new();
    if let Some(meta) = meta {
        out.insert(META_KEY.into(), meta);
    }
    for (k, v) in entries {
        out.insert(k.clone(), serde_json::to_value(v)?);
    }
    let text = serde_json::to_string(&out)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a PTEM file; if the sidecar manifest exists, row counts are checked against it.
pub fn load_embeddings(embed_path: &Path) -> Result<BTreeMap<String, Embeddings>> {
    let bytes = fs::read(embed_path).map_err(|e| Error::io(embed_path, e))?;
    let docs = read_ptem(&bytes)?;
    let mpath = manifest_path(embed_path);
    let manifest = if mpath.exists() {
        Some(read_manifest(&mpath)?)
    } else {
        None
    };
    let mut out = BTreeMap::new();
    for (id, emb) in docs {
        if let Some(entry) = manifest.as_ref().and_then(|m| m.get(&id)) {
            if entry.tokens.len() != emb.rows() {
                return Err(Error::Consistency(format!(
                    "`{id}`: manifest lists {} tokens, payload has {} rows",
                    entry.tokens.len(),
                    emb.rows()
                )));
            }
        }
        if out.insert(id.clone(), emb).is_some() {
            return Err(Error::Consistency(format!("duplicate document id `{id}`")));
        }
    }
    Ok(out)
}

/// Joins the payload with its manifest into validated documents.
pub fn load_documents(embed_path: &Path) -> Result<BTreeMap<String, Document>> {
    let embeddings = load_embeddings(embed_path)?;
    let manifest = read_manifest(&manifest_path(embed_path))?;
    let mut docs = BTreeMap::new();
    for (id, emb) in embeddings {
        let entry = manifest.get(&id).ok_or_else(|| Error::MissingDocument(id.clone()))?;
        let offsets = entry.char_offsets.iter().map(|&[s, e]| (s, e)).collect();
        let doc = Document::new(id.clone(), entry.tokens.clone(), offsets, emb)?;
        docs.insert(id, doc);
    }
    Ok(docs)
}
