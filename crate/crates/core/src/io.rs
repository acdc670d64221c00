//! Versioned binary container for checkpoints and datasets.
//!
//! Layout: `TSIM` magic, u32 format version, u64 header length, JSON
//! header (kind, producer version, string metadata, array directory),
//! raw little-endian array payloads in directory order, and a trailing
//! FNV-1a 64 checksum over everything before it. Readers reject bad
//! magic, version, truncation, and checksum mismatches.

use std::collections::BTreeMap;
use std::path::Path;

use crate::rng::fnv1a64;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TSIM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    len: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    kind: String,
    producer: String,
    meta: BTreeMap<String, String>,
    arrays: Vec<ArrayEntry>,
}

/// A named bundle of metadata strings and numeric arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    arrays: Vec<(String, ArrayData)>,
}

impl Artifact {
    pub fn new(kind: &str) -> Artifact {
        Artifact {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}` in `{}`", self.kind)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| Error::Checkpoint(format!("meta `{key}`=`{s}` failed to parse")))
    }

    pub fn put_f64(&mut self, name: &str, data: Vec<f64>) {
        self.arrays.push((name.to_string(), ArrayData::F64(data)));
    }

    pub fn put_u32(&mut self, name: &str, data: Vec<u32>) {
        self.arrays.push((name.to_string(), ArrayData::U32(data)));
    }

    fn lookup(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}` in `{}`", self.kind)))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.lookup(name)? {
            ArrayData::F64(v) => Ok(v),
            ArrayData::U32(_) => Err(Error::Checkpoint(format!("array `{name}` is u32, not f64"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.lookup(name)? {
            ArrayData::U32(v) => Ok(v),
            ArrayData::F64(_) => Err(Error::Checkpoint(format!("array `{name}` is f64, not u32"))),
        }
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            producer: crate::ARTIFACT_VERSION.to_string(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, d)| ArrayEntry {
                    name: n.clone(),
                    dtype: d.dtype().to_string(),
                    len: d.len() as u64,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serialization");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, data) in &self.arrays {
            match data {
                ArrayData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Artifact> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 4 + 4 + 8 + 8 {
            return Err(bad("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        if &body[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        if body.len() < 16 + header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[16..16 + header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut offset = 16 + header_len;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let n = entry.len as usize;
            let width = match entry.dtype.as_str() {
                "f64" => 8,
                "u32" => 4,
                other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
            };
            let end = offset + n * width;
            if body.len() < end {
                return Err(bad("truncated payload"));
            }
            let raw = &body[offset..end];
            let data = match entry.dtype.as_str() {
                "f64" => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            arrays.push((entry.name.clone(), data));
            offset = end;
        }
        if offset != body.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Artifact {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Artifact> {
        Artifact::from_bytes(&std::fs::read(path)?)
    }

    /// Reads and checks the expected kind tag.
    pub fn read_kind(path: &Path, kind: &str) -> Result<Artifact> {
        let a = Artifact::read(path)?;
        if a.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected `{kind}` artifact, found `{}`",
                a.kind
            )));
        }
        Ok(a)
    }
}
