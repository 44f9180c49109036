//! Flat key -> tensor archive used for checkpoints and backbone weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  b"CODARCH\0"
//! format_version   u32
//! config_len       u32, then config_len bytes of UTF-8 `key=value` text
//! n_tensors        u32
//! n_tensors times, sorted by key:
//!   key_len        u32, then key bytes (UTF-8)
//!   ndim           u32, then ndim x u64 dims
//!   data           prod(dims) x f64
//! ```
//!
//! Writing is byte-for-byte deterministic for equal contents.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CodError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CODARCH\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub format_version: u32,
    /// Config snapshot (`key=value` lines); empty for bare weight files.
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(config: String) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_params(store: &ParamStore, config: String) -> Self {
        let mut a = Self::new(config);
        for (name, t) in store.iter() {
            a.tensors.insert(name.to_string(), t.clone());
        }
        a
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, t) in &self.tensors {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CodError::ArchiveFormat("bad magic".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(CodError::ArchiveFormat(format!(
                "unsupported format version {format_version} (expected {FORMAT_VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let config = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| CodError::ArchiveFormat("config is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let key = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| CodError::ArchiveFormat("key is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            if ndim > 4 {
                return Err(CodError::Archive {
                    key,
                    msg: format!("{ndim} dimensions (at most 4 supported)"),
                });
            }
            let mut shape = [1usize; 4];
            for d in shape.iter_mut().skip(4 - ndim) {
                *d = r.u64()? as usize;
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8).map_err(|_| CodError::Archive {
                key: key.clone(),
                msg: "truncated tensor data".into(),
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.insert(key, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(CodError::ArchiveFormat("trailing bytes".into()));
        }
        Ok(Self {
            format_version,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CodError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| CodError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CodError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy every parameter under `prefix` from the archive key obtained by
    /// stripping the prefix. Missing keys and shape mismatches are errors
    /// naming the key; archive keys with no matching parameter are returned.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str) -> Result<Vec<String>> {
        let strip = |name: &str| -> Option<String> {
            if prefix.is_empty() {
                Some(name.to_string())
            } else {
                name.strip_prefix(prefix)
                    .and_then(|s| s.strip_prefix('.'))
                    .map(str::to_string)
            }
        };
        let wanted: Vec<(String, String)> = store
            .iter()
            .filter_map(|(name, _)| strip(name).map(|k| (name.to_string(), k)))
            .collect();
        for (name, key) in &wanted {
            let t = self.tensors.get(key).ok_or_else(|| CodError::Archive {
                key: key.clone(),
                msg: "missing from archive".into(),
            })?;
            store.assign(name, t.clone()).map_err(|e| match e {
                CodError::Archive { msg, .. } => CodError::Archive { key: key.clone(), msg },
                other => other,
            })?;
        }
        let used: std::collections::BTreeSet<&str> = wanted.iter().map(|(_, k)| k.as_str()).collect();
        Ok(self
            .tensors
            .keys()
            .filter(|k| !used.contains(k.as_str()))
            .cloned()
            .collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CodError::ArchiveFormat("unexpected end of archive".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
