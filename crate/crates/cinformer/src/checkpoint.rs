//! Binary checkpoint container.
//!
//! Layout: magic "CINT", version u32, entry count u32, then entries of
//! name-length u16, UTF-8 name, rank u8, extents u32 per axis, dtype u8
//! (0 = 32-bit real, 1 = raw bytes), little-endian row-major payload.
//! Model parameters come first (lexicographic), then optimizer moments
//! (`__opt_m__.<path>`, `__opt_v__.<path>`), the step counter `__step__`,
//! the best metric `__best__`, and finally the resolved config JSON as
//! `__config__`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::nn::ParamStore;

pub const MAGIC: [u8; 4] = *b"CINT";
pub const VERSION: u32 = 1;

const DTYPE_REAL32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug)]
pub struct Snapshot {
    pub params: ParamStore<f32>,
    pub opt_m: BTreeMap<String, Tensor<f32>>,
    pub opt_v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
    pub best: f32,
    pub config: ConfigFile,
}

struct Entry {
    name: String,
    extents: Vec<u32>,
    dtype: u8,
    payload: Vec<u8>,
}

fn f32_payload(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_from_payload(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn tensor_entry(name: &str, t: &Tensor<f32>) -> Entry {
    Entry {
        name: name.to_string(),
        extents: t.shape.iter().map(|&e| e as u32).collect(),
        dtype: DTYPE_REAL32,
        payload: f32_payload(&t.data),
    }
}

fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {}", e.name)));
        }
        if e.extents.len() > u8::MAX as usize {
            return Err(Error::Format(format!("entry rank too large: {}", e.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.extents.len() as u8);
        for &ext in &e.extents {
            out.extend_from_slice(&ext.to_le_bytes());
        }
        out.push(e.dtype);
        out.extend_from_slice(&e.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{}: truncated while reading {} at offset {}",
                self.path, what, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Entry>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected \"CINT\"",
            path.display(),
            magic
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {} (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| {
                Error::Format(format!("{}: entry name is not UTF-8", path.display()))
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!(
                "{}: duplicate entry name {}",
                path.display(),
                name
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u32("extent")?);
        }
        let dtype = r.u8("dtype")?;
        let numel: usize = extents.iter().map(|&e| e as usize).product();
        let payload_len = match dtype {
            DTYPE_REAL32 => numel * 4,
            DTYPE_BYTES => numel,
            other => {
                return Err(Error::Format(format!(
                    "{}: entry {} has unknown dtype {}",
                    path.display(),
                    name,
                    other
                )))
            }
        };
        let payload = r.take(payload_len, "payload")?.to_vec();
        entries.push(Entry {
            name,
            extents,
            dtype,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after last entry",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

fn snapshot_entries(snap: &Snapshot) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (path, p) in snap.params.iter() {
        entries.push(tensor_entry(path, &p.tensor));
    }
    for (path, t) in &snap.opt_m {
        entries.push(tensor_entry(&format!("__opt_m__.{path}"), t));
    }
    for (path, t) in &snap.opt_v {
        entries.push(tensor_entry(&format!("__opt_v__.{path}"), t));
    }
    entries.push(Entry {
        name: "__step__".into(),
        extents: vec![8],
        dtype: DTYPE_BYTES,
        payload: snap.step.to_le_bytes().to_vec(),
    });
    entries.push(Entry {
        name: "__best__".into(),
        extents: vec![1],
        dtype: DTYPE_REAL32,
        payload: f32_payload(&[snap.best]),
    });
    let config_json = snap.config.to_json();
    entries.push(Entry {
        name: "__config__".into(),
        extents: vec![config_json.len() as u32],
        dtype: DTYPE_BYTES,
        payload: config_json.into_bytes(),
    });
    Ok(entries)
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save_checkpoint(path: &Path, snap: &Snapshot) -> Result<()> {
    let bytes = encode(&snapshot_entries(snap)?)?;
    let tmp = path.with_extension("ckpt.tmp");
    let io_err = |e: std::io::Error, p: &Path| Error::Io {
        path: p.display().to_string(),
        source: e,
    };
    fs::write(&tmp, &bytes).map_err(|e| io_err(e, &tmp))?;
    fs::rename(&tmp, path).map_err(|e| io_err(e, path))
}

pub fn load_checkpoint(path: &Path) -> Result<Snapshot> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let entries = decode(&bytes, path)?;
    let mut params: ParamStore<f32> = ParamStore::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    let mut step: Option<u64> = None;
    let mut best: Option<f32> = None;
    let mut config: Option<ConfigFile> = None;
    for e in entries {
        let shape: Vec<usize> = e.extents.iter().map(|&x| x as usize).collect();
        match e.name.as_str() {
            "__step__" => {
                let b: [u8; 8] = e.payload.as_slice().try_into().map_err(|_| {
                    Error::Format(format!("{}: bad __step__ payload", path.display()))
                })?;
                step = Some(u64::from_le_bytes(b));
            }
            "__best__" => best = Some(f32_from_payload(&e.payload)[0]),
            "__config__" => {
                let text = String::from_utf8(e.payload).map_err(|_| {
                    Error::Format(format!("{}: __config__ is not UTF-8", path.display()))
                })?;
                config = Some(ConfigFile::from_json(&text)?);
            }
            name if name.starts_with("__opt_m__.") => {
                let t = Tensor {
                    shape,
                    data: f32_from_payload(&e.payload),
                };
                opt_m.insert(name["__opt_m__.".len()..].to_string(), t);
            }
            name if name.starts_with("__opt_v__.") => {
                let t = Tensor {
                    shape,
                    data: f32_from_payload(&e.payload),
                };
                opt_v.insert(name["__opt_v__.".len()..].to_string(), t);
            }
            name => {
                params.insert(
                    name,
                    Tensor {
                        shape,
                        data: f32_from_payload(&e.payload),
                    },
                );
            }
        }
    }
    let config = config.ok_or_else(|| {
        Error::Format(format!("{}: missing __config__ entry", path.display()))
    })?;
    if config.model.freeze_stem {
        params.set_trainable_prefix("stem.", false);
        params.set_trainable_prefix("fpn.", false);
    }
    Ok(Snapshot {
        params,
        opt_m,
        opt_v,
        step: step.unwrap_or(0),
        best: best.unwrap_or(f32::NEG_INFINITY),
        config,
    })
}
