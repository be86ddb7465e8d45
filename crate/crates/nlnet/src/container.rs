//! The NLNET1 container: a single file holding named f64 arrays behind a
//! length-prefixed UTF-8 manifest. Checkpoints and dataset caches share it.
//!
//! Layout:
//! - magic bytes `NLNET1`
//! - u64 little-endian manifest byte length
//! - manifest: UTF-8 JSON `{ "meta": ..., "entries": [...] }` where each
//!   entry names an array, its shape, and its byte offset into the payload
//! - payload: raw little-endian 64-bit float arrays at the stated offsets

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"NLNET1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    meta: M,
    entries: Vec<Entry>,
}

/// Write a container with the given metadata and named arrays (in order).
pub fn write<M: Serialize, T: Scalar>(
    path: &Path,
    meta: &M,
    arrays: &[(String, Vec<usize>, &[T])],
) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, shape, data) in arrays {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Container(format!(
                "array {name}: shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        entries.push(Entry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += (data.len() * 8) as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        meta,
        entries: entries.clone(),
    })
    .map_err(|e| Error::Container(format!("manifest encode: {e}")))?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    for (_, _, data) in arrays {
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in data.iter() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

/// A parsed container: metadata, entry table, and the raw payload bytes.
pub struct Container<M> {
    pub meta: M,
    pub entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl<M> Container<M> {
    /// Decode one entry's array as f64.
    pub fn array(&self, e: &Entry) -> Result<Vec<f64>> {
        let start = e.offset as usize;
        let end = start + (e.len as usize) * 8;
        if end > self.payload.len() {
            return Err(Error::Container(format!(
                "entry {} runs past the payload ({} > {})",
                e.name,
                end,
                self.payload.len()
            )));
        }
        Ok(self.payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Container(format!("no entry named {name}")))
    }
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<Container<M>> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..6] != MAGIC {
        return Err(Error::Container(format!(
            "{}: not an NLNET1 container",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let mstart = 14;
    if bytes.len() < mstart + mlen {
        return Err(Error::Container("truncated manifest".into()));
    }
    let manifest: Manifest<M> = serde_json::from_slice(&bytes[mstart..mstart + mlen])
        .map_err(|e| Error::Container(format!("manifest decode: {e}")))?;
    let payload = bytes[mstart + mlen..].to_vec();
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        if numel as u64 != e.len {
            return Err(Error::Container(format!(
                "entry {}: shape {:?} inconsistent with len {}",
                e.name, e.shape, e.len
            )));
        }
        if (e.offset + e.len * 8) as usize > payload.len() {
            return Err(Error::Container(format!("entry {} overruns payload", e.name)));
        }
    }
    Ok(Container {
        meta: manifest.meta,
        entries: manifest.entries,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejections() {
        let dir = std::env::temp_dir().join(format!("nlnet-container-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.nlnet");
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![-1.0f64; 6];
        write(
            &path,
            &serde_json::json!({"kind": "test"}),
            &[
                ("a".to_string(), vec![2, 2], a.as_slice()),
                ("b".to_string(), vec![6], b.as_slice()),
            ],
        )
        .unwrap();
        let c: Container<serde_json::Value> = read(&path).unwrap();
        assert_eq!(c.meta["kind"], "test");
        assert_eq!(c.array(c.entry("a").unwrap()).unwrap(), a);
        assert_eq!(c.array(c.entry("b").unwrap()).unwrap(), b);
        assert!(c.entry("missing").is_err());

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read::<serde_json::Value>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
