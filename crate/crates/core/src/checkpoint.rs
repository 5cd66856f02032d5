//! Checkpoint archive: a manifest plus named tensor blobs in one file.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! "OSCK"  u8 version=1  3 reserved zero bytes  u32 entry count
//! entry count × { u32 name length, name (UTF-8), u64 absolute offset, u64 length }
//! blobs, concatenated in table order
//! ```
//!
//! The first entry is `manifest`, a text file of `key=value` lines: the
//! network spec fields, one `param=<name>,<kind>,<trainable>` line per
//! registry entry in order, and free-form `meta.<key>=<value>` lines. Each
//! registry entry is stored as `param.<name>` in the tensor format; further
//! tensors (optimizer state and the like) use any other unique name.

use std::collections::BTreeMap;
use std::path::Path;

use crate::arch::{build_model, NetworkSpec, OSNetModel};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{read_tensor_any, write_tensor, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"OSCK";
const VERSION: u8 = 1;

/// Ordered collection of uniquely named byte blobs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Archive {
    entries: Vec<(String, Vec<u8>)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<u8>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::format(format!("duplicate archive entry {}", name)));
        }
        self.entries.push((name, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let toc: usize = self.entries.iter().map(|(n, _)| 4 + n.len() + 16).sum();
        let mut offset = (12 + toc) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&[0, 0, 0]);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            offset += data.len() as u64;
        }
        for (_, data) in &self.entries {
            out.extend_from_slice(data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format("truncated checkpoint archive"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint archive (bad magic)"));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", version)));
        }
        if take(3)? != [0, 0, 0] {
            return Err(Error::format("non-zero reserved bytes in checkpoint header"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let count = u32_at(take(4)?);
        let mut toc = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32_at(take(4)?);
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::format("entry name is not UTF-8"))?
                .to_string();
            let off = u64_at(take(8)?);
            let size = u64_at(take(8)?);
            toc.push((name, off, size));
        }
        let mut archive = Archive::new();
        for (name, off, size) in toc {
            let start = usize::try_from(off).map_err(|_| Error::format("entry offset overflow"))?;
            let end = usize::try_from(size)
                .ok()
                .and_then(|s| start.checked_add(s))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format(format!("entry {} extends past the archive", name)))?;
            archive.push(name, bytes[start..end].to_vec())?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Archive::from_bytes(&std::fs::read(path)?)
    }
}

/// Model parameters plus metadata and auxiliary tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub meta: BTreeMap<String, String>,
    /// Additional named tensors, such as optimizer state.
    pub extra: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut manifest = self.spec.to_manifest();
        for (_, p) in self.store.iter() {
            manifest.push_str(&format!("param={},{},{}\n", p.name, p.kind.as_str(), p.trainable));
        }
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::invalid(format!("metadata entry {} cannot be stored", k)));
            }
            manifest.push_str(&format!("meta.{}={}\n", k, v));
        }
        let mut a = Archive::new();
        a.push("manifest", manifest.into_bytes())?;
        for (_, p) in self.store.iter() {
            a.push(format!("param.{}", p.name), write_tensor(&p.value))?;
        }
        for (name, t) in &self.extra {
            if name == "manifest" || name.starts_with("param.") {
                return Err(Error::invalid(format!("reserved checkpoint entry name {}", name)));
            }
            a.push(name.clone(), write_tensor(t))?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let text = a
            .get("manifest")
            .ok_or_else(|| Error::format("checkpoint has no manifest"))?;
        let text = std::str::from_utf8(text).map_err(|_| Error::format("manifest is not UTF-8"))?;
        let mut spec = NetworkSpec::default();
        let mut params = Vec::new();
        let mut meta = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got '{}'", line)))?;
            if k == "param" {
                let parts: Vec<&str> = v.split(',').collect();
                let [name, kind, trainable] = parts[..] else {
                    return Err(parse_err(format!("bad parameter line '{}'", v)));
                };
                let kind = ParamKind::parse(kind).ok_or_else(|| parse_err(format!("unknown kind {}", kind)))?;
                let trainable: bool = trainable
                    .parse()
                    .map_err(|_| parse_err(format!("bad trainable flag {}", trainable)))?;
                params.push((name.to_string(), kind, trainable));
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v.to_string());
            } else {
                spec.set(k, v).map_err(|e| parse_err(e.to_string()))?;
            }
        }
        spec.validate()?;
        let mut store = ParamStore::new();
        for (name, kind, trainable) in params {
            let blob = a
                .get(&format!("param.{}", name))
                .ok_or_else(|| Error::format(format!("checkpoint is missing tensor {}", name)))?;
            let id = store.add(name, kind, read_tensor_any(blob)?.into_scalar())?;
            store.get_mut(id).trainable = trainable;
        }
        let mut extra = Vec::new();
        for name in a.names() {
            if name != "manifest" && !name.starts_with("param.") {
                let blob = a.get(name).expect("listed entry");
                extra.push((name.to_string(), read_tensor_any(blob)?.into_scalar()));
            }
        }
        Ok(Checkpoint {
            spec,
            store,
            meta,
            extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_archive(&Archive::read(path)?)
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<T>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model structure and checks that the stored registry
    /// matches it name by name and shape by shape.
    pub fn model(&self) -> Result<OSNetModel> {
        let (model, fresh) = build_model::<T>(&self.spec, 0)?;
        if fresh.len() != self.store.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, spec builds {}",
                self.store.len(),
                fresh.len()
            )));
        }
        for ((_, a), (_, b)) in fresh.iter().zip(self.store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut a = Archive::new();
        a.push("x", vec![1, 2, 3]).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..4], b"OSCK");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..8], &[0, 0, 0]);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let off = u64::from_le_bytes(b[17..25].try_into().unwrap()) as usize;
        assert_eq!(off, 12 + 4 + 1 + 16);
        assert_eq!(&b[off..], &[1, 2, 3]);
    }

    #[test]
    fn rejects_corruption() {
        let mut a = Archive::new();
        a.push("x", vec![9; 10]).unwrap();
        let b = a.to_bytes();
        assert!(Archive::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Archive::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[4] = 2;
        assert!(Archive::from_bytes(&bad).is_err());
        assert!(a.push("x", vec![]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = NetworkSpec {
            num_classes: 3,
            ..NetworkSpec::tiny()
        };
        let (_, mut store) = build_model::<f32>(&spec, 1).unwrap();
        store.set_trainable("conv1", false);
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "4".to_string());
        let ck = Checkpoint {
            spec,
            store,
            meta,
            extra: vec![("optim.step".to_string(), Tensor::scalar(3.0f32))],
        };
        let bytes = ck.to_archive().unwrap().to_bytes();
        let back = Checkpoint::<f32>::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.spec, ck.spec);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.extra("optim.step").unwrap().data(), &[3.0]);
        assert!(!back.store.by_name("conv1.conv.weight").unwrap().trainable);
        back.model().unwrap();
        assert_eq!(back.to_archive().unwrap().to_bytes(), bytes);
    }
}
