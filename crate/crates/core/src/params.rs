//! Named parameter storage, graph leases, and checkpoint I/O.
//!
//! A [`ParamStore`] owns tensors by dotted name in insertion order. Entries
//! are flagged trainable or target; a [`Lease`] exposes trainable entries as
//! differentiable graph leaves and target entries as constants, so a target
//! network can never receive a gradient by construction.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{GradStore, Graph, Var};
use crate::tensor::Tensor;

struct Entry {
    value: Tensor,
    target: bool,
}

/// Ordered map of named parameter tensors.
#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert_flagged(&mut self, name: &str, value: Tensor, target: bool) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::ParamStore(format!(
                "invalid parameter name {name:?}: must be non-empty without whitespace"
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::ParamStore(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), Entry { value, target });
        Ok(())
    }

    /// Register a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_flagged(name, value, false)
    }

    /// Register a target-flagged parameter (tracked by EMA, never trained).
    pub fn insert_target(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_flagged(name, value, true)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::ParamStore(format!("unknown parameter {name}")))
    }

    pub fn is_target(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.target)
            .ok_or_else(|| Error::ParamStore(format!("unknown parameter {name}")))
    }

    /// Replace an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::ParamStore(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ParamStore(format!(
                "shape change for {name}: {:?} -> {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Tensor)) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::ParamStore(format!("unknown parameter {name}")))?;
        f(&mut entry.value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Clone the entries whose names start with `prefix`, keeping names and
    /// flags. Used to pair an EMA target with a slice of a larger store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            if name.starts_with(prefix) {
                out.entries.insert(
                    name.clone(),
                    Entry {
                        value: entry.value.clone(),
                        target: entry.target,
                    },
                );
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Expose every entry on a graph: trainable entries become leaves,
    /// target entries become constants.
    pub fn lease(&self, g: &Graph) -> Lease {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let v = if e.target {
                    g.constant(e.value.clone())
                } else {
                    g.leaf(e.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Lease { vars }
    }

    /// Expose every entry as a constant, regardless of flags. Used for the
    /// momentum branch where even trainable-shaped copies must stay fixed.
    pub fn lease_frozen(&self, g: &Graph) -> Lease {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), g.constant(e.value.clone())))
            .collect();
        Lease { vars }
    }

    /// Fresh store with the same names and values, every entry target-flagged.
    pub fn target_copy(&self) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    Entry {
                        value: e.value.clone(),
                        target: true,
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn mirrors(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ParamStore(format!(
                "store size mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, e) in &self.entries {
            let o = other.get(name)?;
            if e.value.shape() != o.shape() {
                return Err(Error::ParamStore(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    e.value.shape(),
                    o.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Per-graph view of a [`ParamStore`]: one [`Var`] per entry, reused across
/// every forward pass built on that graph so shared modules share leaves.
pub struct Lease {
    vars: IndexMap<String, Var>,
}

impl Lease {
    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::ParamStore(format!("unknown leased parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Pull this lease's gradients out of a backward result, keyed by
    /// parameter name. Entries without a gradient are omitted.
    pub fn grads(&self, store: &GradStore) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| store.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Checkpoint I/O: `manifest.txt` holds `name dim0 dim1 ...` lines and
/// `params.bin` holds each entry's data as little-endian f32, concatenated
/// in manifest order.
pub mod checkpoint {
    use super::*;

    const MANIFEST: &str = "manifest.txt";
    const PARAMS: &str = "params.bin";

    /// Write the given stores under `dir`, prefixing entry names.
    pub fn save(dir: &Path, stores: &[(&str, &ParamStore)]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let mut blob: Vec<u8> = Vec::new();
        for (prefix, store) in stores {
            for (name, tensor) in store.iter() {
                manifest.push_str(prefix);
                manifest.push('.');
                manifest.push_str(name);
                for d in tensor.shape() {
                    manifest.push(' ');
                    manifest.push_str(&d.to_string());
                }
                manifest.push('\n');
                for &v in tensor.data() {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        fs::write(dir.join(PARAMS), blob)?;
        Ok(())
    }

    /// Read a checkpoint back into mirrored stores. Every manifest entry
    /// must match an existing parameter by prefixed name and shape.
    pub fn load_into(dir: &Path, stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let blob = fs::read(dir.join(PARAMS))?;
        let mut offset = 0usize;
        let mut seen = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let full = fields.next().ok_or_else(|| {
                Error::Checkpoint(format!("manifest line {} is empty", lineno + 1))
            })?;
            let shape: Vec<usize> = fields
                .map(|f| {
                    f.parse::<usize>().map_err(|_| {
                        Error::Checkpoint(format!("bad dimension {f:?} on line {}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let end = offset + numel * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "params.bin truncated at {full} (need {end} bytes, have {})",
                    blob.len()
                )));
            }
            let data: Vec<f64> = blob[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            offset = end;
            let (prefix, name) = full.split_once('.').ok_or_else(|| {
                Error::Checkpoint(format!("unprefixed checkpoint entry {full}"))
            })?;
            let store = stores
                .iter_mut()
                .find(|(p, _)| *p == prefix)
                .map(|(_, s)| s)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("no store for checkpoint prefix {prefix}"))
                })?;
            let tensor = Tensor::from_vec(shape, data)
                .map_err(|e| Error::Checkpoint(format!("{full}: {e}")))?;
            store
                .set(name, tensor)
                .map_err(|e| Error::Checkpoint(format!("{full}: {e}")))?;
            seen += 1;
        }
        if offset != blob.len() {
            return Err(Error::Checkpoint(format!(
                "params.bin has {} trailing bytes",
                blob.len() - offset
            )));
        }
        let expected: usize = stores.iter().map(|(_, s)| s.len()).sum();
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {seen} of {expected} parameters"
            )));
        }
        Ok(())
    }
}
