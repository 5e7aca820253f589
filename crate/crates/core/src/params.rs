//! Named parameter tensors, their binding onto a tape, and checkpoints.
//!
//! A checkpoint is two files: `<stem>.bin` holds every array as consecutive
//! little-endian `f32` values, and `<stem>.json` is the manifest listing
//! `name → shape, offset` plus free-form metadata.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};

const CHECKPOINT_FORMAT: &str = "countocc-params-v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect() }
    }

    /// Order-sensitive hash of the exact bit patterns, for freeze checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (k, v) in &self.params {
            eat(k.as_bytes());
            for x in v.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn save(&self, stem: &Path, metadata: serde_json::Value) -> Result<()> {
        let (bin, manifest_path) = checkpoint_paths(stem);
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let file = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut out = std::io::BufWriter::new(file);
        for (name, value) in &self.params {
            let (r, c) = value.dim();
            entries.push(ManifestEntry { name: name.clone(), shape: [r, c], offset });
            for &v in value.iter() {
                out.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
            }
            offset += r * c;
        }
        out.flush().map_err(|e| Error::io(&bin, e))?;
        let manifest = Manifest { format: CHECKPOINT_FORMAT.to_string(), entries, metadata };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
    }

    /// Loads a checkpoint, returning the parameters and the stored metadata.
    pub fn load(stem: &Path) -> Result<(Self, serde_json::Value)> {
        let (bin, manifest_path) = checkpoint_paths(stem);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format { path: manifest_path, detail: format!("unknown format `{}`", manifest.format) });
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let floats: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut store = ParamStore::new();
        for e in manifest.entries {
            let n = e.shape[0] * e.shape[1];
            let slice = floats.get(e.offset..e.offset + n).ok_or_else(|| Error::Format {
                path: bin.clone(),
                detail: format!("`{}` extends past the end of the data", e.name),
            })?;
            let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), slice.iter().map(|&v| v as f64).collect())
                .expect("shape matches slice length");
            store.insert(e.name, arr);
        }
        Ok((store, manifest.metadata))
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for v in self.params.values_mut() {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Tape leaves for a [`ParamStore`].
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Panics on unknown names: binding and model construction share a layout.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Gradient of every bound parameter (zeros where unused).
    pub fn grads(&self, grads: &Grads) -> ParamStore {
        ParamStore { params: self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect() }
    }
}

/// Uniform `[-bound, bound]` with `bound = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}
