//! Named parameter storage.
//!
//! A store is saved as two files: a rank-1 DTEN payload holding every
//! parameter back to back, and a JSON manifest (`<stem>.json`) listing
//! each entry's name, shape and offset, plus an optional model config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dten::DtenArray;
use crate::error::{Error, Result};
use crate::tensor::Kernel;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    entries: Vec<ManifestEntry>,
}

/// Layer path -> parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    params: BTreeMap<String, Param>,
    /// Model description stored alongside the weights.
    pub config: Option<serde_json::Value>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("{name}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.params.insert(name.clone(), Param { shape, data }).is_some() {
            return Err(Error::Config(format!("duplicate weight entry {name}")));
        }
        Ok(())
    }

    pub fn insert_kernel(&mut self, path: &str, k: &Kernel) -> Result<()> {
        self.insert(format!("{path}.weight"), k.shape().to_vec(), k.data().to_vec())?;
        if let Some(b) = k.bias() {
            self.insert(format!("{path}.bias"), vec![b.len()], b.to_vec())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight entry {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let p = self.get(name)?;
        if p.shape != [len] {
            return Err(Error::Config(format!("{name}: expected [{len}], found {:?}", p.shape)));
        }
        Ok(p.data.clone())
    }

    /// `path.weight` of shape `(out, in, r, r)` and optional `path.bias`.
    pub fn kernel(&self, path: &str, shape: [usize; 4]) -> Result<Kernel> {
        let w = self.get(&format!("{path}.weight"))?;
        if w.shape != shape {
            return Err(Error::Config(format!("{path}.weight: expected {shape:?}, found {:?}", w.shape)));
        }
        let bias_name = format!("{path}.bias");
        let bias = if self.params.contains_key(&bias_name) {
            Some(self.vector(&bias_name, shape[0])?)
        } else {
            None
        };
        Kernel::new(shape, w.data.clone(), bias)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::with_capacity(self.params.len());
        let mut flat = Vec::new();
        for (name, p) in &self.params {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                offset: flat.len(),
            });
            flat.extend_from_slice(&p.data);
        }
        DtenArray::new(vec![flat.len()], flat)?.save(path)?;
        let manifest = Manifest { config: self.config.clone(), entries };
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let flat = DtenArray::load(path)?;
        if flat.dims.len() != 1 {
            return Err(Error::Format(format!("weight payload must be rank 1, got {:?}", flat.dims)));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
        let mut store = Self { params: BTreeMap::new(), config: manifest.config };
        for e in manifest.entries {
            let len: usize = e.shape.iter().product();
            let data = flat
                .data
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Format(format!("{} lies outside the payload", e.name)))?;
            store.insert(e.name, e.shape, data.to_vec())?;
        }
        Ok(store)
    }

    /// Fails unless `used` names exactly the stored entries.
    pub fn check_exact(&self, used: &[String]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for u in used {
            if !self.params.contains_key(u) {
                return Err(Error::Config(format!("missing weight entry {u}")));
            }
            if !seen.insert(u.as_str()) {
                return Err(Error::Config(format!("weight entry {u} resolved twice")));
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::Config(format!("unused weight entry {extra}")));
        }
        Ok(())
    }
}

/// Gaussian matrix orthogonalized by QR: rows orthonormal when
/// `rows <= cols`, columns orthonormal otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f32) -> Vec<f32> {
    let (tall_rows, tall_cols) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(tall_rows, tall_cols, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // fix signs so the distribution is uniform over orthogonal matrices
    let r = qr.r();
    for j in 0..tall_cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v as f32;
        }
    }
    out
}

/// Orthogonal convolution kernel over the flattened `(in, r, r)` fan-in.
pub fn orthogonal_kernel<R: Rng + ?Sized>(rng: &mut R, out_c: usize, in_c: usize, r: usize, gain: f32) -> Result<Kernel> {
    let data = orthogonal(rng, out_c, in_c * r * r, gain);
    Kernel::new([out_c, in_c, r, r], data, None)
}
