// SPDX-License-Identifier: MIT OR Apache-2.0

//! `.salv` named-tensor container and the typed dataset views built on it.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! "SALV"                      magic, 4 bytes
//! u32 version                 currently 1
//! u32 entry_count
//! entry_count × {
//!     u16 name_len, name bytes (ASCII, non-empty, unique)
//!     u8 ndim, ndim × u64 dim
//!     product(dims) × f32 payload, row-major
//! }
//! u64 manifest_len, manifest bytes (UTF-8 JSON)
//! ```
//!
//! Dataset bundles carry `activations` (N×M), `labels` (N, stored as
//! integral f32), `head_weight` (C×M), `head_bias` (C) and a manifest with a
//! `class_names` array. Optional `train_activations` / `train_labels` hold a
//! second split; `feature_maps` / `gradfam_grads` feed saliency maps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SALV";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "salv";

pub const ACTIVATIONS: &str = "activations";
pub const LABELS: &str = "labels";
pub const HEAD_WEIGHT: &str = "head_weight";
pub const HEAD_BIAS: &str = "head_bias";
pub const TRAIN_ACTIVATIONS: &str = "train_activations";
pub const TRAIN_LABELS: &str = "train_labels";
pub const FEATURE_MAPS: &str = "feature_maps";
pub const GRADFAM_GRADS: &str = "gradfam_grads";

/// One named, shaped tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn from_vector(v: &[f32]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Interprets a 2-D tensor as a matrix (a 1-D tensor becomes one row).
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            [c] => Matrix::from_vec(1, *c, self.data.clone()),
            s => Err(Error::Shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}

/// Ordered collection of named tensors plus a JSON manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle {
    pub version: u32,
    entries: Vec<(String, Tensor)>,
    pub manifest: String,
}

impl Default for TensorBundle {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorBundle {
    pub fn new() -> Self {
        Self {
            version: VERSION,
            entries: Vec::new(),
            manifest: "{}".to_owned(),
        }
    }

    pub fn with_manifest(manifest: &Value) -> Self {
        Self {
            manifest: manifest.to_string(),
            ..Self::new()
        }
    }

    /// Appends an entry without checking for duplicates; use
    /// [`TensorBundle::insert`] for the checked form. Duplicates are caught
    /// by [`write_bundle`].
    pub fn push_unchecked(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    /// Adds an entry, replacing any existing entry of the same name in place.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        check_name(&name)?;
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = tensor,
            None => self.entries.push((name, tensor)),
        }
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.insert(name, Tensor::from_matrix(m))
    }

    pub fn insert_vector(&mut self, name: &str, v: &[f32]) -> Result<()> {
        self.insert(name, Tensor::from_vector(v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Schema(format!("missing entry \"{name}\"")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest_json(&self) -> Result<Value> {
        Ok(serde_json::from_str(&self.manifest)?)
    }

    pub fn set_manifest(&mut self, manifest: &Value) {
        self.manifest = manifest.to_string();
    }

    /// Checks every bundle invariant.
    pub fn validate(&self) -> Result<()> {
        for (i, (name, t)) in self.entries.iter().enumerate() {
            check_name(name)?;
            if self.entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Format(format!("duplicate entry name \"{name}\"")));
            }
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("entry \"{name}\" has too many dims")));
            }
            if element_count(&t.shape)? != t.data.len() {
                return Err(Error::Format(format!(
                    "entry \"{name}\": shape {:?} does not match {} values",
                    t.shape,
                    t.data.len()
                )));
            }
        }
        serde_json::from_str::<Value>(&self.manifest)
            .map_err(|e| Error::Format(format!("manifest is not JSON: {e}")))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_bundle(self, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        parse(&bytes)
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.is_ascii() || name.len() > u16::MAX as usize {
        return Err(Error::Format(format!(
            "entry name {name:?} must be non-empty ASCII of at most 65535 bytes"
        )));
    }
    Ok(())
}

/// Serializes `bundle` in the `.salv` layout. Invariants are checked before
/// any byte is written.
pub fn write_bundle<W: Write>(bundle: &TensorBundle, mut sink: W) -> Result<()> {
    bundle.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&bundle.version.to_le_bytes());
    buf.extend_from_slice(&(bundle.entries.len() as u32).to_le_bytes());
    for (name, t) in &bundle.entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(bundle.manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(bundle.manifest.as_bytes());
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

/// Parses a `.salv` stream, validating every invariant.
pub fn read_bundle<R: Read>(mut source: R) -> Result<TensorBundle> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated stream while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<TensorBundle> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")?;
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
            .map_err(|_| Error::Format(format!("entry {i} name is not UTF-8")))?
            .to_owned();
        check_name(&name)?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate entry name \"{name}\"")));
        }
        let ndim = cur.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| {
                Error::Format(format!("entry \"{name}\": dimension {d} too large"))
            })?);
        }
        let n = element_count(&shape)?;
        let payload_len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("entry \"{name}\" payload overflows")))?;
        let payload = cur.take(payload_len, &format!("payload of \"{name}\""))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor { shape, data }));
    }
    let manifest_len = usize::try_from(cur.u64("manifest length")?)
        .map_err(|_| Error::Format("manifest length too large".into()))?;
    let manifest = std::str::from_utf8(cur.take(manifest_len, "manifest")?)
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?
        .to_owned();
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after manifest",
            bytes.len() - cur.pos
        )));
    }
    let bundle = TensorBundle {
        version,
        entries,
        manifest,
    };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Typed views
// ---------------------------------------------------------------------------

/// Penultimate-layer activations with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl ActivationDataset {
    pub fn new(x: Matrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} activation rows",
                labels.len(),
                x.rows()
            )));
        }
        let c = class_names.len();
        if let Some((n, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!(
                "label {l} of sample {n} out of range for {c} classes"
            )));
        }
        Ok(Self {
            x,
            labels,
            class_names,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Sample indices with the given label, ascending.
    pub fn indices_of_class(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Final linear classification layer `logits = W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w: Matrix,
    pub b: Vec<f32>,
}

impl HeadWeights {
    pub fn new(w: Matrix, b: Vec<f32>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::Data(format!(
                "head bias length {} does not match {} weight rows",
                b.len(),
                w.rows()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head bias".into()));
        }
        Ok(Self { w, b })
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn num_features(&self) -> usize {
        self.w.cols()
    }

    /// Writes `head_weight` / `head_bias` into `bundle`, replacing any
    /// existing head.
    pub fn store(&self, bundle: &mut TensorBundle) -> Result<()> {
        bundle.insert_matrix(HEAD_WEIGHT, &self.w)?;
        bundle.insert_vector(HEAD_BIAS, &self.b)
    }
}

fn labels_from_tensor(t: &Tensor, name: &str) -> Result<Vec<usize>> {
    let n = match t.shape.as_slice() {
        [n] | [n, 1] => *n,
        s => return Err(Error::Data(format!("\"{name}\" must be 1-D, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(n);
    for (i, &v) in t.data.iter().enumerate() {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
            return Err(Error::Data(format!(
                "\"{name}\"[{i}] = {v} is not a non-negative integer"
            )));
        }
        out.push(v as usize);
    }
    Ok(out)
}

fn matrix_entry(bundle: &TensorBundle, name: &str) -> Result<Matrix> {
    let t = bundle.require(name)?;
    match t.shape.as_slice() {
        [r, c] => Matrix::from_vec(*r, *c, t.data.clone()).map_err(|e| match e {
            Error::NonFinite(m) => Error::Data(format!("\"{name}\": non-finite value, {m}")),
            other => other,
        }),
        s => Err(Error::Data(format!("\"{name}\" must be 2-D, got {s:?}"))),
    }
}

/// Class names from the manifest's `class_names` array.
pub fn class_names(bundle: &TensorBundle) -> Result<Vec<String>> {
    let manifest = bundle
        .manifest_json()
        .map_err(|e| Error::Schema(format!("manifest: {e}")))?;
    let names = manifest
        .get("class_names")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema("manifest has no \"class_names\" array".into()))?;
    names
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::Schema("class_names must be strings".into()))
        })
        .collect()
}

fn dataset_from(
    bundle: &TensorBundle,
    x_name: &str,
    labels_name: &str,
    names: Vec<String>,
) -> Result<ActivationDataset> {
    let x = matrix_entry(bundle, x_name)?;
    let labels = labels_from_tensor(bundle.require(labels_name)?, labels_name)?;
    ActivationDataset::new(x, labels, names)
}

/// Typed, cross-checked view of a dataset bundle.
pub fn validate_dataset(bundle: &TensorBundle) -> Result<(ActivationDataset, HeadWeights)> {
    for name in [ACTIVATIONS, LABELS, HEAD_WEIGHT, HEAD_BIAS] {
        bundle.require(name)?;
    }
    let names = class_names(bundle)?;
    let dataset = dataset_from(bundle, ACTIVATIONS, LABELS, names)?;
    let head = validate_head(bundle)?;
    if head.num_features() != dataset.num_features() {
        return Err(Error::Data(format!(
            "head_weight has {} columns but activations have {}",
            head.num_features(),
            dataset.num_features()
        )));
    }
    if head.num_classes() != dataset.num_classes() {
        return Err(Error::Data(format!(
            "head_weight has {} rows but manifest names {} classes",
            head.num_classes(),
            dataset.num_classes()
        )));
    }
    Ok((dataset, head))
}

/// Reads only the head entries.
pub fn validate_head(bundle: &TensorBundle) -> Result<HeadWeights> {
    let w = matrix_entry(bundle, HEAD_WEIGHT)?;
    let b = bundle.require(HEAD_BIAS)?;
    if b.shape.len() != 1 {
        return Err(Error::Data(format!(
            "\"{HEAD_BIAS}\" must be 1-D, got {:?}",
            b.shape
        )));
    }
    HeadWeights::new(w, b.data.clone()).map_err(|e| match e {
        Error::NonFinite(m) => Error::Data(format!("non-finite {m}")),
        other => other,
    })
}

/// The optional training split, if the bundle carries one.
pub fn train_split(bundle: &TensorBundle) -> Result<Option<ActivationDataset>> {
    if bundle.get(TRAIN_ACTIVATIONS).is_none() {
        return Ok(None);
    }
    let names = class_names(bundle)?;
    dataset_from(bundle, TRAIN_ACTIVATIONS, TRAIN_LABELS, names).map(Some)
}

/// Stores a dataset under the given entry names.
pub fn store_dataset(
    bundle: &mut TensorBundle,
    dataset: &ActivationDataset,
    x_name: &str,
    labels_name: &str,
) -> Result<()> {
    bundle.insert_matrix(x_name, &dataset.x)?;
    let labels: Vec<f32> = dataset.labels.iter().map(|&l| l as f32).collect();
    bundle.insert_vector(labels_name, &labels)
}
