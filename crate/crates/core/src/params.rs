//! Named parameter tensors, parameter groups, gradient maps and the
//! checkpoint format.
//!
//! Every tensor name is `<group>/<path>`, e.g. `cross/block0/v_from_a.wq`.
//! The group prefix is what the training schedule gates on.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adjoints, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Omni-context fusion blocks.
    Ocf,
    /// Masked TTS-to-prompt cross-attention.
    Mtpca,
    Video,
    Audio,
    /// Bidirectional video/audio coupling.
    Cross,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Ocf,
        ParamGroup::Mtpca,
        ParamGroup::Video,
        ParamGroup::Audio,
        ParamGroup::Cross,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Ocf => "ocf",
            ParamGroup::Mtpca => "mtpca",
            ParamGroup::Video => "video",
            ParamGroup::Audio => "audio",
            ParamGroup::Cross => "cross",
        }
    }

    /// Group of a full tensor name.
    pub fn of(name: &str) -> Result<ParamGroup, ParamError> {
        let prefix = name.split('/').next().unwrap_or_default();
        prefix.parse()
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| ParamError::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered collection of named `f64` matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    /// Add every tensor of `other`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) {
        for (k, v) in other.tensors {
            let prev = self.tensors.insert(k.clone(), v);
            assert!(prev.is_none(), "duplicate tensor `{k}`");
        }
    }

    /// Check names and shapes against a reference layout.
    pub fn check_layout(&self, layout: &[(String, (usize, usize))]) -> Result<(), ParamError> {
        for (name, shape) in layout {
            let t = self.get(name).ok_or_else(|| ParamError::MissingTensor(name.clone()))?;
            if t.dim() != *shape {
                return Err(ParamError::ShapeMismatch {
                    name: name.clone(),
                    expected: *shape,
                    found: t.dim(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| !layout.iter().any(|(l, _)| l == n)) {
            return Err(ParamError::UnexpectedTensor(extra.to_string()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.dim())).collect()
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// `fan_in x fan_out` weight with entries uniform in `±1/sqrt(fan_in)`.
pub(crate) fn scaled_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

/// Lazily binds store tensors into a graph as differentiable leaves. Tensors
/// that are never requested never enter the graph and get no gradient.
pub struct Binder<'p> {
    store: &'p ParamStore,
    bound: IndexMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = g.leaf(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, name: &str) -> &Array2<f64> {
        self.store.get(name).expect("parameter missing from store")
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Gradients of every bound tensor that influenced the output.
    pub fn grads(&self, adjoints: &Adjoints) -> GradMap {
        let mut out = GradMap::default();
        for (name, var) in &self.bound {
            if let Some(g) = adjoints.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Gradients keyed by full tensor name. Absent entries are structurally zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradMap(BTreeMap<String, Array2<f64>>);

impl GradMap {
    pub fn insert(&mut self, name: String, grad: Array2<f64>) {
        match self.0.get_mut(&name) {
            Some(acc) => *acc += &grad,
            None => {
                self.0.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.0.remove(name)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str, &Array2<f64>) -> bool) {
        self.0.retain(|k, v| keep(k, v));
    }

    /// Sum another map into this one.
    pub fn accumulate(&mut self, other: GradMap) {
        for (k, v) in other.0 {
            self.insert(k, v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.0.values_mut() {
            *v *= factor;
        }
    }

    /// Largest absolute entry over all tensors of `group`.
    pub fn max_abs_in(&self, group: ParamGroup) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| ParamGroup::of(k).ok() == Some(group))
            .flat_map(|(_, v)| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl FromIterator<(String, Array2<f64>)> for GradMap {
    fn from_iter<I: IntoIterator<Item = (String, Array2<f64>)>>(iter: I) -> Self {
        let mut out = GradMap::default();
        for (k, v) in iter {
            out.insert(k, v);
        }
        out
    }
}

/// Gradients of one scalar with respect to parameters and named inputs. An
/// input that does not influence the scalar has no entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub params: GradMap,
    pub inputs: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    pub(crate) fn collect(p: &Binder<'_>, adjoints: &Adjoints, inputs: &[(&str, Var)]) -> Self {
        let inputs = inputs
            .iter()
            .filter_map(|(name, v)| adjoints.get(*v).map(|g| (name.to_string(), g.clone())))
            .collect();
        Self {
            params: p.grads(adjoints),
            inputs,
        }
    }

    pub fn input(&self, name: &str) -> Option<&Array2<f64>> {
        self.inputs.get(name)
    }
}

const CHECKPOINT_MAGIC: &str = "omnicond-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// JSON header of a checkpoint. The payload that follows is every tensor's
/// data in header order, row-major, as little-endian `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// Free-form model dimensions (e.g. `d`, `layers`) for loader checks.
    pub meta: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Write `[u64 header_len][header JSON][f64 payload]`, all little-endian.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    store: &ParamStore,
    meta: &BTreeMap<String, u64>,
) -> Result<(), ParamError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_MAGIC.to_string(),
        version: 1,
        meta: meta.clone(),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ParamError::Format(e.to_string()))?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in store.iter() {
        for v in t.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, ParamStore), ParamError> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(ParamError::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| ParamError::Format(e.to_string()))?;
    if header.format != CHECKPOINT_MAGIC {
        return Err(ParamError::Format(format!("unexpected format `{}`", header.format)));
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let [rows, cols] = entry.shape;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| ParamError::Format(e.to_string()))?;
        store.insert(entry.name.clone(), t);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ParamError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn group_prefixes() {
        assert_eq!(ParamGroup::of("cross/block0/v_from_a.wq").unwrap(), ParamGroup::Cross);
        assert_eq!(ParamGroup::of("ocf/block1/w_res").unwrap(), ParamGroup::Ocf);
        assert!(matches!(ParamGroup::of("decoder/w"), Err(ParamError::UnknownGroup(g)) if g == "decoder"));
    }

    #[test]
    fn checkpoint_round_trip_and_layout_check() {
        let mut store = ParamStore::new();
        store.insert("ocf/a", array![[1.0, -2.5], [3.25, f64::MIN_POSITIVE]]);
        store.insert("ocf/b", Array2::zeros((0, 3)));
        store.insert("audio/c", array![[0.1, 0.2, 0.3]]);
        let meta: BTreeMap<_, _> = [("d".to_string(), 2u64)].into_iter().collect();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, &meta).unwrap();
        let (header, loaded) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(header.meta["d"], 2);
        assert!(loaded.check_layout(&store.layout()).is_ok());

        let mut wrong = store.layout();
        wrong[0].1 = (3, 2);
        assert!(matches!(
            loaded.check_layout(&wrong),
            Err(ParamError::ShapeMismatch { .. })
        ));

        bytes.push(0);
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(ParamError::Format(_))));
    }

    #[test]
    fn gradmap_accumulates() {
        let mut g = GradMap::default();
        g.insert("audio/w".into(), array![[1.0]]);
        g.insert("audio/w".into(), array![[2.0]]);
        g.insert("cross/w".into(), array![[-4.0]]);
        assert_eq!(g.get("audio/w").unwrap()[[0, 0]], 3.0);
        assert_eq!(g.max_abs_in(ParamGroup::Cross), 4.0);
        assert_eq!(g.max_abs_in(ParamGroup::Video), 0.0);
    }
}
