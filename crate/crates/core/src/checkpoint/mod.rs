//! Checkpoint container, task vectors and layer selection.
//!
//! Checkpoints store `f32` payloads; everything that does arithmetic on them
//! converts to `f64` [`DenseMatrix`] first and only rounds back at the
//! storage boundary.

mod ntc1;
mod select;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub use ntc1::{load_checkpoint, read_checkpoint, save_checkpoint, write_atomic, write_checkpoint, MAGIC};
pub use select::{LayerSelector, LayerSelectorSpec, DEFAULT_EXCLUDES};

pub const META_KEY: &str = "__meta__";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected =
            element_count(&shape).ok_or_else(|| Error::InvalidInput(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape).expect("shape overflows");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Widen a 2-D tensor to `f64`.
    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        if !self.is_matrix() {
            return Err(Error::InvalidInput(format!(
                "tensor of shape {:?} is not 2-D",
                self.shape
            )));
        }
        DenseMatrix::from_vec(
            self.shape[0],
            self.shape[1],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// SHA-256 of the little-endian payload, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_le_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub(crate) fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Format("empty tensor name".into()));
    }
    if name.contains('\0') {
        return Err(Error::Format(format!("tensor name {name:?} contains NUL")));
    }
    if name == META_KEY {
        return Err(Error::Format(format!("tensor name {META_KEY:?} is reserved")));
    }
    Ok(())
}

/// Ordered map of named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor. Names must be unique, non-empty and NUL-free.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn with_tensor(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
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

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn model_id(&self) -> &str {
        self.meta.get("model_id").map_or("", String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        self.get(name)
            .ok_or_else(|| Error::IncompatibleCheckpoints(format!("missing tensor {name:?}")))?
            .to_matrix()
    }

    /// Replace an existing 2-D tensor, rounding to `f32`.
    pub fn set_matrix(&mut self, name: &str, m: &DenseMatrix) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::IncompatibleCheckpoints(format!("unknown tensor {name:?}")))?;
        if slot.shape() != [m.rows(), m.cols()] {
            return Err(Error::IncompatibleCheckpoints(format!(
                "tensor {name:?}: shape {:?} vs update {:?}",
                slot.shape(),
                m.shape()
            )));
        }
        *slot = Tensor::from_matrix(m);
        Ok(())
    }

    pub(crate) fn replace_tensor(&mut self, name: &str, t: Tensor) {
        if let Some(slot) = self.tensors.get_mut(name) {
            *slot = t;
        }
    }

    /// Same names, order and shapes.
    pub fn same_layout(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape == t2.shape)
    }
}

/// Per-layer parameter delta `θ_t − θ_0` in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub layers: IndexMap<String, DenseMatrix>,
    pub base_id: String,
}

impl TaskVector {
    pub fn new(base_id: impl Into<String>) -> Self {
        Self {
            layers: IndexMap::new(),
            base_id: base_id.into(),
        }
    }

    pub fn zeros_like(other: &TaskVector) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|(k, m)| (k.clone(), DenseMatrix::zeros(m.rows(), m.cols())))
                .collect(),
            base_id: other.base_id.clone(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&DenseMatrix> {
        self.layers.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.layers.values().map(DenseMatrix::frobenius_norm_sq).sum()
    }

    /// Check that `other` has the same layer names and shapes.
    pub fn ensure_compatible(&self, other: &TaskVector) -> Result<()> {
        for (name, m) in &self.layers {
            match other.layers.get(name) {
                None => {
                    return Err(Error::IncompatibleCheckpoints(format!(
                        "layer {name:?} missing from task vector"
                    )))
                }
                Some(o) if o.shape() != m.shape() => {
                    return Err(Error::IncompatibleCheckpoints(format!(
                        "layer {name:?}: shape {:?} vs {:?}",
                        m.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        if other.layers.len() != self.layers.len() {
            return Err(Error::IncompatibleCheckpoints(
                "task vectors cover different layer sets".into(),
            ));
        }
        Ok(())
    }

    /// Apply `f` layer by layer against a compatible task vector.
    pub fn zip_map(
        &self,
        other: &TaskVector,
        f: impl Fn(&DenseMatrix, &DenseMatrix) -> DenseMatrix,
    ) -> Result<TaskVector> {
        self.ensure_compatible(other)?;
        Ok(TaskVector {
            layers: self
                .layers
                .iter()
                .map(|(k, a)| (k.clone(), f(a, &other.layers[k])))
                .collect(),
            base_id: self.base_id.clone(),
        })
    }
}

/// `τ_t = θ_t − θ_0` on the layers `sel` picks from `θ_0`.
pub fn compute_task_vector(theta_t: &Checkpoint, theta_0: &Checkpoint, sel: &LayerSelector) -> Result<TaskVector> {
    let mut tv = TaskVector::new(theta_0.model_id());
    for name in sel.select(theta_0) {
        let base = &theta_0.tensors[&name];
        let tuned = theta_t
            .get(&name)
            .ok_or_else(|| Error::IncompatibleCheckpoints(format!("layer {name:?} missing from task checkpoint")))?;
        if tuned.shape() != base.shape() {
            return Err(Error::IncompatibleCheckpoints(format!(
                "layer {name:?}: task shape {:?} vs base shape {:?}",
                tuned.shape(),
                base.shape()
            )));
        }
        let delta = tuned.to_matrix()?.sub(&base.to_matrix()?);
        tv.layers.insert(name, delta);
    }
    Ok(tv)
}

/// `W ← W + ΔW` on the named layers; every other tensor is copied.
pub fn apply_update(state: &Checkpoint, layer_updates: &IndexMap<String, DenseMatrix>) -> Result<Checkpoint> {
    let mut out = state.clone();
    for (name, delta) in layer_updates {
        let w = state
            .get(name)
            .ok_or_else(|| Error::IncompatibleCheckpoints(format!("unknown layer {name:?}")))?
            .to_matrix()
            .map_err(|e| Error::IncompatibleCheckpoints(format!("layer {name:?}: {e}")))?;
        if w.shape() != delta.shape() {
            return Err(Error::IncompatibleCheckpoints(format!(
                "layer {name:?}: shape {:?} vs update {:?}",
                w.shape(),
                delta.shape()
            )));
        }
        out.set_matrix(name, &w.add(delta))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (n, s, d) in entries {
            c.insert(*n, Tensor::new(s.clone(), d.clone()).unwrap()).unwrap();
        }
        c
    }

    #[test]
    fn task_vector_examples() {
        let sel = LayerSelector::default();
        let t0 = ckpt(&[("fc.weight", vec![1, 1], vec![1.0])]);
        let t1 = ckpt(&[("fc.weight", vec![1, 1], vec![4.0])]);
        let tv = compute_task_vector(&t1, &t0, &sel).unwrap();
        assert_eq!(tv.layers["fc.weight"].as_slice(), &[3.0]);

        let same = compute_task_vector(&t0, &t0, &sel).unwrap();
        assert_eq!(same.layers["fc.weight"].as_slice(), &[0.0]);
    }

    #[test]
    fn task_vector_shape_mismatch_names_layer() {
        let sel = LayerSelector::default();
        let t0 = ckpt(&[("blk.w", vec![3, 4], vec![0.0; 12])]);
        let t1 = ckpt(&[("blk.w", vec![4, 3], vec![0.0; 12])]);
        let err = compute_task_vector(&t1, &t0, &sel).unwrap_err();
        match err {
            Error::IncompatibleCheckpoints(m) => assert!(m.contains("blk.w")),
            e => panic!("unexpected {e:?}"),
        }
        let missing = ckpt(&[("other", vec![3, 4], vec![0.0; 12])]);
        assert!(matches!(
            compute_task_vector(&missing, &t0, &sel),
            Err(Error::IncompatibleCheckpoints(_))
        ));
    }

    #[test]
    fn apply_update_examples() {
        let base = ckpt(&[
            ("a.weight", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("a.norm", vec![2], vec![1.0, 1.0]),
        ]);
        assert_eq!(apply_update(&base, &IndexMap::new()).unwrap(), base);

        let theta = ckpt(&[
            ("a.weight", vec![2, 2], vec![1.5, 2.25, -3.0, 0.125]),
            ("a.norm", vec![2], vec![1.0, 1.0]),
        ]);
        let back: IndexMap<_, _> = [(
            "a.weight".to_string(),
            theta
                .matrix("a.weight")
                .unwrap()
                .sub(&base.matrix("a.weight").unwrap())
                .scale(-1.0),
        )]
        .into_iter()
        .collect();
        assert_eq!(apply_update(&theta, &back).unwrap(), base);

        let bogus: IndexMap<_, _> = [("nope".to_string(), DenseMatrix::zeros(2, 2))].into_iter().collect();
        assert!(matches!(
            apply_update(&base, &bogus),
            Err(Error::IncompatibleCheckpoints(_))
        ));
    }

    #[test]
    fn names_are_validated() {
        let mut c = Checkpoint::new();
        assert!(c.insert("", Tensor::zeros(vec![1])).is_err());
        assert!(c.insert("a\0b", Tensor::zeros(vec![1])).is_err());
        assert!(c.insert(META_KEY, Tensor::zeros(vec![1])).is_err());
        c.insert("x", Tensor::zeros(vec![1])).unwrap();
        assert!(c.insert("x", Tensor::zeros(vec![1])).is_err());
    }
}
