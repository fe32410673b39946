use std::sync::Arc;

use indexmap::IndexMap;

use crate::checkpoint::{Checkpoint, LayerSelector, TaskVector, Tensor};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Per-method accumulator carried between steps.
#[derive(Clone, Debug, Default)]
pub enum MethodScratch {
    #[default]
    None,
    /// Running TIES / MagMax task vector.
    Accumulator(TaskVector),
}

/// Evolving merged model.
///
/// Selected layers are tracked in `f64` (`merged` and the cached cumulative
/// update `merged − base`); everything else lives in `passthrough` as stored
/// `f32` tensors and is only touched by methods that merge whole checkpoints.
#[derive(Clone, Debug)]
pub struct MergeState {
    base: Arc<Checkpoint>,
    base_layers: Arc<IndexMap<String, DenseMatrix>>,
    merged: IndexMap<String, DenseMatrix>,
    cumulative: TaskVector,
    passthrough: Checkpoint,
    step_index: usize,
    pub scratch: MethodScratch,
}

impl MergeState {
    /// State at step 0: merged = θ_0.
    pub fn new(base: Checkpoint, sel: &LayerSelector) -> Result<Self> {
        let names = sel.select(&base);
        let mut base_layers = IndexMap::with_capacity(names.len());
        for name in names {
            let m = base.matrix(&name)?;
            base_layers.insert(name, m);
        }
        let cumulative = TaskVector {
            layers: base_layers
                .iter()
                .map(|(k, m)| (k.clone(), DenseMatrix::zeros(m.rows(), m.cols())))
                .collect(),
            base_id: base.model_id().to_string(),
        };
        Ok(Self {
            merged: base_layers.clone(),
            base_layers: Arc::new(base_layers),
            passthrough: base.clone(),
            base: Arc::new(base),
            cumulative,
            step_index: 0,
            scratch: MethodScratch::None,
        })
    }

    /// `θ_1^merged = θ_1` on every tensor.
    pub fn initialized_with(&self, theta_1: &Checkpoint) -> Result<Self> {
        self.ensure_compatible(theta_1)?;
        let mut next = self.clone();
        for (name, slot) in next.merged.iter_mut() {
            *slot = theta_1.matrix(name)?;
        }
        for (name, slot) in next.cumulative.layers.iter_mut() {
            *slot = next.merged[name].sub(&self.base_layers[name]);
        }
        next.passthrough = theta_1.clone();
        next.passthrough.meta_mut().clone_from(self.base.meta());
        next.step_index = self.step_index + 1;
        Ok(next)
    }

    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn base_layer(&self, name: &str) -> &DenseMatrix {
        &self.base_layers[name]
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.base_layers.keys().map(String::as_str)
    }

    pub fn merged_layer(&self, name: &str) -> Option<&DenseMatrix> {
        self.merged.get(name)
    }

    pub fn merged_layers(&self) -> &IndexMap<String, DenseMatrix> {
        &self.merged
    }

    /// `τ̃_{≤t} = θ_t^merged − θ_0` on the selected layers.
    pub fn cumulative(&self) -> &TaskVector {
        &self.cumulative
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn passthrough(&self) -> &Checkpoint {
        &self.passthrough
    }

    pub(crate) fn passthrough_mut(&mut self) -> &mut Checkpoint {
        &mut self.passthrough
    }

    /// Task vector of `theta_t` over this state's selected layers.
    pub fn task_vector(&self, theta_t: &Checkpoint) -> Result<TaskVector> {
        self.ensure_compatible(theta_t)?;
        let mut tv = TaskVector::new(self.base.model_id());
        for (name, base) in self.base_layers.iter() {
            tv.layers.insert(name.clone(), theta_t.matrix(name)?.sub(base));
        }
        Ok(tv)
    }

    /// θ_t must carry every tensor of θ_0 with the same shape.
    pub fn ensure_compatible(&self, theta_t: &Checkpoint) -> Result<()> {
        for (name, t) in self.base.tensors() {
            match theta_t.get(name) {
                None => {
                    return Err(Error::IncompatibleCheckpoints(format!(
                        "tensor {name:?} missing from task checkpoint"
                    )))
                }
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::IncompatibleCheckpoints(format!(
                        "tensor {name:?}: shape {:?} vs base {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Next state with the given cumulative update on the selected layers.
    pub(crate) fn advance(&self, cumulative: IndexMap<String, DenseMatrix>) -> Result<Self> {
        let mut next = self.clone();
        for (name, delta) in cumulative {
            let base = self
                .base_layers
                .get(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoints(format!("layer {name:?} is not selected")))?;
            if base.shape() != delta.shape() {
                return Err(Error::IncompatibleCheckpoints(format!(
                    "layer {name:?}: update shape {:?} vs {:?}",
                    delta.shape(),
                    base.shape()
                )));
            }
            next.merged.insert(name.clone(), base.add(&delta));
            next.cumulative.layers.insert(name, delta);
        }
        next.step_index += 1;
        Ok(next)
    }

    /// Materialize the merged checkpoint (selected layers rounded to `f32`).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut out = self.passthrough.clone();
        for (name, m) in &self.merged {
            out.replace_tensor(name, Tensor::from_matrix(m));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_and_advance_keep_cumulative_consistent() {
        let base = Checkpoint::new()
            .with_tensor("l.weight", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap()
            .with_tensor("l.norm", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let theta = Checkpoint::new()
            .with_tensor("l.weight", Tensor::new(vec![1, 2], vec![3.0, 2.5]).unwrap())
            .unwrap()
            .with_tensor("l.norm", Tensor::new(vec![2], vec![0.5, 1.0]).unwrap())
            .unwrap();
        let s0 = MergeState::new(base.clone(), &LayerSelector::default()).unwrap();
        assert_eq!(s0.step_index(), 0);
        assert_eq!(s0.to_checkpoint(), base);
        let s1 = s0.initialized_with(&theta).unwrap();
        assert_eq!(s1.step_index(), 1);
        assert_eq!(s1.to_checkpoint(), theta);
        assert_eq!(s1.cumulative().layers["l.weight"].as_slice(), &[2.0, 0.5]);

        let upd: IndexMap<_, _> = [(
            "l.weight".to_string(),
            DenseMatrix::from_vec(1, 2, vec![0.25, -1.0]).unwrap(),
        )]
        .into_iter()
        .collect();
        let s2 = s1.advance(upd).unwrap();
        assert_eq!(s2.step_index(), 2);
        assert_eq!(s2.merged_layer("l.weight").unwrap().as_slice(), &[1.25, 1.0]);
    }
}
