//! Data-free continual model merging.
//!
//! Sequentially arriving fine-tuned checkpoints are fused into one backbone
//! by filtering each task vector against the null space of what has already
//! been merged, adapting the filtered update with a low-rank correction under
//! a data-free objective, and adding the result layer by layer. Baseline merge
//! rules, bound-checking oracles and a synthetic benchmark live alongside.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod nuwa;
pub mod rng;
pub mod state;
pub mod synth;

pub use checkpoint::{Checkpoint, LayerSelector, LayerSelectorSpec, TaskVector, Tensor};
pub use error::{Error, Result};
pub use indexmap::IndexMap;
pub use linalg::{DenseMatrix, OrthonormalBasis, SvdResult};
pub use merge::{merge_sequence, MethodId, MethodParams, SequentialMerger, StepLog};
pub use nuwa::{Ablation, NuwaConfig};
pub use state::MergeState;
