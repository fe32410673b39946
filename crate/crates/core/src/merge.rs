//! Sequential driver shared by every merge method.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{magmax_step, opcm_step, ta_step, ties_step, wa_step, wudi_step, AccumulatorUpdate};
use crate::checkpoint::{Checkpoint, LayerSelector};
use crate::error::{Error, Result};
use crate::nuwa::{nuwa_step, Ablation, LayerLog, NuwaConfig};
use crate::state::MergeState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Nuwa,
    NuwaNullOnly,
    NuwaLoraOnly,
    Naive,
    Wa,
    Ta,
    Ties,
    Magmax,
    Opcm,
    Wudi,
}

impl MethodId {
    pub const ALL: [MethodId; 10] = [
        MethodId::Nuwa,
        MethodId::NuwaNullOnly,
        MethodId::NuwaLoraOnly,
        MethodId::Naive,
        MethodId::Wa,
        MethodId::Ta,
        MethodId::Ties,
        MethodId::Magmax,
        MethodId::Opcm,
        MethodId::Wudi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Nuwa => "nuwa",
            MethodId::NuwaNullOnly => "nuwa_null_only",
            MethodId::NuwaLoraOnly => "nuwa_lora_only",
            MethodId::Naive => "naive",
            MethodId::Wa => "wa",
            MethodId::Ta => "ta",
            MethodId::Ties => "ties",
            MethodId::Magmax => "magmax",
            MethodId::Opcm => "opcm",
            MethodId::Wudi => "wudi",
        }
    }

    /// Ablation used when this id runs through the null-space engine.
    pub fn ablation(self) -> Option<Ablation> {
        match self {
            MethodId::Nuwa => Some(Ablation::Full),
            MethodId::NuwaNullOnly => Some(Ablation::NullSpaceOnly),
            MethodId::NuwaLoraOnly => Some(Ablation::LoraOnly),
            MethodId::Naive => Some(Ablation::Naive),
            _ => None,
        }
    }

    /// The engine id for an ablation mode.
    pub fn from_ablation(a: Ablation) -> Self {
        match a {
            Ablation::Full => MethodId::Nuwa,
            Ablation::NullSpaceOnly => MethodId::NuwaNullOnly,
            Ablation::LoraOnly => MethodId::NuwaLoraOnly,
            Ablation::Naive => MethodId::Naive,
        }
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyper-parameters for every method; each method reads its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    pub nuwa: NuwaConfig,
    pub ta_lambda: f64,
    pub ties_lambda: f64,
    pub ties_top_k_percent: f64,
    pub magmax_lambda: f64,
    /// Fold TIES / MagMax accumulators into the previous merged weights
    /// instead of the base.
    pub literal_recursive: bool,
    pub opcm_alpha: f64,
    pub opcm_r_proj: usize,
    pub wudi_lr: f64,
    pub wudi_iters: usize,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            nuwa: NuwaConfig::default(),
            ta_lambda: 0.3,
            ties_lambda: 0.3,
            ties_top_k_percent: 20.0,
            magmax_lambda: 0.5,
            literal_recursive: false,
            opcm_alpha: 0.5,
            opcm_r_proj: 128,
            wudi_lr: 1e-5,
            wudi_iters: 50,
        }
    }
}

impl MethodParams {
    fn accumulator_mode(&self) -> AccumulatorUpdate {
        if self.literal_recursive {
            AccumulatorUpdate::LiteralRecursive
        } else {
            AccumulatorUpdate::FromBase
        }
    }
}

/// Record of one merge step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based step number.
    pub step: usize,
    pub method: MethodId,
    pub layer_count: usize,
    /// Per-layer detail; empty for methods that have none to report.
    pub layers: Vec<LayerLog>,
}

/// Folds checkpoints into a merged model one at a time.
#[derive(Clone, Debug)]
pub struct SequentialMerger {
    method: MethodId,
    params: MethodParams,
    state: MergeState,
}

impl SequentialMerger {
    pub fn new(base: Checkpoint, sel: &LayerSelector, method: MethodId, params: MethodParams) -> Result<Self> {
        if method.ablation().is_some() {
            params.nuwa.validate()?;
        }
        Ok(Self {
            method,
            params,
            state: MergeState::new(base, sel)?,
        })
    }

    pub fn method(&self) -> MethodId {
        self.method
    }

    pub fn state(&self) -> &MergeState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.state.step_index()
    }

    pub fn push(&mut self, theta: &Checkpoint) -> Result<StepLog> {
        let step = self.state.step_index() + 1;
        let (next, layers) = self
            .advance(theta, step)
            .map_err(|e| e.context(format!("step {step}")))?;
        self.state = next;
        Ok(StepLog {
            step,
            method: self.method,
            layer_count: self.state.cumulative().layers.len(),
            layers,
        })
    }

    fn advance(&self, theta: &Checkpoint, step: usize) -> Result<(MergeState, Vec<LayerLog>)> {
        let s = &self.state;
        let p = &self.params;
        match self.method {
            MethodId::Wa => Ok((wa_step(s, theta)?, Vec::new())),
            MethodId::Ta => Ok((ta_step(s, &s.task_vector(theta)?, p.ta_lambda)?, Vec::new())),
            MethodId::Ties => {
                let tau = s.task_vector(theta)?;
                let next = ties_step(s, &tau, p.ties_lambda, p.ties_top_k_percent, p.accumulator_mode())?;
                Ok((next, Vec::new()))
            }
            MethodId::Magmax => {
                let tau = s.task_vector(theta)?;
                Ok((magmax_step(s, &tau, p.magmax_lambda, p.accumulator_mode())?, Vec::new()))
            }
            _ if step == 1 => Ok((s.initialized_with(theta)?, Vec::new())),
            MethodId::Opcm => {
                let tau = s.task_vector(theta)?;
                Ok((opcm_step(s, &tau, p.opcm_alpha, p.opcm_r_proj)?, Vec::new()))
            }
            MethodId::Wudi => {
                let tau = s.task_vector(theta)?;
                Ok((wudi_step(s, &tau, p.wudi_lr, p.wudi_iters)?, Vec::new()))
            }
            m => {
                let ablation = m.ablation().expect("engine method");
                let config = p.nuwa.clone().with_ablation(ablation);
                let tau = s.task_vector(theta)?;
                nuwa_step(s, &tau, &config, step)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint()
    }

    pub fn into_state(self) -> MergeState {
        self.state
    }
}

/// Merge `thetas` in order with the null-space engine.
pub fn merge_sequence(
    theta_0: &Checkpoint,
    thetas: &[Checkpoint],
    sel: &LayerSelector,
    config: &NuwaConfig,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    let params = MethodParams {
        nuwa: config.clone(),
        ..MethodParams::default()
    };
    let method = MethodId::from_ablation(config.ablation);
    let mut merger = SequentialMerger::new(theta_0.clone(), sel, method, params)?;
    let mut logs = Vec::with_capacity(thetas.len());
    for theta in thetas {
        logs.push(merger.push(theta)?);
    }
    Ok((merger.to_checkpoint(), logs))
}
