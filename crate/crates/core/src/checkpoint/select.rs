use glob::Pattern;
use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::error::{Error, Result};

pub const DEFAULT_EXCLUDES: [&str; 4] = ["*embed*", "*head*", "*classifier*", "*norm*"];

/// Picks the mergeable layers of a checkpoint: 2-D tensors whose name matches
/// an include glob and no exclude glob, in checkpoint order.
#[derive(Clone, Debug)]
pub struct LayerSelector {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelectorSpec {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

impl Default for LayerSelectorSpec {
    fn default() -> Self {
        Self {
            include: vec!["*".into()],
            exclude: DEFAULT_EXCLUDES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LayerSelector {
    pub fn new<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self> {
        let compile = |pats: &[S]| -> Result<Vec<Pattern>> {
            pats.iter()
                .map(|p| {
                    Pattern::new(p.as_ref())
                        .map_err(|e| Error::InvalidConfig(format!("bad layer pattern {:?}: {e}", p.as_ref())))
                })
                .collect()
        };
        Ok(Self {
            include: compile(include)?,
            exclude: compile(exclude)?,
        })
    }

    pub fn from_spec(spec: &LayerSelectorSpec) -> Result<Self> {
        Self::new(&spec.include, &spec.exclude)
    }

    /// Every 2-D tensor, nothing excluded.
    pub fn all_matrices() -> Self {
        Self::new(&["*"], &[] as &[&str]).expect("static pattern")
    }

    pub fn matches(&self, name: &str) -> bool {
        self.include.iter().any(|p| p.matches(name)) && !self.exclude.iter().any(|p| p.matches(name))
    }

    pub fn select(&self, c: &Checkpoint) -> Vec<String> {
        c.tensors()
            .filter(|(name, t)| t.is_matrix() && self.matches(name))
            .map(|(name, _)| name.to_string())
            .collect()
    }
}

impl Default for LayerSelector {
    fn default() -> Self {
        Self::from_spec(&LayerSelectorSpec::default()).expect("static patterns")
    }
}
