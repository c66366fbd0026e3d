//! Batch-norm bookkeeping shared by every encoder and the adapter.

use std::collections::BTreeMap;

use face_diffcore::nn::{batch_norm, batch_norm2d, BatchMoments, BnStats};
use face_diffcore::{Graph, NodeId, ParamNodes, Real};
use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};

pub const BN_EPS: f64 = 1e-5;

/// Where batch-norm layers take their statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Statistics of the current batch (training semantics).
    Batch,
    /// Stored running estimates (inference).
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Zero mean, unit variance.
    pub fn unit(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

/// Running statistics of every batch-norm layer, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BnRegistry {
    layers: BTreeMap<String, RunningStats>,
}

impl BnRegistry {
    pub fn register(&mut self, name: &str, features: usize) {
        self.layers.insert(name.to_string(), RunningStats::unit(features));
    }

    pub fn get(&self, name: &str) -> Option<&RunningStats> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.layers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// A copy whose listed layers hold exactly the observed moments.
    pub fn with_observed(&self, observed: &[(String, BatchMoments)]) -> Result<Self> {
        let mut out = self.clone();
        out.update(observed, 1.0)?;
        Ok(out)
    }

    /// Exponential moving average `r ← (1-m)·r + m·batch`.
    pub fn update(&mut self, observed: &[(String, BatchMoments)], momentum: f64) -> Result<()> {
        for (name, m) in observed {
            let r = self
                .layers
                .get_mut(name)
                .ok_or_else(|| FaceError::Precondition(format!("unregistered batch-norm layer `{name}`")))?;
            for (a, b) in r.mean.iter_mut().zip(&m.mean) {
                *a = (1.0 - momentum) * *a + momentum * b;
            }
            for (a, b) in r.var.iter_mut().zip(&m.var) {
                *a = (1.0 - momentum) * *a + momentum * b;
            }
        }
        Ok(())
    }
}

/// Batch-norm state for one forward pass: the mode, the running estimates
/// consulted in [`BnMode::Running`], and the batch moments observed in
/// [`BnMode::Batch`].
pub struct BnContext<'a> {
    pub mode: BnMode,
    running: &'a BnRegistry,
    pub observed: Vec<(String, BatchMoments)>,
}

impl<'a> BnContext<'a> {
    pub fn new(mode: BnMode, running: &'a BnRegistry) -> Self {
        Self {
            mode,
            running,
            observed: Vec::new(),
        }
    }

    fn stats(&self, name: &str) -> Result<BnStats<'a>> {
        match self.mode {
            BnMode::Batch => Ok(BnStats::Batch),
            BnMode::Running => {
                let r = self.running.get(name).ok_or_else(|| {
                    FaceError::Precondition(format!("no running statistics for `{name}`"))
                })?;
                Ok(BnStats::Fixed {
                    mean: &r.mean,
                    var: &r.var,
                })
            }
        }
    }

    /// Per-feature normalization of an `n×f` node using `{name}.gamma/.beta`.
    pub fn norm<T: Real>(&mut self, g: &mut Graph<T>, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
        let stats = self.stats(name)?;
        let gamma = p.get(&format!("{name}.gamma"))?;
        let beta = p.get(&format!("{name}.beta"))?;
        let (y, m) = batch_norm(g, x, gamma, beta, stats, BN_EPS)?;
        if let Some(m) = m {
            self.observed.push((name.to_string(), m));
        }
        Ok(y)
    }

    /// Per-channel normalization of an `n×c×h×w` node.
    pub fn norm2d<T: Real>(&mut self, g: &mut Graph<T>, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
        let stats = self.stats(name)?;
        let gamma = p.get(&format!("{name}.gamma"))?;
        let beta = p.get(&format!("{name}.beta"))?;
        let (y, m) = batch_norm2d(g, x, gamma, beta, stats, BN_EPS)?;
        if let Some(m) = m {
            self.observed.push((name.to_string(), m));
        }
        Ok(y)
    }
}
