use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};
use crate::norm::BnMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub rate: f64,
    pub batch_size: usize,
    /// Draw every minibatch from a single subject, so batch statistics are
    /// subject statistics as they are when adapting to a target.
    pub subject_batches: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            rate: 1e-3,
            batch_size: 32,
            subject_batches: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || self.batch_size < 2 {
            return Err(FaceError::Config(format!(
                "pretraining needs rate > 0 and batch size ≥ 2, got {} / {}",
                self.rate, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner-loop step size `α`.
    pub inner_rate: f64,
    /// Outer-loop Adam rate `β`.
    pub outer_rate: f64,
    /// Inner steps `m`.
    pub inner_steps: usize,
    /// Subjects per episode `n`.
    pub subjects_per_episode: usize,
    /// Episodes `N_e`.
    pub episodes: usize,
    /// Support shots per class during meta-training.
    pub shots: usize,
    /// Query size during meta-training.
    pub query: usize,
    /// Label smoothing `ε`.
    pub smoothing: f64,
    /// Drop second-order terms (speed comparisons only).
    pub first_order: bool,
    /// Momentum of running batch-norm statistics.
    pub bn_momentum: f64,
    /// Encoder batch-norm mode inside episodes and target adaptation.
    pub encoder_bn: BnMode,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_rate: 0.01,
            outer_rate: 0.001,
            inner_steps: 10,
            subjects_per_episode: 2,
            episodes: 50,
            shots: 5,
            query: 20,
            smoothing: 0.1,
            first_order: false,
            bn_momentum: 0.1,
            encoder_bn: BnMode::Batch,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FaceError::Config(m));
        if !(self.inner_rate > 0.0) || !(self.outer_rate > 0.0) {
            return bad(format!(
                "rates must be positive, got α={} β={}",
                self.inner_rate, self.outer_rate
            ));
        }
        if self.inner_steps == 0 || self.subjects_per_episode == 0 {
            return bad("inner steps and subjects per episode must be ≥ 1".into());
        }
        if self.shots == 0 || self.query == 0 {
            return bad("meta-training needs shots ≥ 1 and query ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("label smoothing must be in [0,1), got {}", self.smoothing));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("batch-norm momentum must be in [0,1], got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub fn inner(&self) -> InnerConfig {
        InnerConfig {
            alpha: self.inner_rate,
            steps: self.inner_steps,
            first_order: self.first_order,
            smoothing: self.smoothing,
        }
    }
}

/// Settings of one inner loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    pub alpha: f64,
    pub steps: usize,
    pub first_order: bool,
    pub smoothing: f64,
}
