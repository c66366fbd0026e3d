use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};
use crate::meta::{MetaConfig, PretrainConfig};
use crate::model::ModelConfig;

/// Repeats per target subject in quick profiles.
pub const QUICK_REPEATS: usize = 20;
/// Repeats per target subject in full runs.
pub const FULL_REPEATS: usize = 200;

/// Where batch-norm layers get their statistics when the adapted model
/// scores the target query set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStats {
    /// Moments of the labelled support set, the only target data adaptation sees.
    Support,
    /// Running estimates accumulated on the source subjects.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Trials `R` per target subject and shot count.
    pub repeats: usize,
    /// Shot counts `K` to evaluate.
    pub shots: Vec<usize>,
    /// Normalization statistics used when scoring the query set.
    pub query_stats: QueryStats,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: FULL_REPEATS,
            shots: vec![5],
            query_stats: QueryStats::Support,
            seed: 0,
        }
    }
}

/// Everything a LOSO run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FaceError::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.meta.validate()?;
        if self.eval.repeats == 0 || self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return Err(FaceError::Config(
                "evaluation needs repeats ≥ 1 and positive shot counts".into(),
            ));
        }
        Ok(())
    }

    /// Reseeds every stage from one base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.meta.seed = seed;
        self.eval.seed = seed;
        self
    }
}
