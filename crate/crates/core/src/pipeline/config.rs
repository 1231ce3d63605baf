use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{IcmsMode, LossWeights};
use crate::ltm::LtmConfig;
use crate::model::ModelDims;

/// Where fragment merging runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmiMode {
    Off,
    /// Merge at inference; training sees the raw fragments.
    InferOnly,
    /// Merge in training too.
    TrainAndInfer,
}

/// Relative order of fragment merging and the short-term memory read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    LmiThenStm,
    StmThenLmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Merge threshold on the symmetrised fragment affinity.
    pub delta: f64,
    pub theta_match: f64,
    pub t_life: usize,
    pub k_buf: usize,
    pub top_k: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub frames_per_scene: usize,
    pub steps: usize,
    /// Keep a checkpoint every this many steps (0 keeps only the last).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub ltm: bool,
    pub stm: bool,
    pub lmi: LmiMode,
    pub icms: IcmsMode,
    pub confidence_gate: bool,
    pub recall: bool,
    pub reset_age_on_recall: bool,
    /// Score fragment pairs with the association head instead of a separate one.
    pub lmi_shares_ltm_params: bool,
    pub order: StageOrder,
    /// Merge with ground-truth affinities instead of the learned head.
    pub lmi_gt_oracle: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            feature_dim: 16,
            hidden_dim: 32,
            delta: 0.2,
            theta_match: 0.2,
            t_life: 5,
            k_buf: 64,
            top_k: 4,
            weights: LossWeights::default(),
            lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 4,
            frames_per_scene: 8,
            steps: 200,
            checkpoint_every: 0,
            seed: 0,
            ltm: true,
            stm: true,
            lmi: LmiMode::InferOnly,
            icms: IcmsMode::DualBranch,
            confidence_gate: true,
            recall: true,
            reset_age_on_recall: false,
            lmi_shares_ltm_params: false,
            order: StageOrder::LmiThenStm,
            lmi_gt_oracle: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.feature_dim == 0 || self.hidden_dim == 0 {
            return bad("model widths must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.top_k == 0 || self.batch_size == 0 || self.frames_per_scene == 0 {
            return bad("top_k, batch_size and frames_per_scene must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("bad optimizer settings lr={} weight_decay={}", self.lr, self.weight_decay));
        }
        self.weights.validate()?;
        self.ltm_config().validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn ltm_config(&self) -> LtmConfig {
        LtmConfig {
            theta_match: self.theta_match,
            t_life: self.t_life,
            k_buf: self.k_buf,
            recall: self.recall,
            confidence_gate: self.confidence_gate,
            reset_age_on_recall: self.reset_age_on_recall,
        }
    }

    /// Parses a JSON config; absent fields keep their defaults.
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}
