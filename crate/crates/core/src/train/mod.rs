//! Two-step optimization: per-iteration feature-decomposition and
//! feature-orthogonalization updates with the parameter-freezing contract,
//! plus the training loop, loss log and checkpoints.

mod trainer;

pub use trainer::{train, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Both steps every iteration (the default reading of the training loop).
    Alternating,
    /// Decomposition steps for the first phase, orthogonalization for the
    /// second.
    Blockwise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub iterations_phase1: usize,
    pub iterations_phase2: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grl_enabled: bool,
    pub grl_lambda: f64,
    /// Elementwise-square reading of the orthogonal loss (ablation).
    pub eq6_literal: bool,
    /// Single combined update per iteration (ablation).
    pub one_step: bool,
    /// Drop the orthogonal loss terms (ablation).
    pub no_ortho: bool,
    pub checkpoint_every: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Vdd,
            iterations_phase1: 2000,
            iterations_phase2: 1000,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            grl_enabled: false,
            grl_lambda: 1.0,
            eq6_literal: false,
            one_step: false,
            no_ortho: false,
            checkpoint_every: 500,
            schedule: Schedule::Alternating,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_phase1 == 0 && self.iterations_phase2 == 0 {
            return Err(Error::InvalidConfig("zero total iterations".into()));
        }
        if self.lr_phase2 > self.lr_phase1 {
            return Err(Error::InvalidConfig(format!(
                "lr_phase2 {} > lr_phase1 {}",
                self.lr_phase2, self.lr_phase1
            )));
        }
        if self.grl_lambda < 0.0 {
            return Err(Error::InvalidConfig("grl_lambda must be >= 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations_phase1 + self.iterations_phase2
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.iterations_phase1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Decomposition,
    Orthogonalization,
    /// Single-update path: the one-step ablation and the source-only
    /// baseline.
    Combined,
}

/// Named scalar losses for one optimization step. Fields absent when not
/// applicable: decomposition reports never carry orthogonal-loss terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: StepKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_loc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_rpn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dom_src: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dom_tgt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_perp_src: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_perp_tgt: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn new(step: StepKind) -> Self {
        Self {
            step,
            l_cls: None,
            l_loc: None,
            l_rpn: None,
            l_dom_src: None,
            l_dom_tgt: None,
            l_perp_src: None,
            l_perp_tgt: None,
            total: 0.0,
        }
    }

    pub fn parts(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("l_cls", self.l_cls),
            ("l_loc", self.l_loc),
            ("l_rpn", self.l_rpn),
            ("l_dom_src", self.l_dom_src),
            ("l_dom_tgt", self.l_dom_tgt),
            ("l_perp_src", self.l_perp_src),
            ("l_perp_tgt", self.l_perp_tgt),
        ] {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }

    pub fn sum_parts(&self) -> f64 {
        self.parts().iter().map(|(_, v)| v).sum()
    }

    pub fn finalize(mut self) -> Self {
        self.total = self.sum_parts();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.parts().iter().all(|(_, v)| v.is_finite())
    }
}

/// One JSONL line of the loss log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}
