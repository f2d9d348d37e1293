//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::read;
use crate::episodes::EpisodeShape;
use crate::error::{Error, Result};
use crate::mixup::{AcrossMode, MixupConfig};
use crate::protonet::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub l_hops: usize,
    pub hidden_dim: usize,
    pub eta: f64,
    pub gamma: f64,
    pub within_ratio: f64,
    pub t_org: usize,
    /// Interpolated tasks per epoch; defaults to `t_org`.
    pub t_aug: Option<usize>,
    pub include_original: bool,
    pub across_mode: AcrossMode,
    /// Fresh mixup recipes every epoch; off draws them once before training.
    pub regenerate_mixup: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_every: usize,
    pub val_tasks: usize,
    pub seed: u64,
    pub eval_tasks: usize,
    /// Test episodes scored at each checkpoint for the gap trace.
    pub monitor_tasks: usize,
    pub epsilon: f64,
    pub rademacher_trials: usize,
    pub no_within: bool,
    pub no_across: bool,
    pub no_degree: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            m_query: 10,
            l_hops: 2,
            hidden_dim: 16,
            eta: 0.5,
            gamma: 0.5,
            within_ratio: 1.0,
            t_org: 5,
            t_aug: None,
            include_original: true,
            across_mode: AcrossMode::Prototype,
            regenerate_mixup: true,
            lr: 1e-2,
            weight_decay: 0.0,
            max_epochs: 2000,
            patience: 5,
            val_every: 10,
            val_tasks: 20,
            seed: 0,
            eval_tasks: 50,
            monitor_tasks: 20,
            epsilon: 0.05,
            rademacher_trials: 2000,
            no_within: false,
            no_across: false,
            no_degree: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read(path.as_ref())?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("m_query", self.m_query),
            ("hidden_dim", self.hidden_dim),
            ("t_org", self.t_org),
            ("eval_tasks", self.eval_tasks),
            ("val_every", self.val_every),
            ("patience", self.patience),
            ("rademacher_trials", self.rademacher_trials),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if self.no_across && self.t_aug.is_some_and(|t| t > 0) {
            return Err(Error::Config("no_across conflicts with a positive t_aug".into()));
        }
        if !self.include_original && self.t_aug() == 0 {
            return Err(Error::Config("excluding original tasks leaves no training tasks without across-task mixup".into()));
        }
        self.mixup().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Interpolated tasks per epoch after ablation flags.
    pub fn t_aug(&self) -> usize {
        if self.no_across {
            0
        } else {
            self.t_aug.unwrap_or(self.t_org)
        }
    }

    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape { way: self.n_way, shot: self.k_shot, query: self.m_query }
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            eta: self.eta,
            gamma: self.gamma,
            within_ratio: if self.no_within { 0.0 } else { self.within_ratio },
            t_aug: self.t_aug(),
            include_original: self.include_original,
            across_mode: self.across_mode,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            val_every: self.val_every,
            val_tasks: self.val_tasks,
            patience: self.patience,
            mixup: self.mixup(),
            regenerate_mixup: self.regenerate_mixup,
        }
    }

    /// Query rows per class of a training task after within-task mixup.
    pub fn queries_per_class(&self) -> usize {
        let ratio = if self.no_within { 0.0 } else { self.within_ratio };
        self.m_query + (ratio * self.m_query as f64).floor() as usize
    }
}
