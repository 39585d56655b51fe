use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{CurriculumSchedule, SchedulerMode};
use crate::error::{Error, Result};

/// Student training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Pruned intermediate-layer targets, then the task loss.
    #[default]
    #[serde(rename = "indistill")]
    InDistill,
    /// Logit distillation with temperature.
    Okd,
    /// Similarity-distribution transfer on the penultimate layer only.
    Pkt,
    /// Intermediate-layer targets from the leading unpruned channels, then the
    /// task loss.
    MseHint,
    /// Cross-entropy only.
    None,
}

/// How intermediate targets are carved out of the reference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    /// Keep the highest-L1 filters.
    L1Pruned,
    /// Keep the first `n` channels.
    Leading,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::InDistill, Method::Okd, Method::Pkt, Method::MseHint, Method::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::InDistill => "indistill",
            Method::Okd => "okd",
            Method::Pkt => "pkt",
            Method::MseHint => "mse-hint",
            Method::None => "none",
        }
    }

    pub fn target_rule(self) -> Option<TargetRule> {
        match self {
            Method::InDistill => Some(TargetRule::L1Pruned),
            Method::MseHint => Some(TargetRule::Leading),
            _ => None,
        }
    }

    /// Final-layer loss used by this method, given the configured task loss.
    pub fn task_loss(self, configured: TaskLoss) -> Option<TaskLoss> {
        match self {
            Method::InDistill | Method::MseHint => Some(configured),
            Method::Pkt => Some(TaskLoss::Pkt),
            Method::Okd => Some(TaskLoss::Okd),
            Method::None => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of indistill, okd, pkt, mse-hint, none)")))
    }
}

/// Final-layer distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLoss {
    #[default]
    Pkt,
    Okd,
}

impl fmt::Display for TaskLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskLoss::Pkt => "pkt",
            TaskLoss::Okd => "okd",
        })
    }
}

impl FromStr for TaskLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pkt" => Ok(TaskLoss::Pkt),
            "okd" | "kl" => Ok(TaskLoss::Okd),
            "crd" => Err(Error::Config("the contrastive (crd) task loss is not available".into())),
            other => Err(Error::Config(format!("unknown task loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Task loss only in the final phase.
    #[default]
    Retrieval,
    /// Task loss plus cross-entropy (equal weights) in the final phase.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            milestones: vec![60],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    /// Learning rate used throughout 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.gamma.powi(decays as i32)
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub scheduler: SchedulerMode,
    pub task_loss: TaskLoss,
    pub mode: TaskMode,
    /// Base epochs per intermediate layer.
    pub a: usize,
    /// Extra epochs per deeper layer.
    pub b: usize,
    /// Pruning rate.
    pub q: f64,
    pub kd_temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches whose gradients are averaged into one optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub flip: bool,
    pub optimizer: OptimConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::InDistill,
            scheduler: SchedulerMode::Curriculum,
            task_loss: TaskLoss::Pkt,
            mode: TaskMode::Retrieval,
            a: 2,
            b: 1,
            q: 0.5,
            kd_temperature: 4.0,
            epochs: 70,
            batch_size: 128,
            accumulation: 1,
            seed: 0,
            flip: false,
            optimizer: OptimConfig::default(),
        }
    }
}

impl DistillConfig {
    /// Checks everything that does not depend on a model; `layers` is the
    /// student's feature-layer count when known.
    pub fn validate(&self, layers: Option<usize>) -> Result<()> {
        if !(0.0..1.0).contains(&self.q) {
            return Err(Error::Config(format!("q must lie in [0, 1), got {}", self.q)));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config(format!("kd_temperature must be positive, got {}", self.kd_temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.gamma > 0.0) || o.momentum < 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        if let Some(l) = layers {
            if self.method.target_rule().is_some() && self.scheduler == SchedulerMode::Curriculum {
                self.schedule(l)?;
            }
        }
        Ok(())
    }

    pub fn schedule(&self, layers: usize) -> Result<CurriculumSchedule> {
        CurriculumSchedule::build(self.a, self.b, self.epochs, layers)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = DistillConfig::default();
        assert_eq!(c.optimizer.lr_at(1), 1e-3);
        assert_eq!(c.optimizer.lr_at(60), 1e-3);
        assert!((c.optimizer.lr_at(61) - 1e-4).abs() < 1e-18);
        assert_eq!(c.batch_size, 128);
        assert_eq!((c.a, c.b, c.epochs), (2, 1, 70));
        c.validate(Some(4)).unwrap();
    }

    #[test]
    fn validation_failures() {
        let c = DistillConfig {
            epochs: 12,
            ..DistillConfig::default()
        };
        assert!(matches!(c.validate(Some(4)), Err(Error::InfeasibleSchedule { min_epochs: 13, .. })));
        let c = DistillConfig {
            q: 1.0,
            ..DistillConfig::default()
        };
        assert!(c.validate(None).is_err());
        assert!("crd".parse::<TaskLoss>().is_err());
        assert!("distill-everything".parse::<Method>().is_err());
    }

    #[test]
    fn method_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = DistillConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
