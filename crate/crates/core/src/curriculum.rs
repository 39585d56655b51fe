//! Layer-by-layer curriculum: how many epochs each intermediate layer is
//! trained for and which loss is active in a given epoch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How intermediate-layer losses are combined with the final task loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    /// One sub-task per epoch: layer 1, layer 2, …, then the task loss.
    #[default]
    Curriculum,
    /// All intermediate losses every epoch with weight `0.9^(epoch-1)`, plus
    /// the task loss.
    WeightDecay,
    /// All intermediate losses summed with the task loss every epoch.
    None,
}

/// Per-epoch decay of the intermediate-loss weight in [`SchedulerMode::WeightDecay`].
pub const WEIGHT_DECAY_FACTOR: f64 = 0.9;

impl SchedulerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerMode::Curriculum => "curriculum",
            SchedulerMode::WeightDecay => "weight-decay",
            SchedulerMode::None => "none",
        }
    }
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curriculum" => Ok(SchedulerMode::Curriculum),
            "weight-decay" | "wd" => Ok(SchedulerMode::WeightDecay),
            "none" => Ok(SchedulerMode::None),
            other => Err(Error::Config(format!("unknown scheduler `{other}`"))),
        }
    }
}

/// Loss active during one sub-task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossSelector {
    /// Feature-map MSE on this 1-based layer.
    Mse { layer: usize },
    /// The configured final-layer distillation loss.
    Task,
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSelector::Mse { layer } => write!(f, "mse{layer}"),
            LossSelector::Task => f.write_str("task"),
        }
    }
}

/// Epoch allocation `e_i = a + i·b` for the first `L−1` sub-tasks, the
/// remainder going to the last one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub a: usize,
    pub b: usize,
    pub epochs: usize,
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl CurriculumSchedule {
    pub fn build(a: usize, b: usize, epochs: usize, subtasks: usize) -> Result<Self> {
        if epochs == 0 || subtasks == 0 {
            return Err(Error::Config(format!(
                "schedule needs at least one epoch and one sub-task (got E={epochs}, L={subtasks})"
            )));
        }
        let mut counts: Vec<usize> = (1..subtasks).map(|i| a + i * b).collect();
        let needed: usize = counts.iter().sum();
        if epochs <= needed {
            return Err(Error::InfeasibleSchedule {
                needed,
                min_epochs: needed + 1,
                epochs,
            });
        }
        counts.push(epochs - needed);
        let offsets = counts
            .iter()
            .scan(0, |acc, &e| {
                let r = *acc;
                *acc += e;
                Some(r)
            })
            .collect();
        Ok(CurriculumSchedule {
            a,
            b,
            epochs,
            counts,
            offsets,
        })
    }

    /// Number of sub-tasks `L`.
    pub fn subtasks(&self) -> usize {
        self.counts.len()
    }

    /// Epoch counts `e_1..e_L`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Offsets `r_1..r_L`; sub-task `i` owns epochs `r_i+1 ..= r_i+e_i`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Inclusive 1-based epoch range of sub-task `i` (1-based).
    pub fn epoch_range(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        let r = self.offsets[i - 1];
        r + 1..=r + self.counts[i - 1]
    }

    /// The sub-task (1-based) that owns `epoch` (1-based).
    pub fn active_subtask(&self, epoch: usize) -> Result<usize> {
        if epoch == 0 || epoch > self.epochs {
            return Err(Error::EpochOutOfRange {
                epoch,
                total: self.epochs,
            });
        }
        Ok(self.offsets.partition_point(|&r| r < epoch))
    }

    /// Loss of each epoch in order.
    pub fn loss_sequence(&self) -> Vec<LossSelector> {
        (1..=self.subtasks())
            .flat_map(|i| std::iter::repeat(loss_for_subtask(i, self.subtasks())).take(self.counts[i - 1]))
            .collect()
    }

    /// CSV table `subtask,epochs,first_epoch,last_epoch,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subtask,epochs,first_epoch,last_epoch,loss\n");
        for i in 1..=self.subtasks() {
            let range = self.epoch_range(i);
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                self.counts[i - 1],
                range.start(),
                range.end(),
                loss_for_subtask(i, self.subtasks())
            ));
        }
        out
    }
}

/// Layer-`i` MSE for intermediate sub-tasks, the task loss for the last one.
pub fn loss_for_subtask(i: usize, subtasks: usize) -> LossSelector {
    if i < subtasks {
        LossSelector::Mse { layer: i }
    } else {
        LossSelector::Task
    }
}
