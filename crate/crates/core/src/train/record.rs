use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of a run's metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Active curriculum sub-task, or 0 when no curriculum is running.
    pub subtask: usize,
    pub loss_kind: String,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub lr: f64,
    pub metric_name: Option<String>,
    pub metric_value: Option<f64>,
}

/// Per-epoch training log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "epoch,subtask,loss_kind,loss,lr,metric_name,metric_value";

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    /// Appends an evaluation result for `epoch`.
    pub fn push_metric(&mut self, epoch: usize, name: &str, value: f64) {
        self.records.push(EpochRecord {
            epoch,
            subtask: 0,
            loss_kind: "eval".into(),
            loss: f64::NAN,
            lr: f64::NAN,
            metric_name: Some(name.into()),
            metric_value: Some(value),
        });
    }

    /// Loss kinds of the training rows, in order.
    pub fn loss_kinds(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.metric_name.is_none())
            .map(|r| r.loss_kind.as_str())
            .collect()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.iter().rev().find(|r| r.metric_name.is_none()).map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.subtask,
                r.loss_kind,
                num(r.loss),
                num(r.lr),
                r.metric_name.as_deref().unwrap_or(""),
                r.metric_value.map(num).unwrap_or_default()
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format("metrics CSV header mismatch".into()));
        }
        let parse_num = |s: &str| -> Result<f64> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
            }
        };
        let parse_int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad integer `{s}`"))) };
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("expected 7 fields: `{line}`")));
            }
            records.push(EpochRecord {
                epoch: parse_int(f[0])?,
                subtask: parse_int(f[1])?,
                loss_kind: f[2].to_string(),
                loss: parse_num(f[3])?,
                lr: parse_num(f[4])?,
                metric_name: (!f[5].is_empty()).then(|| f[5].to_string()),
                metric_value: if f[6].is_empty() { None } else { Some(parse_num(f[6])?) },
            });
        }
        Ok(RunMetrics { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut m = RunMetrics::default();
        m.push(EpochRecord {
            epoch: 1,
            subtask: 1,
            loss_kind: "mse1".into(),
            loss: 0.125,
            lr: 1e-3,
            metric_name: None,
            metric_value: None,
        });
        m.push_metric(1, "map", 0.5);
        let csv = m.to_csv();
        assert!(csv.starts_with("epoch,subtask,loss_kind,loss,lr,metric_name,metric_value\n1,1,mse1,0.125,0.001,,\n"));
        let back = RunMetrics::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.loss_kinds(), vec!["mse1"]);
    }
}
