//! Per-step metrics, decision logs and their file formats.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::Result;

/// One row of `metrics.csv`. Optional fields are empty when not measured at that step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub eval_accuracy: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub queried_count: usize,
    pub cumulative_queried: usize,
    pub cumulative_budget_ratio: f64,
    pub mean_cag_selected: Option<f64>,
    pub stage1_accuracy: Option<f64>,
    pub stage2_top1_accuracy: Option<f64>,
    pub sup_count: usize,
    pub unsup_count: usize,
    pub drop_count: usize,
    pub objective: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 14] = [
    "step",
    "epoch",
    "eval_accuracy",
    "pseudo_label_accuracy",
    "queried_count",
    "cumulative_queried",
    "cumulative_budget_ratio",
    "mean_cag_selected",
    "stage1_accuracy",
    "stage2_top1_accuracy",
    "sup_count",
    "unsup_count",
    "drop_count",
    "objective",
];

/// One line of `decisions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogEntry {
    pub step: usize,
    pub strategy: Strategy,
    pub quota: usize,
    pub sup: Vec<usize>,
    pub unsup: Vec<(usize, f64)>,
    pub drop: Vec<usize>,
    pub charged: Vec<usize>,
    pub cumulative_queried: usize,
    pub cumulative_seen: usize,
    pub budgeted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub best_step: usize,
    pub best_accuracy: f64,
}

impl RunMetrics {
    pub fn eval_series(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.eval_accuracy.map(|a| (r.step, a)))
            .collect()
    }

    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.eval_series().last().map(|&(_, a)| a)
    }

    /// Mean pseudo-label accuracy over steps `from..=to`.
    pub fn mean_pseudo_accuracy(&self, from: usize, to: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.step >= from && r.step <= to)
            .filter_map(|r| r.pseudo_label_accuracy)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn last_step(&self) -> usize {
        self.records.last().map_or(0, |r| r.step)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?)
    }
}

/// `summary.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub best_accuracy: f64,
    pub final_eval_accuracy: Option<f64>,
    pub cumulative_queried: usize,
    pub cumulative_seen: usize,
    pub budget_ratio: f64,
    pub unbudgeted_queried: usize,
    pub realized_hard_fraction: f64,
}

pub fn write_decisions(entries: &[DecisionLogEntry], mut out: impl Write) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
