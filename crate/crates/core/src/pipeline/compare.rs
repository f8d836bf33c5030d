//! Side-by-side comparison of finished runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::plan::Stage;
use super::run::RunState;
use crate::prune::{format_pct, round2};
use crate::{Error, Result};

/// The numbers a comparison row needs from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    /// Fingerprint of the test set the accuracies refer to.
    pub dataset: String,
    pub base_top1: f64,
    pub pruned_top1: f64,
    pub flops_reduction: f64,
    pub params_reduction: f64,
}

impl RunSummary {
    /// Base accuracy from `normal_train`, pruned accuracy from the last of
    /// `finetune`, `scratch_train` and `prune` that ran.
    pub fn from_run(name: &str, run: &RunState) -> Result<Self> {
        let top1 = |s: Stage| run.record(s).and_then(|r| r.test_top1);
        let base_top1 = top1(Stage::NormalTrain)
            .ok_or_else(|| Error::InvalidArgument(format!("run {name} has no normal_train result")))?;
        let pruned_top1 = [Stage::Finetune, Stage::ScratchTrain, Stage::Prune]
            .into_iter()
            .find_map(top1)
            .ok_or_else(|| Error::InvalidArgument(format!("run {name} has no pruned result")))?;
        let rep = run
            .report
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("run {name} has no prune report")))?;
        Ok(Self {
            name: name.into(),
            dataset: run.test.fingerprint(),
            base_top1,
            pruned_top1,
            flops_reduction: rep.flops_reduction,
            params_reduction: rep.params_reduction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub base_top1: f64,
    pub pruned_top1: f64,
    /// `base_top1 − pruned_top1`, rounded to two decimals.
    pub top1_drop: f64,
    pub flops_reduction: f64,
    pub params_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Builds the table; every run must have been evaluated on the same test set.
pub fn compare_runs(runs: &[RunSummary]) -> Result<ComparisonTable> {
    if let Some(first) = runs.first() {
        if let Some(other) = runs.iter().find(|r| r.dataset != first.dataset) {
            return Err(Error::InvalidArgument(format!(
                "runs {} and {} were evaluated on different datasets",
                first.name, other.name
            )));
        }
    }
    Ok(ComparisonTable {
        rows: runs
            .iter()
            .map(|r| ComparisonRow {
                name: r.name.clone(),
                base_top1: r.base_top1,
                pruned_top1: r.pruned_top1,
                top1_drop: round2(r.base_top1 - r.pruned_top1),
                flops_reduction: r.flops_reduction,
                params_reduction: r.params_reduction,
            })
            .collect(),
    })
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>10} {:>12} {:>8} {:>8} {:>9}",
            "run", "base top-1", "pruned top-1", "top-1↓", "FLOPs↓", "params↓"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>10} {:>12} {:>8} {:>8} {:>9}",
                r.name,
                format_pct(r.base_top1),
                format_pct(r.pruned_top1),
                format_pct(r.top1_drop),
                format_pct(r.flops_reduction),
                format_pct(r.params_reduction)
            )?;
        }
        Ok(())
    }
}
