//! Stage execution, run state and the on-disk artifact layout.
//!
//! ```text
//! {out}/{run_id}/plan.json
//! {out}/{run_id}/metrics.jsonl        every epoch of every stage
//! {out}/{run_id}/timings.jsonl        wall-clock per stage
//! {out}/{run_id}/{stage}/checkpoint   model-producing stages
//! {out}/{run_id}/{stage}/metrics.jsonl, gammas.jsonl, gradients.jsonl
//! {out}/{run_id}/gen_mask/mask.json
//! {out}/{run_id}/prune/mask.json, report.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::plan::{MaskMethod, Stage, StageEntry, StagePlan};
use super::train::{evaluate, train, EpochRecord, GradientRecord, LoopSettings, TrainJob};
use crate::data::Dataset;
use crate::mask::{load_mask, save_mask, threshold_mask, uniform_mask, ChannelMask};
use crate::model::{load_model, save_model, ModelGraph};
use crate::prune::{apply_surgery, report, PruneReport};
use crate::sparsity::GammaSnapshot;
use crate::{Error, Result};

/// What one stage did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    /// Parameter hash of the model the stage started from.
    pub entry_hash: Option<String>,
    pub exit_hash: Option<String>,
    /// Test top-1 of the stage's output model.
    pub test_top1: Option<f64>,
    pub wall_clock_secs: f64,
    /// `|γ|` after every epoch (in memory; on disk in `gammas.jsonl`).
    #[serde(skip)]
    pub snapshots: Vec<GammaSnapshot>,
    #[serde(skip)]
    pub gradients: Vec<GradientRecord>,
}

/// Models, mask and records accumulated by a run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub plan: StagePlan,
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    pub models: BTreeMap<Stage, ModelGraph>,
    pub mask: Option<ChannelMask>,
    pub report: Option<PruneReport>,
    pub records: Vec<RunRecord>,
    /// Artifact directory of this run, if it writes to disk.
    pub dir: Option<PathBuf>,
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stage as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl RunState {
    /// Validates the plan and loads its data.
    pub fn new(plan: StagePlan) -> Result<Self> {
        plan.validate()?;
        let (train, test) = plan.data.load()?;
        Ok(Self::with_data(plan, Arc::new(train), Arc::new(test)))
    }

    /// Uses already-loaded splits (e.g. shared between runs).
    pub fn with_data(plan: StagePlan, train: Arc<Dataset>, test: Arc<Dataset>) -> Self {
        Self {
            plan,
            train,
            test,
            models: BTreeMap::new(),
            mask: None,
            report: None,
            records: Vec::new(),
            dir: None,
        }
    }

    /// Writes artifacts under `dir` from now on, starting with `plan.json`.
    pub fn attach_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("plan.json"), &self.plan)?;
        self.dir = Some(dir.to_path_buf());
        Ok(())
    }

    /// Reloads a run directory written by earlier invocations: the plan,
    /// every stage checkpoint present and the generated mask.
    pub fn resume(dir: &Path) -> Result<Self> {
        let plan_path = dir.join("plan.json");
        let text = fs::read_to_string(&plan_path).map_err(|e| Error::io(&plan_path, e))?;
        let plan: StagePlan = serde_json::from_str(&text)?;
        let mut state = Self::new(plan)?;
        for stage in Stage::ALL {
            let ckpt = dir.join(stage.name()).join("checkpoint");
            if ckpt.exists() {
                state.models.insert(stage, load_model(&ckpt)?.0);
            }
        }
        let mask_path = dir.join(Stage::GenMask.name()).join("mask.json");
        if mask_path.exists() {
            let source = state.mask_source()?;
            state.mask = Some(load_mask(&mask_path, source)?);
        }
        state.dir = Some(dir.to_path_buf());
        Ok(state)
    }

    pub fn model(&self, stage: Stage) -> Option<&ModelGraph> {
        self.models.get(&stage)
    }

    pub fn record(&self, stage: Stage) -> Option<&RunRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }

    /// The model the final accuracy of the run refers to.
    pub fn final_model(&self) -> Option<(Stage, &ModelGraph)> {
        [Stage::Finetune, Stage::ScratchTrain, Stage::Prune, Stage::MaskSparsity, Stage::GlobalSparsity, Stage::NormalTrain]
            .into_iter()
            .find_map(|s| self.models.get(&s).map(|m| (s, m)))
    }

    fn settings(&self) -> LoopSettings {
        LoopSettings {
            batch_size: self.plan.batch_size,
            eval_batch_size: self.plan.eval_batch_size,
            momentum: self.plan.momentum,
            weight_decay: self.plan.weight_decay,
            nesterov: self.plan.nesterov,
            augment: self.plan.data.augment,
        }
    }

    fn require(&self, stage: Stage, by: Stage) -> Result<&ModelGraph> {
        self.models.get(&stage).ok_or_else(|| {
            Error::InvalidPlan(format!("{by} needs the {stage} model, which has not been produced"))
        })
    }

    fn mask_source(&self) -> Result<&ModelGraph> {
        match self.plan.mask_source {
            Some(s) => self.require(s, Stage::GenMask),
            None => self
                .models
                .get(&Stage::GlobalSparsity)
                .or_else(|| self.models.get(&Stage::NormalTrain))
                .ok_or_else(|| Error::InvalidPlan("gen_mask needs a normal_train or global_sparsity model".into())),
        }
    }

    fn prune_source(&self) -> Result<&ModelGraph> {
        [Stage::MaskSparsity, Stage::GlobalSparsity, Stage::NormalTrain]
            .into_iter()
            .find_map(|s| self.models.get(&s))
            .ok_or_else(|| Error::InvalidPlan("prune needs a trained model".into()))
    }

    fn require_mask(&self, by: Stage) -> Result<&ChannelMask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::InvalidPlan(format!("{by} needs a mask from gen_mask")))
    }

    /// Runs one stage of the plan, with errors tagged by stage.
    pub fn run_stage(&mut self, stage: Stage) -> Result<&RunRecord> {
        let entry = self
            .plan
            .entry(stage)
            .cloned()
            .ok_or_else(|| Error::InvalidPlan(format!("the plan has no {stage} stage")))?;
        self.run_entry(&entry).map_err(|e| Error::in_stage(stage.name(), e))?;
        Ok(self.records.last().expect("run_entry pushes a record"))
    }

    fn run_entry(&mut self, entry: &StageEntry) -> Result<()> {
        let stage = entry.stage;
        let started = Instant::now();
        let seed = stage_seed(self.plan.seed, stage);
        let (in_ch, classes) = (self.train.image_dims().0, self.train.num_classes);
        let start: Option<ModelGraph> = match stage {
            Stage::NormalTrain => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(self.plan.architecture.build(in_ch, classes, &mut rng)?)
            }
            // Both sparsity stages restart from the normally trained weights.
            Stage::GlobalSparsity | Stage::MaskSparsity => Some(self.require(Stage::NormalTrain, stage)?.clone()),
            Stage::Finetune => Some(self.require(Stage::Prune, stage)?.clone()),
            Stage::ScratchTrain => {
                let pruned = self.require(Stage::Prune, stage)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(ModelGraph::init(pruned.layers().to_vec(), &mut rng)?)
            }
            Stage::GenMask | Stage::Prune => None,
        };
        let entry_hash = start.as_ref().map(|m| m.state_hash());
        let mut record = RunRecord {
            stage,
            epochs: vec![],
            entry_hash,
            exit_hash: None,
            test_top1: None,
            wall_clock_secs: 0.0,
            snapshots: vec![],
            gradients: vec![],
        };
        match stage {
            Stage::GenMask => {
                let source = self.mask_source()?;
                let mask = match self.plan.mask {
                    MaskMethod::Threshold => threshold_mask(source, self.plan.theta)?,
                    MaskMethod::Uniform { ratio } => uniform_mask(source, ratio)?,
                };
                for w in &mask.warnings {
                    log::warn!("gen_mask: {w}");
                }
                record.snapshots.push(GammaSnapshot::capture(source, stage.name(), 0));
                if let Some(dir) = self.stage_dir(stage)? {
                    save_mask(&mask, source, &dir.join("mask.json"))?;
                }
                self.mask = Some(mask);
            }
            Stage::Prune => {
                let mask = self.require_mask(stage)?;
                let source = self.prune_source()?;
                let pruned = apply_surgery(source, mask)?;
                let hw = (self.train.image_dims().1, self.train.image_dims().2);
                let rep = report(source, &pruned, hw)?;
                record.entry_hash = Some(source.state_hash());
                record.exit_hash = Some(pruned.state_hash());
                record.test_top1 = Some(evaluate(&pruned, &self.test, self.plan.eval_batch_size)?);
                if let Some(dir) = self.stage_dir(stage)? {
                    save_mask(mask, source, &dir.join("mask.json"))?;
                    write_json(&dir.join("report.json"), &rep)?;
                    save_model(&pruned, &dir.join("checkpoint"), self.checkpoint_meta(stage))?;
                }
                self.report = Some(rep);
                self.models.insert(stage, pruned);
            }
            _ => {
                let mut model = start.expect("training stages have a starting model");
                let lr = entry.lr.clone();
                let lr_at = move |e: usize| lr.lr_at(e);
                let mask = match stage {
                    Stage::MaskSparsity => Some(self.require_mask(stage)?),
                    _ => None,
                };
                let job = TrainJob {
                    stage: stage.name(),
                    epochs: entry.epochs,
                    lr_at: &lr_at,
                    sparsity: entry.sparsity,
                    mask,
                    shuffle_seed: seed,
                };
                let out = train(&mut model, &self.train, &self.test, &self.settings(), &job)?;
                record.test_top1 = out.epochs.last().map(|e| e.test_top1);
                record.exit_hash = Some(model.state_hash());
                record.epochs = out.epochs;
                record.snapshots = out.snapshots;
                record.gradients = out.gradients;
                if let Some(dir) = self.stage_dir(stage)? {
                    save_model(&model, &dir.join("checkpoint"), self.checkpoint_meta(stage))?;
                    write_jsonl(&dir.join("metrics.jsonl"), &record.epochs, false)?;
                    let gammas: String = record.snapshots.iter().map(|s| s.to_jsonl()).collect();
                    fs::write(dir.join("gammas.jsonl"), gammas).map_err(|e| Error::io(&dir, e))?;
                    write_jsonl(&dir.join("gradients.jsonl"), &record.gradients, false)?;
                }
                self.models.insert(stage, model);
            }
        }
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        if let Some(root) = &self.dir {
            write_jsonl(&root.join("metrics.jsonl"), &record.epochs, true)?;
            let timing = json!({"stage": stage, "wall_clock_secs": record.wall_clock_secs});
            write_jsonl(&root.join("timings.jsonl"), &[timing], true)?;
        }
        self.records.push(record);
        Ok(())
    }

    fn stage_dir(&self, stage: Stage) -> Result<Option<PathBuf>> {
        match &self.dir {
            None => Ok(None),
            Some(root) => {
                let d = root.join(stage.name());
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                Ok(Some(d))
            }
        }
    }

    fn checkpoint_meta(&self, stage: Stage) -> serde_json::Value {
        json!({
            "stage": stage,
            "plan": self.plan.name,
            "seed": self.plan.seed,
            "dataset": self.test.fingerprint(),
            "input_hw": [self.train.image_dims().1, self.train.image_dims().2],
        })
    }

    /// Runs every remaining stage of the plan in order.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in self.plan.stage_list() {
            if self.record(stage).is_none() {
                self.run_stage(stage)?;
            }
        }
        Ok(())
    }
}

/// Runs a whole plan; with `dir`, artifacts go to `dir` (the run directory
/// itself, e.g. `{out}/{run_id}`).
pub fn run_pipeline(plan: StagePlan, dir: Option<&Path>) -> Result<RunState> {
    let mut state = RunState::new(plan)?;
    if let Some(d) = dir {
        if d.join("metrics.jsonl").exists() {
            fs::remove_file(d.join("metrics.jsonl")).map_err(|e| Error::io(d, e))?;
            let _ = fs::remove_file(d.join("timings.jsonl"));
        }
        state.attach_dir(d)?;
    }
    state.run_all()?;
    Ok(state)
}

/// Default run directory name: template name and seed.
pub fn run_id(plan: &StagePlan) -> String {
    format!("{}-seed{}", plan.name, plan.seed)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T], append: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
