//! Stage plans, learning-rate schedules and the canonical templates.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_cifar10, Dataset, SyntheticConfig};
use crate::model::Architecture;
use crate::sparsity::SparsityConfig;
use crate::{Error, Result};

/// Paper defaults: global and masked sparsity strengths and the mask
/// threshold on `|γ|`.
pub const GLOBAL_LAMBDA: f64 = 2e-4;
pub const MASKED_LAMBDA: f64 = 5e-4;
pub const THETA: f64 = 1e-2;
/// Channel fraction removed per layer by the uniform templates.
pub const UNIFORM_RATIO: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    NormalTrain,
    GlobalSparsity,
    GenMask,
    MaskSparsity,
    Prune,
    Finetune,
    ScratchTrain,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::NormalTrain,
        Stage::GlobalSparsity,
        Stage::GenMask,
        Stage::MaskSparsity,
        Stage::Prune,
        Stage::Finetune,
        Stage::ScratchTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::NormalTrain => "normal_train",
            Stage::GlobalSparsity => "global_sparsity",
            Stage::GenMask => "gen_mask",
            Stage::MaskSparsity => "mask_sparsity",
            Stage::Prune => "prune",
            Stage::Finetune => "finetune",
            Stage::ScratchTrain => "scratch_train",
        }
    }

    /// Whether the stage runs a training loop.
    pub fn trains(self) -> bool {
        !matches!(self, Stage::GenMask | Stage::Prune)
    }

    /// Whether the stage leaves a model checkpoint behind.
    pub fn produces_model(self) -> bool {
        self != Stage::GenMask
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Step schedule: `initial / divisor^k` after the `k`-th milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub divisor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            milestones: vec![],
            divisor: 1.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial / self.divisor.powi(k as i32)
    }

    /// Milestones rescaled from a `from`-epoch schedule to `to` epochs.
    pub fn scaled(&self, from: usize, to: usize) -> Self {
        Self {
            initial: self.initial,
            milestones: self
                .milestones
                .iter()
                .map(|&m| (m as f64 * to as f64 / from as f64).round() as usize)
                .collect(),
            divisor: self.divisor,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !(self.divisor >= 1.0) {
            return Err(Error::InvalidPlan(format!(
                "learning rate must be positive and divisor at least 1, got {} and {}",
                self.initial, self.divisor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPlan("milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One entry of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    #[serde(default)]
    pub epochs: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub sparsity: SparsityConfig,
}

/// How `gen_mask` turns a model into a pruning mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MaskMethod {
    /// `|γ| < theta` of the plan.
    Threshold,
    /// The same fraction of every layer, smallest `|γ|` first.
    Uniform { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Class-conditional blob images; the train and test splits share
    /// class prototypes and normalization.
    Synthetic {
        train: usize,
        test: usize,
        classes: usize,
        seed: u64,
        #[serde(default)]
        config: SyntheticConfig,
    },
    /// The CIFAR-10 binary distribution, optionally truncated.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Pad-crop-flip augmentation of training batches.
    pub augment: bool,
}

impl DataConfig {
    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.source {
            DataSource::Synthetic {
                train,
                test,
                classes,
                seed,
                config,
            } => {
                let all = config.generate(train + test, *classes, *seed, *seed)?;
                let idx: Vec<usize> = (0..all.len()).collect();
                Ok((all.select(&idx[..*train])?, all.select(&idx[*train..])?))
            }
            DataSource::Cifar10 {
                dir,
                train_subset,
                test_subset,
            } => {
                let (mut tr, mut te) = load_cifar10(dir)?;
                if let Some(n) = train_subset {
                    tr = tr.head(*n)?;
                }
                if let Some(n) = test_subset {
                    te = te.head(*n)?;
                }
                Ok((tr, te))
            }
        }
    }
}

/// A full experiment: data, architecture, optimizer settings and stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub seed: u64,
    pub architecture: Architecture,
    pub data: DataConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub theta: f64,
    pub mask: MaskMethod,
    /// Model the mask is computed from; defaults to the latest of
    /// `global_sparsity` and `normal_train` preceding `gen_mask`.
    #[serde(default)]
    pub mask_source: Option<Stage>,
    pub stages: Vec<StageEntry>,
}

impl StagePlan {
    pub fn entry(&self, stage: Stage) -> Option<&StageEntry> {
        self.stages.iter().find(|e| e.stage == stage)
    }

    pub fn stage_list(&self) -> Vec<Stage> {
        self.stages.iter().map(|e| e.stage).collect()
    }

    /// Checks ordering prerequisites and numeric settings.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.theta > 0.0) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if let MaskMethod::Uniform { ratio } = self.mask {
            if !(0.0..1.0).contains(&ratio) {
                return bad(format!("uniform ratio must lie in [0, 1), got {ratio}"));
            }
        }
        let mut seen: Vec<Stage> = Vec::new();
        for e in &self.stages {
            if seen.contains(&e.stage) {
                return bad(format!("stage {} appears twice", e.stage));
            }
            e.lr.validate()?;
            e.sparsity.validate(None).or_else(|err| match e.sparsity.mode {
                crate::sparsity::SparsityMode::Masked => Ok(()),
                _ => Err(err),
            })?;
            if e.stage.trains() && e.epochs == 0 {
                return bad(format!("stage {} needs at least one epoch", e.stage));
            }
            let has = |s: Stage| seen.contains(&s);
            let missing = match e.stage {
                Stage::NormalTrain => None,
                Stage::GlobalSparsity => (!has(Stage::NormalTrain)).then_some("normal_train"),
                Stage::GenMask => match self.mask_source {
                    Some(src) => (!has(src)).then_some(src.name()),
                    None => (!has(Stage::NormalTrain) && !has(Stage::GlobalSparsity))
                        .then_some("normal_train or global_sparsity"),
                },
                Stage::MaskSparsity => {
                    if !has(Stage::GenMask) {
                        Some("gen_mask")
                    } else {
                        (!has(Stage::NormalTrain)).then_some("normal_train")
                    }
                }
                Stage::Prune => (!has(Stage::GenMask)).then_some("gen_mask"),
                Stage::Finetune | Stage::ScratchTrain => (!has(Stage::Prune)).then_some("prune"),
            };
            if let Some(m) = missing {
                return bad(format!("stage {} requires a preceding {m} stage", e.stage));
            }
            seen.push(e.stage);
        }
        if let Some(src) = self.mask_source {
            if !matches!(src, Stage::NormalTrain | Stage::GlobalSparsity) {
                return bad(format!("masks can only be computed from normal_train or global_sparsity, not {src}"));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides to the plan's JSON form. Keys are
    /// dotted paths (`stages.0.epochs`); every component must already
    /// exist. Values parse as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let slot = lookup_mut(&mut v, key).ok_or_else(|| Error::UnknownKey(key.clone()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| Error::InvalidPlan(format!("after overrides: {e}")))
    }
}

fn lookup_mut<'a>(v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = v;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part)?,
            Value::Array(items) => items.get_mut(part.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(Error::InvalidArgument(format!("expected key=value, got {s:?}"))),
    }
}

pub const TEMPLATES: [&str; 10] = [
    "masksparsity",
    "global-only",
    "uniform",
    "masksparsity-uniform",
    "scratch",
    "masksparsity-desk",
    "global-only-desk",
    "uniform-desk",
    "masksparsity-uniform-desk",
    "scratch-desk",
];

struct Scale {
    epochs: usize,
    schedule: LrSchedule,
}

fn paper_scale() -> Scale {
    Scale {
        epochs: 200,
        schedule: LrSchedule {
            initial: 0.1,
            milestones: vec![60, 120, 160],
            divisor: 5.0,
        },
    }
}

fn desk_scale() -> Scale {
    let p = paper_scale();
    Scale {
        epochs: 30,
        schedule: p.schedule.scaled(p.epochs, 30),
    }
}

fn stage_entries(stages: &[Stage], scale: &Scale) -> Vec<StageEntry> {
    stages
        .iter()
        .map(|&stage| {
            let mut lr = scale.schedule.clone();
            let sparsity = match stage {
                Stage::GlobalSparsity => SparsityConfig::global(GLOBAL_LAMBDA),
                Stage::MaskSparsity => SparsityConfig::masked(MASKED_LAMBDA),
                _ => SparsityConfig::off(),
            };
            if stage == Stage::Finetune {
                lr.initial = 0.001;
            }
            StageEntry {
                stage,
                epochs: if stage.trains() { scale.epochs } else { 0 },
                lr,
                sparsity,
            }
        })
        .collect()
}

/// The desk-scale synthetic task used by the `-desk` templates: two
/// classes of 8×8 blob images. With more classes a 48-channel network
/// needs every channel and global sparsity leaves nothing to prune within
/// 30 epochs.
pub fn desk_data() -> DataConfig {
    DataConfig {
        source: DataSource::Synthetic {
            train: 8000,
            test: 2000,
            classes: 2,
            seed: 0,
            config: SyntheticConfig::default(),
        },
        augment: false,
    }
}

/// A canonical plan by name; see [`TEMPLATES`].
pub fn template(name: &str) -> Result<StagePlan> {
    use Stage::*;
    let (base, desk) = match name.strip_suffix("-desk") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let (stages, mask, mask_source): (&[Stage], MaskMethod, Option<Stage>) = match base {
        "masksparsity" => (
            &[NormalTrain, GlobalSparsity, GenMask, MaskSparsity, Prune, Finetune],
            MaskMethod::Threshold,
            None,
        ),
        "global-only" => (
            &[NormalTrain, GlobalSparsity, GenMask, Prune, Finetune],
            MaskMethod::Threshold,
            None,
        ),
        "uniform" => (
            &[NormalTrain, GenMask, Prune, Finetune],
            MaskMethod::Uniform { ratio: UNIFORM_RATIO },
            None,
        ),
        "masksparsity-uniform" => (
            &[NormalTrain, GenMask, MaskSparsity, Prune, Finetune],
            MaskMethod::Uniform { ratio: UNIFORM_RATIO },
            None,
        ),
        "scratch" => (
            &[NormalTrain, GlobalSparsity, GenMask, Prune, ScratchTrain],
            MaskMethod::Threshold,
            None,
        ),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown template {name:?}; available: {}",
                TEMPLATES.join(", ")
            )))
        }
    };
    let scale = if desk { desk_scale() } else { paper_scale() };
    let (architecture, data, batch_size) = if desk {
        (Architecture::Plain { widths: vec![16, 32] }, desk_data(), 16)
    } else {
        (
            Architecture::Resnet { n_per_stage: 9 },
            DataConfig {
                source: DataSource::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                    train_subset: None,
                    test_subset: None,
                },
                augment: true,
            },
            128,
        )
    };
    let plan = StagePlan {
        name: name.to_string(),
        seed: 0,
        architecture,
        data,
        batch_size,
        eval_batch_size: 500,
        momentum: 0.9,
        weight_decay: 5e-4,
        nesterov: true,
        theta: THETA,
        mask,
        mask_source,
        stages: stage_entries(stages, &scale),
    };
    plan.validate()?;
    Ok(plan)
}
