//! Stage orchestration: plans, the training loop, run artifacts and run
//! comparison.

mod compare;
mod plan;
mod run;
mod train;

pub use compare::{compare_runs, ComparisonRow, ComparisonTable, RunSummary};
pub use plan::{
    desk_data, parse_override, template, DataConfig, DataSource, LrSchedule, MaskMethod, Stage,
    StageEntry, StagePlan, GLOBAL_LAMBDA, MASKED_LAMBDA, TEMPLATES, THETA, UNIFORM_RATIO,
};
pub use run::{run_id, run_pipeline, RunRecord, RunState};
pub use train::{evaluate, EpochRecord, GradientRecord, LoopSettings};
