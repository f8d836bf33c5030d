use std::fs;
use std::path::{Path, PathBuf};

use masksparsity::compute::Tensor;
use masksparsity::mask::{load_mask, save_mask, threshold_mask, uniform_mask, ChannelMask};
use masksparsity::model::{gradient_check, load_model, save_model, ModelGraph};
use masksparsity::pipeline::{parse_override, run_id, run_pipeline, template, RunState, Stage, StagePlan};
use masksparsity::prune::{apply_surgery, equivalence_check, report as prune_report, EQUIVALENCE_TOLERANCE};
use masksparsity::sparsity::{GammaSnapshot, HistogramRecord};
use masksparsity::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{GlobalOpts, PlanOpts};

const GRADIENT_TOLERANCE: f64 = 1e-5;

fn load_plan(opts: &PlanOpts) -> Result<StagePlan> {
    let mut plan = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?
        }
        None => template(&opts.template)?,
    };
    let overrides = opts
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    plan = plan.with_overrides(&overrides)?;
    if let Some(seed) = opts.seed {
        plan.seed = seed;
    }
    plan.validate()?;
    Ok(plan)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stage_summary(state: &RunState, dir: &Path) -> Value {
    let stages: Vec<Value> = state
        .records
        .iter()
        .map(|r| json!({"stage": r.stage, "epochs": r.epochs.len(), "test_top1": r.test_top1, "exit_hash": r.exit_hash}))
        .collect();
    let mut out = json!({"run_dir": dir, "stages": stages});
    if let Some(rep) = &state.report {
        out["flops_reduction"] = rep.flops_reduction.into();
        out["params_reduction"] = rep.params_reduction.into();
    }
    out
}

pub fn pipeline(global: &GlobalOpts, opts: &PlanOpts) -> Result<Value> {
    let plan = load_plan(opts)?;
    let dir = global.out.join(run_id(&plan));
    let state = run_pipeline(plan, Some(&dir))?;
    Ok(stage_summary(&state, &dir))
}

pub fn stage(global: &GlobalOpts, name: &str, opts: &PlanOpts) -> Result<Value> {
    let stage: Stage = name.parse()?;
    let plan = load_plan(opts)?;
    let dir = global.out.join(run_id(&plan));
    let mut state = if dir.join("plan.json").exists() {
        RunState::resume(&dir)?
    } else {
        let mut s = RunState::new(plan)?;
        s.attach_dir(&dir)?;
        s
    };
    if state.plan.entry(stage).is_none() {
        return Err(Error::InvalidPlan(format!("plan {:?} has no {stage} stage", state.plan.name)));
    }
    state.run_stage(stage)?;
    Ok(stage_summary(&state, &dir))
}

/// A checkpoint with the input size recorded in its metadata (32×32 if absent).
fn load_checkpoint(path: &Path) -> Result<(ModelGraph, (usize, usize), Value)> {
    let (graph, meta) = load_model(path)?;
    let hw = meta
        .get("input_hw")
        .and_then(|v| serde_json::from_value::<(usize, usize)>(v.clone()).ok())
        .unwrap_or((32, 32));
    Ok((graph, hw, meta))
}

fn probes(graph: &ModelGraph, hw: (usize, usize)) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Tensor::randn(&[8, graph.input_channels(), hw.0, hw.1], 1.0, &mut rng)
}

fn mask_summary(mask: &ChannelMask, path: &Path) -> Value {
    let layers: Vec<Value> = mask
        .layers
        .iter()
        .map(|l| json!({"name": l.name, "total": l.total(), "pruned": l.pruned()}))
        .collect();
    json!({
        "mask": path,
        "provenance": mask.provenance,
        "total_channels": mask.total_channels(),
        "pruned_channels": mask.pruned_channels(),
        "prune_fraction": mask.prune_fraction(),
        "layers": layers,
        "warnings": mask.warnings,
    })
}

pub fn mask(global: &GlobalOpts, model: &Path, theta: Option<f64>, ratio: Option<f64>, import: Option<&Path>) -> Result<Value> {
    let (graph, _, _) = load_checkpoint(model)?;
    let mask = match (theta, ratio, import) {
        (Some(t), None, None) => threshold_mask(&graph, t)?,
        (None, Some(r), None) => uniform_mask(&graph, r)?,
        (None, None, Some(p)) => load_mask(p, &graph)?,
        _ => return Err(Error::InvalidArgument("give exactly one of --theta, --ratio or --import".into())),
    };
    let path = global.out.join("mask.json");
    save_mask(&mask, &graph, &path)?;
    Ok(mask_summary(&mask, &path))
}

pub fn prune(global: &GlobalOpts, model: &Path, mask_path: &Path) -> Result<Value> {
    let (graph, hw, mut meta) = load_checkpoint(model)?;
    let mask = load_mask(mask_path, &graph)?;
    let eq = equivalence_check(&graph, &mask, &probes(&graph, hw), EQUIVALENCE_TOLERANCE)?;
    if !eq.passed() {
        return Err(Error::InvalidGraph(format!(
            "pruned model deviates from the zeroed reference by {:.3e} (tolerance {:.0e})",
            eq.max_abs_diff, eq.tol
        )));
    }
    let pruned = apply_surgery(&graph, &mask)?;
    let rep = prune_report(&graph, &pruned, hw)?;
    let ckpt = global.out.join("checkpoint");
    fs::create_dir_all(&global.out).map_err(|e| Error::io(&global.out, e))?;
    meta["pruned_from"] = json!(model);
    save_model(&pruned, &ckpt, meta)?;
    let report_path = global.out.join("report.json");
    write_json(&report_path, &rep)?;
    Ok(json!({
        "checkpoint": ckpt,
        "report": report_path,
        "equivalence": eq,
        "flops_reduction": rep.flops_reduction,
        "params_reduction": rep.params_reduction,
    }))
}

pub fn report(global: &GlobalOpts, before: &Path, after: &Path) -> Result<Value> {
    let (a, hw, _) = load_checkpoint(before)?;
    let (b, _, _) = load_checkpoint(after)?;
    let rep = prune_report(&a, &b, hw)?;
    let path = global.out.join("report.json");
    write_json(&path, &rep)?;
    let mut out = serde_json::to_value(&rep)?;
    out["report"] = json!(path);
    Ok(out)
}

pub fn hist(
    global: &GlobalOpts,
    model: Option<&Path>,
    snapshot: Option<&Path>,
    epoch: Option<usize>,
    bins: usize,
    range: (f64, f64),
) -> Result<Value> {
    let snap = match (model, snapshot) {
        (Some(m), _) => GammaSnapshot::capture(&load_checkpoint(m)?.0, "checkpoint", 0),
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let snaps = GammaSnapshot::from_jsonl(&text)?;
            let found = match epoch {
                Some(e) => snaps.into_iter().rev().find(|s| s.epoch == e),
                None => snaps.into_iter().last(),
            };
            found.ok_or_else(|| Error::format(p, "no matching snapshot"))?
        }
        (None, None) => return Err(Error::InvalidArgument("give --model or --snapshot".into())),
    };
    let records = HistogramRecord::from_snapshot(&snap, bins, range)?;
    let path = global.out.join("hist.json");
    write_json(&path, &records)?;
    Ok(json!({
        "hist": path,
        "stage": snap.stage,
        "epoch": snap.epoch,
        "channels": snap.channel_count(),
        "bins": bins,
        "range": [range.0, range.1],
    }))
}

pub fn verify(global: &GlobalOpts, model: &Path, mask_path: Option<&Path>, coords: usize) -> Result<Value> {
    let (graph, hw, _) = load_checkpoint(model)?;
    let grad_err = gradient_check(&graph, 4, hw, coords, 0)?;
    let mut out = json!({
        "model": model,
        "gradient_check": {"max_rel_error": grad_err, "tol": GRADIENT_TOLERANCE, "passed": grad_err < GRADIENT_TOLERANCE},
    });
    let mut failures: Vec<String> = Vec::new();
    if grad_err >= GRADIENT_TOLERANCE {
        failures.push(format!("gradient check error {grad_err:.3e}"));
    }
    if let Some(p) = mask_path {
        let mask = load_mask(p, &graph)?;
        let eq = equivalence_check(&graph, &mask, &probes(&graph, hw), EQUIVALENCE_TOLERANCE)?;
        if !eq.passed() {
            failures.push(format!("surgery deviates by {:.3e}", eq.max_abs_diff));
        }
        out["equivalence"] = json!({"max_abs_diff": eq.max_abs_diff, "tol": eq.tol, "passed": eq.passed()});
    }
    let path: PathBuf = global.out.join("verify.json");
    write_json(&path, &out)?;
    if !failures.is_empty() {
        return Err(Error::InvalidGraph(format!("verification failed: {}", failures.join("; "))));
    }
    out["verify"] = json!(path);
    Ok(out)
}
