//! `masksparsity`: run pruning pipelines and inspect their artifacts.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masksparsity::Error;

#[derive(Parser, Debug)]
#[command(name = "masksparsity", version, about = "Pruning-aware sparse regularization for channel pruning")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Output directory (MASKSPARSITY_OUT takes precedence).
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Kernel threads; 1 forces the sequential path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PlanOpts {
    /// Built-in plan template.
    #[arg(long, default_value = "masksparsity-desk", conflicts_with = "config")]
    pub template: String,
    /// Plan file (JSON) instead of a template.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a plan key, e.g. `--set stages.0.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage of a plan into `{out}/{run_id}`.
    Pipeline {
        #[command(flatten)]
        plan: PlanOpts,
    },
    /// Run a single stage, resuming the run directory if it exists.
    Stage {
        /// Stage name, e.g. `normal_train` or `prune`.
        name: String,
        #[command(flatten)]
        plan: PlanOpts,
    },
    /// Generate a pruning mask for a checkpoint.
    Mask {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, group = "method")]
        theta: Option<f64>,
        #[arg(long, group = "method")]
        ratio: Option<f64>,
        /// Re-validate and copy an existing mask file.
        #[arg(long = "import", group = "method")]
        import: Option<PathBuf>,
    },
    /// Remove masked channels from a checkpoint.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// FLOPs and parameter reductions between two checkpoints.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// Histogram data of |γ| from a checkpoint or a gammas.jsonl snapshot log.
    Hist {
        #[arg(long, conflicts_with = "snapshot", required_unless_present = "snapshot")]
        model: Option<PathBuf>,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Epoch to read from a snapshot log (default: the last one).
        #[arg(long, requires = "snapshot")]
        epoch: Option<usize>,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        /// Histogram range `LO,HI`; larger values land in an overflow bin.
        #[arg(long, value_parser = parse_range, default_value = "0,1")]
        range: (f64, f64),
    },
    /// Check surgery equivalence and finite-difference gradients.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Parameters sampled by the gradient check.
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

/// Exit status for a failed command.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::UnknownKey(_) => 2,
        Error::Stage { source, .. } if matches!(**source, Error::UnknownKey(_)) => 2,
        e if e.is_invariant_violation() => 3,
        _ => 1,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::InvalidGraph(_) => "invalid_graph",
        Error::InvalidMask(_) => "invalid_mask",
        Error::InvalidPlan(_) => "invalid_plan",
        Error::UnknownKey(_) => "unknown_key",
        Error::Format { .. } => "format",
        Error::Stage { source, .. } => error_kind(source),
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn error_record(err: &Error, code: u8) -> serde_json::Value {
    let mut rec = serde_json::json!({
        "error": {
            "kind": error_kind(err),
            "message": err.to_string(),
            "exit_code": code,
        }
    });
    let mut e = err;
    while let Error::Stage { stage, source } = e {
        rec["error"]["stage"] = stage.clone().into();
        e = source;
    }
    if let Error::UnknownKey(key) = e {
        rec["error"]["key"] = key.clone().into();
    }
    rec
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut global = cli.global;
    if let Some(dir) = std::env::var_os("MASKSPARSITY_OUT").filter(|v| !v.is_empty()) {
        global.out = PathBuf::from(dir);
    }
    let result = (|| {
        if let Some(t) = global.threads {
            masksparsity::exec::configure_threads(t)?;
        }
        match cli.command {
            Command::Pipeline { plan } => commands::pipeline(&global, &plan),
            Command::Stage { name, plan } => commands::stage(&global, &name, &plan),
            Command::Mask {
                model,
                theta,
                ratio,
                import,
            } => commands::mask(&global, &model, theta, ratio, import.as_deref()),
            Command::Prune { model, mask } => commands::prune(&global, &model, &mask),
            Command::Report { before, after } => commands::report(&global, &before, &after),
            Command::Hist {
                model,
                snapshot,
                epoch,
                bins,
                range,
            } => commands::hist(&global, model.as_deref(), snapshot.as_deref(), epoch, bins, range),
            Command::Verify { model, mask, coords } => commands::verify(&global, &model, mask.as_deref(), coords),
        }
    })();
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("{}", error_record(&err, code));
            ExitCode::from(code)
        }
    }
}
