//! The `pit` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{OperatorDataset, Split};
use crate::error::{PitError, Result};
use crate::gradcheck::{full_suite, GradcheckConfig};
use crate::harness::{
    lambda_report_csv, lambda_report_table, scaling_benchmark, super_resolution_sweep, theorem1_experiment,
    ScalingConfig, Theorem1Config,
};
use crate::model::PiTModel;
use crate::tensor::Tensor2;
use crate::training::{evaluate, train, Metric, TrainLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pit", version, about = "Position-induced transformer for operator learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured task's train and test sets.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Build data and model from a config, train, and write the checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a saved dataset or on freshly generated task data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "task", required_unless_present = "task")]
        data: Option<PathBuf>,
        /// Run config whose task supplies the test functions.
        #[arg(long)]
        task: Option<PathBuf>,
        /// Grid points per axis for generated data (input and output alike).
        #[arg(long, requires = "task")]
        resolution: Option<usize>,
        #[arg(long, default_value = "rel_l2_mean")]
        metric: String,
    },
    /// Zero-shot evaluation over increasing resolutions.
    Convergence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        resolutions: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Monte-Carlo convergence of position-attention to its integral operator.
    Theorem1 {
        #[arg(long)]
        lambda: f64,
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every variant in both λ modes.
    Gradcheck {
        /// Optional run config; only its seed is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Forward wall time against input mesh size.
    Scaling {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        backward: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Interpretable radii `1/sqrt(λ)` of every position-attention head.
    LambdaReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Exit code for an error: configuration and argument problems are validation
/// failures, everything else is a runtime failure.
pub fn exit_code(e: &PitError) -> i32 {
    match e {
        PitError::ConfigKey { .. } | PitError::InvalidConfig(_) | PitError::InvalidArgument(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns the
/// process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_metric(s: &str) -> Result<Metric> {
    Metric::parse(s).ok_or_else(|| PitError::InvalidArgument(format!("unknown metric `{s}`")))
}

/// Trains the model described by `cfg`, streaming epoch lines to `out`.
pub fn train_from_config(cfg: &RunConfig, out: &mut dyn Write) -> Result<(PiTModel, TrainLog)> {
    let train_set = cfg.task.generate(Split::Train)?;
    let test_set = cfg.task.generate(Split::Test)?;
    let mut model = PiTModel::build_for(cfg.model.clone(), &train_set.input_mesh, cfg.seed)?;
    writeln!(out, "{}", TrainLog::CSV_HEADER)?;
    let mut io_err = None;
    let log = train(&mut model, &train_set, &test_set, &cfg.train, |r| {
        if let Err(e) = writeln!(out, "{}", r.csv_line()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok((model, log))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Generate {
            config,
            train_out,
            test_out,
        } => {
            let cfg = RunConfig::load(config)?;
            let tr = cfg.task.generate(Split::Train)?;
            let te = cfg.task.generate(Split::Test)?;
            tr.save(&train_out)?;
            te.save(&test_out)?;
            writeln!(out, "wrote {} train and {} test samples", tr.len(), te.len())?;
        }
        Command::Train { config, out: ckpt, log } => {
            let cfg = RunConfig::load(config)?;
            let (model, train_log) = train_from_config(&cfg, out)?;
            model.save(&ckpt)?;
            if let Some(path) = log {
                write_file(&path, &train_log.to_csv())?;
            }
            writeln!(out, "params = {}", model.count_params())?;
            writeln!(out, "test_{} = {:.16e}", cfg.train.metric.name(), train_log.test_metric)?;
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            resolution,
            metric,
        } => {
            let metric = parse_metric(&metric)?;
            let model = PiTModel::load(&checkpoint)?;
            let ds = match (data, task) {
                (Some(path), _) => OperatorDataset::load(path)?,
                (None, Some(path)) => {
                    let cfg = RunConfig::load(path)?;
                    let r = resolution.unwrap_or(cfg.task.resolution);
                    let ro = resolution.unwrap_or(cfg.task.output_resolution);
                    cfg.task.generate_at(Split::Test, r, ro)?
                }
                (None, None) => return Err(PitError::InvalidArgument("pass --data or --task".into())),
            };
            let value = evaluate(&model, &ds, metric)?;
            writeln!(out, "{} = {:.16e}", metric.name(), value)?;
        }
        Command::Convergence {
            checkpoint,
            config,
            resolutions,
            csv,
        } => {
            let cfg = RunConfig::load(config)?;
            let model = PiTModel::load(&checkpoint)?;
            let rep = super_resolution_sweep(&model, &cfg.task, &resolutions, cfg.train.metric)?;
            let text = rep.to_csv();
            write!(out, "{text}")?;
            if let Some(path) = csv {
                write_file(&path, &text)?;
            }
        }
        Command::Theorem1 {
            lambda,
            n_list,
            reps,
            dim,
            seed,
            csv,
        } => {
            let cfg = Theorem1Config {
                dim,
                lambda,
                w_v: Tensor2::identity(1),
                n_list,
                repetitions: reps,
                seed,
            };
            let rep = theorem1_experiment(&cfg, &smooth_field)?;
            let text = rep.to_csv();
            write!(out, "{text}")?;
            writeln!(out, "slope = {:.6}", rep.slope)?;
            if let Some(path) = csv {
                write_file(&path, &text)?;
            }
        }
        Command::Gradcheck { config } => {
            let seed = match config {
                Some(p) => RunConfig::load(p)?.seed,
                None => 0,
            };
            let reports = full_suite(&GradcheckConfig {
                seed,
                ..GradcheckConfig::default()
            })?;
            let mut ok = true;
            for r in &reports {
                writeln!(
                    out,
                    "{} {} {} max_rel_error={:.3e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.variant.name(),
                    r.lambda_mode.name(),
                    r.max_error()
                )?;
                for p in r.failures() {
                    writeln!(out, "  {} rel_error={:.3e}", p.name, p.rel_error)?;
                }
                ok &= r.passed();
            }
            return Ok(if ok { EXIT_OK } else { EXIT_VALIDATION });
        }
        Command::Scaling {
            config,
            n_list,
            batch,
            backward,
            csv,
        } => {
            let cfg = RunConfig::load(config)?;
            let rep = scaling_benchmark(
                &cfg.model,
                &ScalingConfig {
                    n_list,
                    batch,
                    backward,
                    seed: cfg.seed,
                    ..ScalingConfig::default()
                },
            )?;
            let text = rep.to_csv();
            write!(out, "{text}")?;
            writeln!(out, "r_squared = {:.6}", rep.fit.r_squared)?;
            if let Some(path) = csv {
                write_file(&path, &text)?;
            }
        }
        Command::LambdaReport { checkpoint, csv } => {
            let model = PiTModel::load(&checkpoint)?;
            let rep = model.lambda_report();
            write!(out, "{}", lambda_report_table(&rep))?;
            if let Some(path) = csv {
                write_file(&path, &lambda_report_csv(&rep))?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// Smooth test field on the unit cube used by the convergence command.
pub fn smooth_field(y: &[f64]) -> Vec<f64> {
    use std::f64::consts::PI;
    vec![y
        .iter()
        .enumerate()
        .map(|(k, &t)| (2.0 * PI * t + k as f64).sin())
        .product()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("pit").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_are_validation_failures() {
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_VALIDATION);
        assert_eq!(run_capture(&["train"]).0, EXIT_VALIDATION);
        assert_eq!(run_capture(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn bad_config_reports_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 1\n\nmodel.depht = 2\n").unwrap();
        let out = dir.path().join("m.pitd");
        let (code, _, err) = run_capture(&[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_VALIDATION);
        assert!(err.contains("line 3") && err.contains("model.depht"), "{err}");
    }

    #[test]
    fn missing_checkpoint_is_a_runtime_failure() {
        let (code, _, _) = run_capture(&["lambda-report", "--checkpoint", "/nonexistent/ckpt.pitd"]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn smooth_field_is_bounded() {
        assert!(smooth_field(&[0.25, 0.5]).iter().all(|v| v.abs() <= 1.0));
    }
}
