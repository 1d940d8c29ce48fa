//! `meanflow`: train a flow-matching teacher, distill it into a few-step
//! average-velocity student, and evaluate both.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 unreadable or incompatible artifact.

mod jobs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use meanflow::autodiff::Fault;
use meanflow::checkpoint::Role;
use meanflow::config::RunConfig;
use meanflow::flow::OdeKind;
use meanflow::gradcheck::{run_gradcheck, DOT_TOL, GRAD_TOL};
use meanflow::io::write_json;

use jobs::{rerun, CliError, CliResult, Job, EXIT_VERIFY};

#[derive(Parser)]
#[command(name = "meanflow", version, about = "Toy MeanFlow distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Euler,
    Heun,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    TanhJvp,
    LinearVjp,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow-matching teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a teacher checkpoint into a student.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from a teacher (ODE) or student (few-step) checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        n: usize,
        /// Student evaluations (default 1).
        #[arg(long, conflicts_with = "steps")]
        nfe: Option<usize>,
        /// Teacher ODE steps (default 100).
        #[arg(long)]
        steps: Option<usize>,
        /// Teacher ODE integrator.
        #[arg(long, value_enum, default_value = "heun")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score samples against a reference file or fresh mixture draws.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, required_unless_present = "mixture_config")]
        reference: Option<PathBuf>,
        /// Config whose `data` and `metrics` sections define the target.
        #[arg(long)]
        mixture_config: Option<PathBuf>,
        /// Reference draws when no reference file is given.
        #[arg(long, default_value_t = 4096)]
        n_reference: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a network on a regular grid. Teachers ignore `--r`.
    ExportField {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        t: f64,
        /// `xmin,xmax,ymin,ymax`.
        #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [-9.0, 9.0, -9.0, 9.0])]
        bbox: Vec<f64>,
        #[arg(long)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every differentiation rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Re-run a command from its manifest into a new output location.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        meanflow::Error::Io { .. } => CliError::user(format!("cannot read config {e}")),
        _ => CliError::user(format!("config {}: {e}", path.display())),
    })?;
    if let Some(s) = seed {
        if cfg.distill.seed == cfg.seed {
            cfg.distill.seed = s;
        }
        cfg.seed = s;
    }
    Ok(cfg)
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_owned())
}

fn gradcheck(seed: u64, out: Option<&Path>, fault: Option<FaultArg>) -> CliResult<()> {
    let fault = match fault {
        None => Fault::None,
        Some(FaultArg::TanhJvp) => Fault::TanhJvp,
        Some(FaultArg::LinearVjp) => Fault::LinearVjp,
    };
    let report = run_gradcheck(seed, fault)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |e| format!("{e:.2e}"));
    println!("{:<18} {:>10} {:>10} {:>10}", "rule", "vjp", "jvp", "dot");
    for row in &report.rows {
        println!(
            "{:<18} {:>10} {:>10} {:>10}  {}",
            row.name,
            fmt(row.vjp_rel_err),
            fmt(row.jvp_rel_err),
            fmt(row.dot_rel_err),
            if row.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        write_json(path, &report).map_err(|e| CliError::user(format!("cannot write output: {e}")))?;
    }
    if report.passed() {
        println!("all {} rules within tolerance (grad {GRAD_TOL:e}, dot {DOT_TOL:e})", report.rows.len());
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_VERIFY,
            msg: format!("tolerance exceeded by: {}", report.failures().join(", ")),
        })
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (job, out) = match cli.command {
        Command::TrainTeacher { config, out, seed } => (
            Job::TrainTeacher {
                config: load_config(&config, seed)?,
            },
            out,
        ),
        Command::Distill {
            config,
            teacher,
            out,
            seed,
        } => (
            Job::Distill {
                config: load_config(&config, seed)?,
                teacher: absolute(&teacher),
            },
            out,
        ),
        Command::Sample {
            checkpoint,
            role,
            n,
            nfe,
            steps,
            method,
            seed,
            out,
        } => {
            let role = Role::from(role);
            let steps = match role {
                Role::Teacher => steps.or(nfe).unwrap_or(100),
                _ => nfe.or(steps).unwrap_or(1),
            };
            if steps == 0 {
                return Err(CliError::user("--nfe/--steps must be at least 1"));
            }
            let method = match method {
                MethodArg::Euler => OdeKind::Euler,
                MethodArg::Heun => OdeKind::Heun,
            };
            (
                Job::Sample {
                    checkpoint: absolute(&checkpoint),
                    role,
                    n,
                    steps,
                    method,
                    seed,
                },
                out,
            )
        }
        Command::Eval {
            samples,
            reference,
            mixture_config,
            n_reference,
            seed,
            out,
        } => {
            let cfg = match &mixture_config {
                Some(p) => load_config(p, None)?,
                None => RunConfig::default(),
            };
            (
                Job::Eval {
                    samples: absolute(&samples),
                    reference: reference.as_deref().map(absolute),
                    mixture: cfg.data,
                    metrics: cfg.metrics,
                    n_reference,
                    seed,
                },
                out,
            )
        }
        Command::ExportField {
            checkpoint,
            role,
            r,
            t,
            bbox,
            res,
            out,
        } => {
            let role = Role::from(role);
            if role == Role::Teacher && r.is_some() {
                eprintln!("warning: the teacher field does not depend on r; --r is ignored");
            }
            let r = match role {
                Role::Teacher => t,
                _ => r.unwrap_or(0.0),
            };
            if !(0.0..=1.0).contains(&t) || !(0.0..=t).contains(&r) {
                return Err(CliError::user(format!("need 0 <= r <= t <= 1, got r={r} t={t}")));
            }
            if res < 2 {
                return Err(CliError::user(format!("--res must be at least 2, got {res}")));
            }
            (
                Job::ExportField {
                    checkpoint: absolute(&checkpoint),
                    role,
                    r,
                    t,
                    bbox: [bbox[0], bbox[1], bbox[2], bbox[3]],
                    res,
                },
                out,
            )
        }
        Command::Gradcheck {
            seed,
            out,
            inject_fault,
        } => return gradcheck(seed, out.as_deref(), inject_fault),
        Command::Rerun { manifest, out } => {
            rerun(&manifest, &out)?;
            return Ok(());
        }
    };
    job.execute(&out)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
