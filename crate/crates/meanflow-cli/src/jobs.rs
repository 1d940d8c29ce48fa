//! Resolved command invocations. A [`Job`] holds everything a command needs
//! except its output location, so a manifest can replay it elsewhere.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use meanflow::autodiff::Tensor2;
use meanflow::checkpoint::{Checkpoint, Role};
use meanflow::config::{MetricsConfig, RunConfig};
use meanflow::data::{MixtureSpec, SeededRng};
use meanflow::distill::{sample_student, Distiller};
use meanflow::flow::{sample_with_field, train_teacher, OdeKind, OdeMethod};
use meanflow::io::{fingerprint, read_points, write_field, write_json, write_losses, write_points, write_run_log};
use meanflow::metrics::{field_grid, mean_seek_score, mmd2, mode_stats, BBox, Bandwidth};
use meanflow::Error;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USER: u8 = 2;
pub const EXIT_ARTIFACT: u8 = 3;

pub const MANIFEST_SCHEMA: u32 = 1;
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn user(msg: impl Display) -> Self {
        CliError {
            code: EXIT_USER,
            msg: msg.to_string(),
        }
    }

    pub fn artifact(msg: impl Display) -> Self {
        CliError {
            code: EXIT_ARTIFACT,
            msg: msg.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Artifact(_) | Error::Json(_) => CliError::artifact(e),
            _ => CliError::user(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Checkpoint reads fail as artifact errors, whatever the cause.
pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(CliError::artifact)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    TrainTeacher {
        config: RunConfig,
    },
    Distill {
        config: RunConfig,
        teacher: PathBuf,
    },
    Sample {
        checkpoint: PathBuf,
        role: Role,
        n: usize,
        /// Student NFE or teacher ODE steps.
        steps: usize,
        method: OdeKind,
        seed: u64,
    },
    Eval {
        samples: PathBuf,
        reference: Option<PathBuf>,
        mixture: MixtureSpec,
        metrics: MetricsConfig,
        n_reference: usize,
        seed: u64,
    },
    ExportField {
        checkpoint: PathBuf,
        role: Role,
        r: f64,
        t: f64,
        bbox: [f64; 4],
        res: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub path: PathBuf,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub index: usize,
    pub kind: String,
    pub start_iter: usize,
    pub end_iter: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub job: Job,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub stages: Vec<StageRecord>,
    pub wall_clock_s: f64,
}

/// Where a job writes: a directory for training jobs, a file otherwise.
pub fn manifest_path(job: &Job, out: &Path) -> PathBuf {
    if job.writes_directory() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

#[derive(Default)]
struct Outcome {
    artifacts: BTreeMap<String, PathBuf>,
    stages: Vec<StageRecord>,
}

impl Outcome {
    fn artifact(&mut self, name: &str, path: PathBuf) -> &Path {
        self.artifacts.insert(name.to_owned(), path);
        &self.artifacts[name]
    }
}

fn warn(msg: impl Display) {
    eprintln!("warning: {msg}");
}

fn write_err(e: Error) -> CliError {
    CliError::user(format!("cannot write output: {e}"))
}

impl Job {
    pub fn writes_directory(&self) -> bool {
        matches!(self, Job::TrainTeacher { .. } | Job::Distill { .. })
    }

    fn input_paths(&self) -> Vec<&Path> {
        match self {
            Job::TrainTeacher { .. } => vec![],
            Job::Distill { teacher, .. } => vec![teacher],
            Job::Sample { checkpoint, .. } | Job::ExportField { checkpoint, .. } => vec![checkpoint],
            Job::Eval { samples, reference, .. } => {
                let mut v: Vec<&Path> = vec![samples];
                v.extend(reference.as_deref());
                v
            }
        }
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        match self {
            Job::TrainTeacher { config } => {
                s.insert("root".into(), config.seed);
            }
            Job::Distill { config, .. } => {
                s.insert("root".into(), config.seed);
                s.insert("distill".into(), config.distill.seed);
            }
            Job::Sample { seed, .. } | Job::Eval { seed, .. } => {
                s.insert("root".into(), *seed);
            }
            Job::ExportField { .. } => {}
        }
        s
    }

    /// Runs the job, writing artifacts and the manifest under `out`.
    pub fn execute(&self, out: &Path) -> CliResult<Manifest> {
        let start = Instant::now();
        let inputs = self
            .input_paths()
            .into_iter()
            .map(|p| {
                let fp = fingerprint(p).map_err(|e| self.input_error(p, e))?;
                Ok(InputRecord {
                    path: p.to_owned(),
                    fingerprint: fp,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        if self.writes_directory() {
            fs::create_dir_all(out).map_err(|e| CliError::user(format!("cannot create {}: {e}", out.display())))?;
        }
        let outcome = match self {
            Job::TrainTeacher { config } => run_train_teacher(config, out)?,
            Job::Distill { config, teacher } => run_distill(config, teacher, out)?,
            Job::Sample {
                checkpoint,
                role,
                n,
                steps,
                method,
                seed,
            } => run_sample(checkpoint, *role, *n, *steps, *method, *seed, out)?,
            Job::Eval {
                samples,
                reference,
                mixture,
                metrics,
                n_reference,
                seed,
            } => run_eval(samples, reference.as_deref(), mixture, metrics, *n_reference, *seed, out)?,
            Job::ExportField {
                checkpoint,
                role,
                r,
                t,
                bbox,
                res,
            } => run_export_field(checkpoint, *role, *r, *t, *bbox, *res, out)?,
        };
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            job: self.clone(),
            seeds: self.seeds(),
            inputs,
            artifacts: outcome.artifacts,
            stages: outcome.stages,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        write_json(&manifest_path(self, out), &manifest).map_err(write_err)?;
        Ok(manifest)
    }

    fn input_error(&self, path: &Path, e: Error) -> CliError {
        match self {
            Job::Eval { .. } => CliError::user(e),
            _ => CliError::artifact(format!("cannot read {}: {e}", path.display())),
        }
    }
}

fn run_train_teacher(config: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let run = train_teacher(&config.teacher, &config.data, config.seed)?;
    let mut o = Outcome::default();
    Checkpoint::teacher(&run.teacher)
        .save(o.artifact("teacher", out.join("teacher.json")))
        .map_err(write_err)?;
    write_losses(o.artifact("losses", out.join("teacher_losses.csv")), &run.losses).map_err(write_err)?;
    o.stages.push(StageRecord {
        index: 0,
        kind: "cfm".into(),
        start_iter: 0,
        end_iter: run.losses.len(),
        wall_clock_s: t0.elapsed().as_secs_f64(),
    });
    Ok(o)
}

fn run_distill(config: &RunConfig, teacher: &Path, out: &Path) -> CliResult<Outcome> {
    let teacher = load_checkpoint(teacher)?.into_teacher().map_err(CliError::artifact)?;
    for w in config.distill.warnings() {
        warn(w);
    }
    let mut d = Distiller::new(&teacher, config.data, config.distill.clone())?;
    let mut o = Outcome::default();
    for (i, stage) in config.distill.stages.iter().enumerate() {
        let t0 = Instant::now();
        let start = d.log.len();
        d.run_stage(i, *stage)?;
        o.stages.push(StageRecord {
            index: i,
            kind: stage.kind.as_str().into(),
            start_iter: start,
            end_iter: d.log.len(),
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
    }
    let run = d.finish();
    if let Some(bad) = run.log.iter().find(|r| !r.record.all_finite()) {
        warn(format!("non-finite loss at iteration {}", bad.iter));
    }
    Checkpoint::student(&run.student)
        .save(o.artifact("student", out.join("student.json")))
        .map_err(write_err)?;
    Checkpoint::discriminator(&run.discriminator)
        .save(o.artifact("discriminator", out.join("discriminator.json")))
        .map_err(write_err)?;
    write_run_log(o.artifact("run_log", out.join("run_log.csv")), &run.log).map_err(write_err)?;
    Ok(o)
}

fn role_mismatch(ck: &Checkpoint, role: Role) -> CliResult<()> {
    if ck.role != role {
        return Err(CliError::artifact(format!(
            "checkpoint holds a {:?} network but --role {role:?} was requested",
            ck.role
        )));
    }
    Ok(())
}

fn run_sample(checkpoint: &Path, role: Role, n: usize, steps: usize, method: OdeKind, seed: u64, out: &Path) -> CliResult<Outcome> {
    let ck = load_checkpoint(checkpoint)?;
    role_mismatch(&ck, role)?;
    let mut rng = SeededRng::derive(seed, "sample");
    let samples = match role {
        Role::Teacher => {
            let teacher = ck.into_teacher().map_err(CliError::artifact)?;
            sample_with_field(&teacher, n, OdeMethod { kind: method, n_steps: steps }, &mut rng)?
        }
        Role::Student => {
            let student = ck.into_student().map_err(CliError::artifact)?;
            sample_student(&student, n, steps, &mut rng)?
        }
        Role::Discriminator => return Err(CliError::user("a discriminator cannot be sampled")),
    };
    let mut o = Outcome::default();
    write_points(o.artifact("samples", out.to_owned()), &samples).map_err(write_err)?;
    Ok(o)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    schema_version: u32,
    n_samples: usize,
    n_reference: usize,
    reference: &'a str,
    bandwidth: f64,
    mmd2: f64,
    per_mode_counts: Vec<usize>,
    outlier_count: usize,
    outlier_fraction: f64,
    assignment_radius: f64,
    mean_seek_score: f64,
    config: EvalEcho<'a>,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    data: &'a MixtureSpec,
    metrics: &'a MetricsConfig,
    seed: u64,
}

fn run_eval(
    samples: &Path,
    reference: Option<&Path>,
    mixture: &MixtureSpec,
    metrics: &MetricsConfig,
    n_reference: usize,
    seed: u64,
    out: &Path,
) -> CliResult<Outcome> {
    let x = read_points(samples)?;
    let (refs, source): (Tensor2, &str) = match reference {
        Some(p) => (read_points(p)?, "file"),
        None => (mixture.sample(n_reference, &mut SeededRng::derive(seed, "eval/reference")), "mixture"),
    };
    let bandwidth = match metrics.bandwidth {
        Some(h) => h,
        None => meanflow::metrics::median_heuristic(&x, &refs)?,
    };
    let value = mmd2(&x, &refs, Bandwidth::Fixed(bandwidth))?;
    let centers = mixture.centers();
    let stats = mode_stats(&x, &centers, mixture.sigma, metrics.k_radius)?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA,
        n_samples: x.rows(),
        n_reference: refs.rows(),
        reference: source,
        bandwidth,
        mmd2: value,
        mean_seek_score: mean_seek_score(&x, &centers, mixture.sigma, metrics.k_radius)?,
        per_mode_counts: stats.per_mode_counts,
        outlier_count: stats.outlier_count,
        outlier_fraction: stats.outlier_fraction,
        assignment_radius: stats.assignment_radius,
        config: EvalEcho {
            data: mixture,
            metrics,
            seed,
        },
    };
    let mut o = Outcome::default();
    write_json(o.artifact("metrics", out.to_owned()), &report).map_err(write_err)?;
    Ok(o)
}

fn run_export_field(checkpoint: &Path, role: Role, r: f64, t: f64, bbox: [f64; 4], res: usize, out: &Path) -> CliResult<Outcome> {
    if res < 2 {
        return Err(CliError::user(format!("--res must be at least 2, got {res}")));
    }
    let ck = load_checkpoint(checkpoint)?;
    role_mismatch(&ck, role)?;
    let bbox = BBox {
        x: (bbox[0], bbox[1]),
        y: (bbox[2], bbox[3]),
    };
    let rows = match role {
        Role::Teacher => {
            let teacher = ck.into_teacher().map_err(CliError::artifact)?;
            field_grid(|z| teacher.velocity(z, t), bbox, res)?
        }
        Role::Student => {
            let student = ck.into_student().map_err(CliError::artifact)?;
            field_grid(|z| student.forward(z, r, t), bbox, res)?
        }
        Role::Discriminator => return Err(CliError::user("export-field needs a teacher or student checkpoint")),
    };
    let mut o = Outcome::default();
    write_field(o.artifact("field", out.to_owned()), &rows).map_err(write_err)?;
    Ok(o)
}

/// Re-executes a manifest's job into `out` after checking that its inputs
/// are unchanged.
pub fn rerun(manifest: &Path, out: &Path) -> CliResult<Manifest> {
    let text = fs::read_to_string(manifest).map_err(|e| CliError::user(format!("{}: {e}", manifest.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::artifact(format!("{}: not a manifest: {e}", manifest.display())))?;
    if m.schema_version != MANIFEST_SCHEMA {
        return Err(CliError::artifact(format!(
            "manifest schema version {} (expected {MANIFEST_SCHEMA})",
            m.schema_version
        )));
    }
    for input in &m.inputs {
        let now = fingerprint(&input.path).map_err(CliError::artifact)?;
        if now != input.fingerprint {
            return Err(CliError::artifact(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    m.job.execute(out)
}
