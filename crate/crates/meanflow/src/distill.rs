//! The three-stage distillation of a teacher velocity field into an
//! average-velocity student.
//!
//! * **warm-up** regresses `u(z_t, r, t)` onto `(z_t - z_r^tch) / (t - r)`,
//!   where `z_r^tch` comes from integrating the teacher from `t` to `r`.
//!   The target never depends on the student.
//! * **differential** regresses onto `v(z_t, t) - (t - r)·du/dt`, with the
//!   total derivative taken along the teacher flow by a forward-mode pass
//!   with tangent `(v, 0, 1)` in `(z, r, t)`.
//! * **differential + TDA** adds `λ·L_adv`, a hinge GAN between one-jump
//!   student endpoints `z_t - (t - r)·u` and teacher ODE endpoints.
//!
//! All regression targets are constants for the optimizer. The teacher is
//! never updated.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamHyper, Graph, Tensor2, Var};
use crate::data::{sample_prior, MixtureSpec, SeededRng};
use crate::error::{Error, Result};
use crate::flow::{interpolate_rows, ode_solve_rows, OdeKind, OdeMethod, VelocityField};
use crate::net::{init_student_from_teacher, DiscriminatorNet, StudentNet, TeacherNet};

/// Below this interval length the discrete target uses its `r → t` limit,
/// the teacher velocity.
pub const DEGENERATE_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePair {
    r: f64,
    t: f64,
}

impl TimePair {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        if !(0.0 <= r && r <= t && t <= 1.0) {
            return Err(Error::contract(format!("time pair needs 0 <= r <= t <= 1, got r={r} t={t}")));
        }
        Ok(TimePair { r, t })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn gap(&self) -> f64 {
        self.t - self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimePolicy {
    /// Probability of drawing the boundary case `r = t`.
    pub rho_boundary: f64,
    pub min_gap: f64,
}

impl Default for TimePolicy {
    fn default() -> Self {
        TimePolicy {
            rho_boundary: 0.25,
            min_gap: 0.0,
        }
    }
}

impl TimePolicy {
    /// Only intervals of length at least one half. Endpoint matching gets
    /// little signal from short intervals, where student and teacher
    /// endpoints barely differ.
    pub const LONG_INTERVALS: TimePolicy = TimePolicy {
        rho_boundary: 0.0,
        min_gap: 0.5,
    };

    fn invalid_keys(&self, prefix: &str) -> Vec<String> {
        let mut keys = Vec::new();
        if !(0.0..=1.0).contains(&self.rho_boundary) {
            keys.push(format!("{prefix}.rho_boundary"));
        }
        if !(0.0..1.0).contains(&self.min_gap) {
            keys.push(format!("{prefix}.min_gap"));
        }
        keys
    }
}

/// With probability `rho_boundary`, `r = t ~ U(0, 1)`; otherwise
/// `t ~ U(min_gap, 1)` and `r ~ U(0, t - min_gap)`.
pub fn sample_time_pair(rng: &mut SeededRng, policy: &TimePolicy) -> TimePair {
    if rng.uniform() < policy.rho_boundary {
        let t = rng.uniform();
        return TimePair { r: t, t };
    }
    let t = policy.min_gap + (1.0 - policy.min_gap) * rng.uniform();
    let r = (t - policy.min_gap) * rng.uniform();
    TimePair { r, t }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    WarmUp,
    Differential,
    DifferentialTda,
}

impl StageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::WarmUp => "warm_up",
            StageKind::Differential => "differential",
            StageKind::DifferentialTda => "differential_tda",
        }
    }
}

/// One entry of the schedule. `time_policy` and `lr_student` replace the
/// config-wide values for this stage only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillStage {
    pub kind: StageKind,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_policy: Option<TimePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_student: Option<f64>,
}

impl DistillStage {
    pub fn new(kind: StageKind, iterations: usize) -> Self {
        DistillStage {
            kind,
            iterations,
            time_policy: None,
            lr_student: None,
        }
    }

    /// The config this stage actually trains with.
    pub fn effective_config(&self, base: &DistillConfig) -> DistillConfig {
        let mut cfg = base.clone();
        if let Some(p) = self.time_policy {
            cfg.time_policy = p;
        }
        if let Some(lr) = self.lr_student {
            cfg.lr_student = lr;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub stages: Vec<DistillStage>,
    pub lambda_tda: f64,
    pub lr_student: f64,
    pub lr_disc: f64,
    /// Adam `beta1` for the discriminator.
    pub disc_beta1: f64,
    pub batch: usize,
    pub ode_substeps: usize,
    pub ode_kind: OdeKind,
    pub time_policy: TimePolicy,
    pub disc_hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            stages: vec![
                DistillStage::new(StageKind::WarmUp, 3000),
                DistillStage::new(StageKind::Differential, 2000),
                DistillStage {
                    time_policy: Some(TimePolicy::LONG_INTERVALS),
                    ..DistillStage::new(StageKind::DifferentialTda, 1000)
                },
            ],
            lambda_tda: 10.0,
            lr_student: 1e-4,
            lr_disc: 1e-3,
            disc_beta1: 0.5,
            batch: 128,
            ode_substeps: 8,
            ode_kind: OdeKind::Heun,
            time_policy: TimePolicy::default(),
            disc_hidden_dims: vec![128, 128, 128],
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let mut keys = Vec::new();
        if !(self.lambda_tda >= 0.0 && self.lambda_tda.is_finite()) {
            keys.push("distill.lambda_tda".to_owned());
        }
        if !(self.lr_student > 0.0 && self.lr_student.is_finite()) {
            keys.push("distill.lr_student".to_owned());
        }
        if !(self.lr_disc > 0.0 && self.lr_disc.is_finite()) {
            keys.push("distill.lr_disc".to_owned());
        }
        if !(0.0..1.0).contains(&self.disc_beta1) {
            keys.push("distill.disc_beta1".to_owned());
        }
        if self.batch == 0 {
            keys.push("distill.batch".to_owned());
        }
        if self.ode_substeps == 0 {
            keys.push("distill.ode_substeps".to_owned());
        }
        if self.disc_hidden_dims.is_empty() || self.disc_hidden_dims.contains(&0) {
            keys.push("distill.disc_hidden_dims".to_owned());
        }
        keys.extend(self.time_policy.invalid_keys("distill.time_policy"));
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(p) = &stage.time_policy {
                keys.extend(p.invalid_keys(&format!("distill.stages[{i}].time_policy")));
            }
            if stage.lr_student.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
                keys.push(format!("distill.stages[{i}].lr_student"));
            }
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }

    pub fn ode_method(&self) -> OdeMethod {
        OdeMethod {
            kind: self.ode_kind,
            n_steps: self.ode_substeps,
        }
    }

    pub fn student_adam(&self) -> AdamHyper {
        AdamHyper::with_lr(self.lr_student)
    }

    pub fn disc_adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_disc,
            beta1: self.disc_beta1,
            ..AdamHyper::default()
        }
    }

    /// Non-fatal problems with the stage list.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stages.is_empty() {
            out.push("no distillation stages configured".to_owned());
        }
        let first_tda = self
            .stages
            .iter()
            .position(|s| s.kind == StageKind::DifferentialTda && s.iterations > 0);
        if let Some(i) = first_tda {
            let prepared = self.stages[..i]
                .iter()
                .any(|s| s.kind != StageKind::DifferentialTda && s.iterations > 0);
            if !prepared {
                out.push(format!(
                    "stage {i} (differential_tda) runs before any warm_up or differential stage"
                ));
            }
        }
        out
    }
}

fn coef(pairs: &[TimePair], f: impl Fn(&TimePair) -> f64) -> Vec<f64> {
    pairs.iter().map(f).collect()
}

fn split(pairs: &[TimePair]) -> (Vec<f64>, Vec<f64>) {
    (coef(pairs, |p| p.r), coef(pairs, |p| p.t))
}

fn check_batch(z_t: &Tensor2, pairs: &[TimePair]) -> Result<()> {
    if z_t.rows() != pairs.len() {
        return Err(Error::shape(
            "distill",
            format!("{} rows but {} time pairs", z_t.rows(), pairs.len()),
        ));
    }
    Ok(())
}

/// `(z_t - z_r^tch) / (t - r)` per row along with `z_r^tch`. Rows with a
/// gap below [`DEGENERATE_GAP`] get the teacher velocity `v(z_t, t)`.
pub fn discrete_target_rows<F: VelocityField + ?Sized>(
    teacher: &F,
    z_t: &Tensor2,
    pairs: &[TimePair],
    method: OdeMethod,
) -> Result<(Tensor2, Tensor2)> {
    check_batch(z_t, pairs)?;
    let (r, t) = split(pairs);
    let z_r = ode_solve_rows(teacher, z_t, &t, &r, method)?;
    let mut target = z_t.sub(&z_r);
    let degenerate: Vec<usize> = (0..pairs.len())
        .filter(|&i| pairs[i].gap() < DEGENERATE_GAP)
        .collect();
    for (i, p) in pairs.iter().enumerate() {
        if p.gap() >= DEGENERATE_GAP {
            let inv = 1.0 / p.gap();
            target.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
    }
    if !degenerate.is_empty() {
        let zs = z_t.select_rows(&degenerate);
        let ts: Vec<f64> = degenerate.iter().map(|&i| pairs[i].t).collect();
        let v = teacher.velocity(&zs, &ts)?;
        for (k, &i) in degenerate.iter().enumerate() {
            target.row_mut(i).copy_from_slice(v.row(k));
        }
    }
    Ok((target, z_r))
}

pub fn discrete_target<F: VelocityField + ?Sized>(
    teacher: &F,
    z_t: &Tensor2,
    pair: TimePair,
    substeps: usize,
) -> Result<Tensor2> {
    let pairs = vec![pair; z_t.rows()];
    Ok(discrete_target_rows(teacher, z_t, &pairs, OdeMethod::heun(substeps))?.0)
}

/// Builds `u(z_t, r, t)` with forward tangents `(v, 0, 1)` and returns the
/// recorded output plus the constant target `v - (t - r)·du/dt`.
fn differential_parts(
    g: &mut Graph,
    student: &StudentNet,
    z_t: &Tensor2,
    pairs: &[TimePair],
    v: &Tensor2,
) -> Result<(Var, Tensor2)> {
    let (r, t) = split(pairs);
    let z = g.input_dual(crate::autodiff::DualBatch::with_tangent(z_t.clone(), v.clone())?);
    let u = student.build(g, z, &r, &t, true)?;
    let dudt = g.tangent_or_zero(u);
    let neg_gap = coef(pairs, |p| -(p.t - p.r));
    Ok((u, v.add_scaled_rows(&dudt, &neg_gap)))
}

/// `v(z_t, t) - (t - r)·du/dt` per row, returned as a plain (gradient-free) tensor.
pub fn differential_target_rows(
    teacher: &TeacherNet,
    student: &StudentNet,
    z_t: &Tensor2,
    pairs: &[TimePair],
) -> Result<Tensor2> {
    check_batch(z_t, pairs)?;
    let (_, t) = split(pairs);
    let v = teacher.velocity_rows(z_t, &t)?;
    let mut g = Graph::new();
    Ok(differential_parts(&mut g, student, z_t, pairs, &v)?.1)
}

pub fn differential_target(
    teacher: &TeacherNet,
    student: &StudentNet,
    z_t: &Tensor2,
    pair: TimePair,
) -> Result<Tensor2> {
    differential_target_rows(teacher, student, z_t, &vec![pair; z_t.rows()])
}

/// `mean ‖u(z_t, r, t) - target‖²`; `target` is treated as a constant.
pub fn meanflow_loss(
    student: &StudentNet,
    z_t: &Tensor2,
    pairs: &[TimePair],
    target: &Tensor2,
) -> Result<f64> {
    check_batch(z_t, pairs)?;
    let (r, t) = split(pairs);
    let mut g = Graph::new();
    let z = g.constant(z_t.clone());
    let u = student.build(&mut g, z, &r, &t, false)?;
    let loss = g.mse(u, target)?;
    Ok(g.value(loss).item())
}

/// `z_t - (t - r)·u` per row.
pub fn student_endpoint(z_t: &Tensor2, pairs: &[TimePair], u: &Tensor2) -> Result<Tensor2> {
    check_batch(z_t, pairs)?;
    z_t.check_same_shape(u, "student_endpoint")?;
    Ok(z_t.add_scaled_rows(u, &coef(pairs, |p| -(p.t - p.r))))
}

/// Records the hinge discriminator loss
/// `mean relu(1 - D(real, r)) + mean relu(1 + D(fake, r))`.
pub fn tda_disc_loss_graph(
    g: &mut Graph,
    disc: &DiscriminatorNet,
    real: Var,
    fake: Var,
    r: &[f64],
) -> Result<Var> {
    let d_real = disc.build(g, real, r)?;
    let d_fake = disc.build(g, fake, r)?;
    let real_margin = g.affine(d_real, -1.0, 1.0);
    let real_hinge = g.relu(real_margin);
    let real_term = g.mean(real_hinge);
    let fake_margin = g.affine(d_fake, 1.0, 1.0);
    let fake_hinge = g.relu(fake_margin);
    let fake_term = g.mean(fake_hinge);
    g.add(real_term, fake_term)
}

/// Records the generator loss `-mean D(fake, r)`.
pub fn tda_gen_loss_graph(g: &mut Graph, disc: &DiscriminatorNet, fake: Var, r: &[f64]) -> Result<Var> {
    let d_fake = disc.build(g, fake, r)?;
    let m = g.mean(d_fake);
    Ok(g.scale(m, -1.0))
}

pub fn tda_disc_loss(disc: &DiscriminatorNet, real: &Tensor2, fake: &Tensor2, r: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
    let loss = tda_disc_loss_graph(&mut g, disc, rv, fv, r)?;
    Ok(g.value(loss).item())
}

pub fn tda_gen_loss(disc: &DiscriminatorNet, fake: &Tensor2, r: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let fv = g.constant(fake.clone());
    let loss = tda_gen_loss_graph(&mut g, disc, fv, r)?;
    Ok(g.value(loss).item())
}

/// One training minibatch: data, noise, time pairs and the path point.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x: Tensor2,
    pub eps: Tensor2,
    pub pairs: Vec<TimePair>,
    pub z_t: Tensor2,
}

impl StepBatch {
    pub fn draw(mixture: &MixtureSpec, n: usize, policy: &TimePolicy, rng: &mut SeededRng) -> Result<Self> {
        let x = mixture.sample(n, rng);
        let eps = sample_prior(n, rng);
        let pairs: Vec<TimePair> = (0..n).map(|_| sample_time_pair(rng, policy)).collect();
        let t = coef(&pairs, |p| p.t);
        let z_t = interpolate_rows(&x, &eps, &t)?;
        Ok(StepBatch { x, eps, pairs, z_t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub mf_loss: f64,
    pub tda_g_loss: Option<f64>,
    pub tda_d_loss: Option<f64>,
}

impl StepRecord {
    pub fn all_finite(&self) -> bool {
        self.mf_loss.is_finite()
            && self.tda_g_loss.is_none_or(f64::is_finite)
            && self.tda_d_loss.is_none_or(f64::is_finite)
    }
}

/// One optimization step of the given stage kind. Only `student` and
/// `disc` change.
pub fn distill_step(
    kind: StageKind,
    teacher: &TeacherNet,
    student: &mut StudentNet,
    disc: &mut DiscriminatorNet,
    batch: &StepBatch,
    config: &DistillConfig,
) -> Result<StepRecord> {
    let pairs = &batch.pairs;
    let (r, t) = split(pairs);
    let mut record = StepRecord {
        mf_loss: 0.0,
        tda_g_loss: None,
        tda_d_loss: None,
    };
    let grads = match kind {
        StageKind::WarmUp => {
            let (target, _) = discrete_target_rows(teacher, &batch.z_t, pairs, config.ode_method())?;
            let mut g = Graph::new();
            let z = g.constant(batch.z_t.clone());
            let u = student.build(&mut g, z, &r, &t, false)?;
            let loss = g.mse(u, &target)?;
            record.mf_loss = g.value(loss).item();
            g.backward(loss)?
        }
        StageKind::Differential | StageKind::DifferentialTda => {
            let v = teacher.velocity_rows(&batch.z_t, &t)?;
            let mut g = Graph::new();
            let (u, target) = differential_parts(&mut g, student, &batch.z_t, pairs, &v)?;
            let mf = g.mse(u, &target)?;
            record.mf_loss = g.value(mf).item();
            if kind == StageKind::Differential {
                g.backward(mf)?
            } else {
                let z_tch = ode_solve_rows(teacher, &batch.z_t, &t, &r, config.ode_method())?;
                let neg_gap = coef(pairs, |p| -(p.t - p.r));
                let z_stu_value = batch.z_t.add_scaled_rows(g.value(u), &neg_gap);

                // discriminator step on detached endpoints
                let d_grads = {
                    let mut gd = Graph::new();
                    let real = gd.constant(z_tch);
                    let fake = gd.constant(z_stu_value);
                    let loss = tda_disc_loss_graph(&mut gd, disc, real, fake, &r)?;
                    record.tda_d_loss = Some(gd.value(loss).item());
                    gd.backward(loss)?
                };
                d_grads.apply_to(disc.params_mut());
                disc.params_mut().adam_step(&config.disc_adam());

                // student step against the updated discriminator
                let z_const = g.constant(batch.z_t.clone());
                let z_stu = g.add_scaled_rows(z_const, u, &neg_gap)?;
                let gen = tda_gen_loss_graph(&mut g, disc, z_stu, &r)?;
                record.tda_g_loss = Some(g.value(gen).item());
                let weighted = g.scale(gen, config.lambda_tda);
                let total = g.add(mf, weighted)?;
                g.backward(total)?
            }
        }
    };
    // gradients bound from the discriminator scope are not applied here
    grads.apply_to(student.params_mut());
    student.params_mut().adam_step(&config.student_adam());
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub stage: StageKind,
    #[serde(flatten)]
    pub record: StepRecord,
}

/// Iteration range `[start, end)` covered by one configured stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageSpan {
    pub index: usize,
    pub kind: StageKind,
    pub start: usize,
    pub end: usize,
}

/// Resumable distillation state. Each stage draws from its own random
/// stream keyed by stage index, so runs whose stage lists share a prefix
/// agree on that prefix bit for bit.
#[derive(Debug, Clone)]
pub struct Distiller<'a> {
    teacher: &'a TeacherNet,
    mixture: MixtureSpec,
    config: DistillConfig,
    pub student: StudentNet,
    pub discriminator: DiscriminatorNet,
    pub log: Vec<LogRow>,
    pub spans: Vec<StageSpan>,
}

impl<'a> Distiller<'a> {
    pub fn new(teacher: &'a TeacherNet, mixture: MixtureSpec, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        mixture.validate()?;
        let spec = StudentNet::spec_for(&teacher.mlp.spec.hidden_dims, teacher.time);
        let student = init_student_from_teacher(teacher, &spec)?;
        let discriminator = DiscriminatorNet::new(
            &config.disc_hidden_dims,
            teacher.time,
            &mut SeededRng::derive(config.seed, "distill/disc_init"),
        )?;
        Ok(Distiller {
            teacher,
            mixture,
            config,
            student,
            discriminator,
            log: Vec::new(),
            spans: Vec::new(),
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    /// Runs `stage` as the `index`-th stage of the schedule.
    pub fn run_stage(&mut self, index: usize, stage: DistillStage) -> Result<()> {
        let mut rng = SeededRng::derive(self.config.seed, &format!("distill/stage{index}"));
        let cfg = stage.effective_config(&self.config);
        cfg.validate()?;
        let start = self.log.len();
        for _ in 0..stage.iterations {
            let batch = StepBatch::draw(&self.mixture, cfg.batch, &cfg.time_policy, &mut rng)?;
            let record = distill_step(
                stage.kind,
                self.teacher,
                &mut self.student,
                &mut self.discriminator,
                &batch,
                &cfg,
            )?;
            self.log.push(LogRow {
                iter: self.log.len(),
                stage: stage.kind,
                record,
            });
        }
        self.spans.push(StageSpan {
            index,
            kind: stage.kind,
            start,
            end: self.log.len(),
        });
        Ok(())
    }

    pub fn run_all(&mut self) -> Result<()> {
        let stages = self.config.stages.clone();
        for (i, stage) in stages.into_iter().enumerate() {
            self.run_stage(i, stage)?;
        }
        Ok(())
    }

    pub fn finish(self) -> DistillRun {
        DistillRun {
            warnings: self.config.warnings(),
            student: self.student,
            discriminator: self.discriminator,
            log: self.log,
            spans: self.spans,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub student: StudentNet,
    pub discriminator: DiscriminatorNet,
    pub log: Vec<LogRow>,
    pub spans: Vec<StageSpan>,
    pub warnings: Vec<String>,
}

/// Runs every configured stage in order on one student initialized from
/// the teacher.
pub fn run_distillation(teacher: &TeacherNet, mixture: &MixtureSpec, config: &DistillConfig) -> Result<DistillRun> {
    let mut d = Distiller::new(teacher, *mixture, config.clone())?;
    d.run_all()?;
    Ok(d.finish())
}

/// Few-step sampling on the uniform grid `tᵢ = 1 - i/nfe`, applying
/// `z ← z - (tᵢ - tᵢ₊₁)·u(z, tᵢ₊₁, tᵢ)` from prior draws.
pub fn sample_student(student: &StudentNet, n: usize, nfe: usize, rng: &mut SeededRng) -> Result<Tensor2> {
    if nfe == 0 {
        return Err(Error::contract("sample_student needs nfe >= 1"));
    }
    let mut z = sample_prior(n, rng);
    for i in 0..nfe {
        let t = 1.0 - i as f64 / nfe as f64;
        let r = if i + 1 == nfe {
            0.0
        } else {
            1.0 - (i + 1) as f64 / nfe as f64
        };
        let u = student.forward(&z, r, t)?;
        z = z.add_scaled_rows(&u, &vec![-(t - r); n]);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, rel_err, ParamSet};
    use crate::net::{bias_name, weight_name, TimeEncoding};

    fn pairs(n: usize, r: f64, t: f64) -> Vec<TimePair> {
        vec![TimePair::new(r, t).unwrap(); n]
    }

    fn zero_params(p: &mut ParamSet) {
        for (_, e) in p.iter_mut() {
            e.value.as_mut_slice().fill(0.0);
        }
    }

    /// Teacher whose output is the constant `c` (all weights zero, output bias `c`).
    fn constant_teacher(c: [f64; 2]) -> TeacherNet {
        let mut t = TeacherNet::new(&[4], TimeEncoding::default(), &mut SeededRng::new(1)).unwrap();
        zero_params(t.params_mut());
        t.params_mut()
            .set_value(&bias_name(1), Tensor2::row_vector(&c))
            .unwrap();
        t
    }

    fn small_teacher(seed: u64) -> TeacherNet {
        TeacherNet::new(&[12, 12], TimeEncoding::default(), &mut SeededRng::new(seed)).unwrap()
    }

    fn small_student(seed: u64) -> StudentNet {
        StudentNet::new(&[12, 12], TimeEncoding::default(), &mut SeededRng::new(seed)).unwrap()
    }

    fn small_disc(seed: u64) -> DiscriminatorNet {
        DiscriminatorNet::new(&[8, 8], TimeEncoding::default(), &mut SeededRng::new(seed)).unwrap()
    }

    fn probe(n: usize, seed: u64) -> Tensor2 {
        sample_prior(n, &mut SeededRng::new(seed))
    }

    #[test]
    fn time_pairs_respect_policy() {
        let mut rng = SeededRng::new(1);
        let always = TimePolicy {
            rho_boundary: 1.0,
            min_gap: 0.0,
        };
        for _ in 0..100 {
            let p = sample_time_pair(&mut rng, &always);
            assert_eq!(p.r(), p.t());
        }
        let policy = TimePolicy {
            rho_boundary: 0.3,
            min_gap: 0.1,
        };
        for _ in 0..10_000 {
            let p = sample_time_pair(&mut rng, &policy);
            assert!(0.0 <= p.r() && p.r() <= p.t() && p.t() <= 1.0);
        }
        assert!(TimePair::new(0.5, 0.4).is_err());
    }

    #[test]
    fn mean_t_matches_uniform_on_gap_interval() {
        let policy = TimePolicy {
            rho_boundary: 0.0,
            min_gap: 0.2,
        };
        let mut rng = SeededRng::new(2);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_time_pair(&mut rng, &policy).t()).sum::<f64>() / n as f64;
        assert!((mean - 0.6).abs() < 0.01, "{mean}");
    }

    #[test]
    fn discrete_target_of_constant_field() {
        let teacher = constant_teacher([0.5, -1.5]);
        let z = probe(6, 3);
        for (r, t) in [(0.0, 1.0), (0.2, 0.7), (0.4, 0.4)] {
            let target = discrete_target(&teacher, &z, TimePair::new(r, t).unwrap(), 8).unwrap();
            for row in target.iter_rows() {
                assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_target_limit_rule() {
        let teacher = small_teacher(4);
        let z = probe(5, 4);
        let target = discrete_target(&teacher, &z, TimePair::new(0.3, 0.3).unwrap(), 8).unwrap();
        assert_eq!(target, teacher.velocity(&z, 0.3).unwrap());
        let tiny = discrete_target(&teacher, &z, TimePair::new(0.3, 0.3 + 1e-12).unwrap(), 8).unwrap();
        assert_eq!(tiny, teacher.velocity(&z, 0.3 + 1e-12).unwrap());
    }

    #[test]
    fn endpoint_inverts_discrete_target() {
        let teacher = small_teacher(6);
        let z = probe(5, 7);
        let ps = pairs(5, 0.1, 0.8);
        let (target, z_r) = discrete_target_rows(&teacher, &z, &ps, OdeMethod::heun(8)).unwrap();
        let end = student_endpoint(&z, &ps, &target).unwrap();
        assert!(end.sub(&z_r).max_abs() < 1e-12);
    }

    #[test]
    fn endpoint_cases() {
        let z = Tensor2::row_vector(&[2.0, 2.0]);
        let u = Tensor2::row_vector(&[2.0, 2.0]);
        assert_eq!(
            student_endpoint(&z, &pairs(1, 0.0, 0.5), &u).unwrap().as_slice(),
            &[1.0, 1.0]
        );
        assert_eq!(student_endpoint(&z, &pairs(1, 0.5, 0.5), &u).unwrap(), z);
    }

    #[test]
    fn differential_target_at_boundary_is_teacher() {
        let teacher = small_teacher(8);
        let student = small_student(9);
        let z = probe(7, 10);
        let target = differential_target(&teacher, &student, &z, TimePair::new(0.6, 0.6).unwrap()).unwrap();
        let v = teacher.velocity(&z, 0.6).unwrap();
        assert!(target
            .as_slice()
            .iter()
            .zip(v.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn differential_target_with_constant_student_is_teacher() {
        let teacher = small_teacher(8);
        let mut student = small_student(9);
        student
            .params_mut()
            .set_value(&weight_name(2), Tensor2::zeros(12, 2))
            .unwrap();
        let z = probe(4, 11);
        let target = differential_target(&teacher, &student, &z, TimePair::new(0.1, 0.9).unwrap()).unwrap();
        assert_eq!(target, teacher.velocity(&z, 0.9).unwrap());
    }

    #[test]
    fn differential_target_closed_form() {
        // one hidden layer: u = W₂ᵀ tanh(W₁ᵀ x + b₁) + b₂ with x = [z, feat(t), feat(r)],
        // so du/dt = W₂ᵀ diag(1 - h²) W₁ᵀ [c, feat'(t), 0] for a constant teacher c
        let c = [0.25, -0.75];
        let teacher = constant_teacher(c);
        let enc = TimeEncoding::default();
        let student = StudentNet::new(&[5], enc, &mut SeededRng::new(12)).unwrap();
        let w1 = student.params().value(&weight_name(0)).unwrap().clone();
        let b1 = student.params().value(&bias_name(0)).unwrap().clone();
        let w2 = student.params().value(&weight_name(1)).unwrap().clone();
        let z = probe(3, 13);
        let (r, t) = (0.2, 0.7);
        let (ft, fr, dft) = (enc.features(t).unwrap(), enc.features(r).unwrap(), enc.derivative(t).unwrap());
        let target = differential_target(&teacher, &student, &z, TimePair::new(r, t).unwrap()).unwrap();
        for (i, zi) in z.iter_rows().enumerate() {
            let x: Vec<f64> = zi.iter().chain(&ft).chain(&fr).copied().collect();
            let xdot: Vec<f64> = c.iter().chain(&dft).copied().chain(fr.iter().map(|_| 0.0)).collect();
            for k in 0..2 {
                let mut dudt = 0.0;
                for j in 0..5 {
                    let pre: f64 = b1.get(0, j) + (0..x.len()).map(|a| x[a] * w1.get(a, j)).sum::<f64>();
                    let dpre: f64 = (0..x.len()).map(|a| xdot[a] * w1.get(a, j)).sum();
                    dudt += w2.get(j, k) * (1.0 - pre.tanh().powi(2)) * dpre;
                }
                let expected = c[k] - (t - r) * dudt;
                assert!((target.get(i, k) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meanflow_loss_zero_at_target_and_fd_gradient() {
        let student = small_student(14);
        let z = probe(6, 15);
        let ps = pairs(6, 0.25, 0.75);
        let u = student.forward(&z, 0.25, 0.75).unwrap();
        assert_eq!(meanflow_loss(&student, &z, &ps, &u).unwrap(), 0.0);

        let target = probe(6, 16);
        let fd = finite_diff_gradient(
            |w| {
                let mut s = student.clone();
                s.params_mut().set_flat_values(w).unwrap();
                meanflow_loss(&s, &z, &ps, &target).unwrap()
            },
            &student.params().flat_values(),
            1e-5,
        );
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let uv = student.build(&mut g, zv, &[0.25; 6], &[0.75; 6], false).unwrap();
        let loss = g.mse(uv, &target).unwrap();
        let mut p = student.params().clone();
        g.backward(loss).unwrap().apply_to(&mut p);
        let err = rel_err(&Tensor2::row_vector(&p.flat_grads()), &Tensor2::row_vector(&fd), 1e-12);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn hinge_loss_cases() {
        let mut disc = small_disc(1);
        zero_params(disc.params_mut());
        let real = probe(4, 1);
        let fake = probe(4, 2);
        let r = [0.5; 4];
        assert_eq!(tda_disc_loss(&disc, &real, &fake, &r).unwrap(), 2.0);
        assert_eq!(tda_gen_loss(&disc, &fake, &r).unwrap(), 0.0);

        // constant logits ±2 silence one hinge term and leave 3 in the other
        disc.params_mut()
            .set_value(&bias_name(2), Tensor2::scalar(2.0))
            .unwrap();
        let real_only = tda_disc_loss(&disc, &real, &fake, &r).unwrap();
        assert_eq!(real_only, 3.0);
        disc.params_mut()
            .set_value(&bias_name(2), Tensor2::scalar(-2.0))
            .unwrap();
        assert_eq!(tda_disc_loss(&disc, &real, &fake, &r).unwrap(), 3.0);
    }

    #[test]
    fn hinge_zero_when_separated() {
        // D(z) = 10·z₀ on a single-unit path: real at z₀ = 1, fake at z₀ = -1
        let mut disc = DiscriminatorNet::new(&[1], TimeEncoding::default(), &mut SeededRng::new(0)).unwrap();
        zero_params(disc.params_mut());
        let mut w0 = Tensor2::zeros(11, 1);
        w0.set(0, 0, 1.0);
        disc.params_mut().set_value(&weight_name(0), w0).unwrap();
        disc.params_mut()
            .set_value(&weight_name(1), Tensor2::scalar(10.0))
            .unwrap();
        let real = Tensor2::from_rows(&[vec![1.0, 0.0], vec![2.0, 5.0]]).unwrap();
        let fake = Tensor2::from_rows(&[vec![-1.0, 0.0], vec![-3.0, 1.0]]).unwrap();
        assert_eq!(tda_disc_loss(&disc, &real, &fake, &[0.3, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn disc_loss_gradient_matches_fd() {
        let disc = small_disc(3);
        let real = probe(5, 4).scale(0.5);
        let fake = probe(5, 5).scale(0.5);
        let r = [0.1, 0.4, 0.5, 0.9, 0.0];
        let fd = finite_diff_gradient(
            |w| {
                let mut d = disc.clone();
                d.params_mut().set_flat_values(w).unwrap();
                tda_disc_loss(&d, &real, &fake, &r).unwrap()
            },
            &disc.params().flat_values(),
            1e-5,
        );
        let mut g = Graph::new();
        let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
        let loss = tda_disc_loss_graph(&mut g, &disc, rv, fv, &r).unwrap();
        let mut p = disc.params().clone();
        g.backward(loss).unwrap().apply_to(&mut p);
        let err = rel_err(&Tensor2::row_vector(&p.flat_grads()), &Tensor2::row_vector(&fd), 1e-12);
        assert!(err <= 1e-5, "{err}");
    }

    /// `-λ mean D(z_t - (t-r) u_θ)` differentiated w.r.t. θ through the endpoint.
    #[test]
    fn gen_loss_gradient_reaches_student() {
        let student = small_student(21);
        let disc = small_disc(22);
        let z = probe(4, 23);
        let ps = pairs(4, 0.2, 0.9);
        let r = [0.2; 4];
        let gen_of = |s: &StudentNet| {
            let u = s.forward(&z, 0.2, 0.9).unwrap();
            let end = student_endpoint(&z, &ps, &u).unwrap();
            tda_gen_loss(&disc, &end, &r).unwrap()
        };
        let fd = finite_diff_gradient(
            |w| {
                let mut s = student.clone();
                s.params_mut().set_flat_values(w).unwrap();
                gen_of(&s)
            },
            &student.params().flat_values(),
            1e-5,
        );
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let u = student.build(&mut g, zv, &[0.2; 4], &[0.9; 4], false).unwrap();
        let zc = g.constant(z.clone());
        let end = g.add_scaled_rows(zc, u, &[-0.7; 4]).unwrap();
        let loss = tda_gen_loss_graph(&mut g, &disc, end, &r).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut p = student.params().clone();
        grads.apply_to(&mut p);
        let err = rel_err(&Tensor2::row_vector(&p.flat_grads()), &Tensor2::row_vector(&fd), 1e-12);
        assert!(err <= 1e-5, "{err}");

        // zero discriminator: zero loss, zero student gradient
        let mut zero = disc.clone();
        zero_params(zero.params_mut());
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let u = student.build(&mut g, zv, &[0.2; 4], &[0.9; 4], false).unwrap();
        let zc = g.constant(z.clone());
        let end = g.add_scaled_rows(zc, u, &[-0.7; 4]).unwrap();
        let loss = tda_gen_loss_graph(&mut g, &zero, end, &r).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let mut p = student.params().clone();
        g.backward(loss).unwrap().apply_to(&mut p);
        assert!(p.flat_grads().iter().all(|&v| v == 0.0));
    }

    fn tiny_config(stages: Vec<DistillStage>) -> DistillConfig {
        DistillConfig {
            stages,
            batch: 16,
            disc_hidden_dims: vec![8, 8],
            lr_student: 1e-3,
            lr_disc: 1e-3,
            ..DistillConfig::default()
        }
    }

    fn stage(kind: StageKind, iterations: usize) -> DistillStage {
        DistillStage::new(kind, iterations)
    }

    #[test]
    fn teacher_untouched_and_losses_finite() {
        let teacher = small_teacher(30);
        let before = teacher.clone();
        let cfg = tiny_config(vec![
            stage(StageKind::WarmUp, 3),
            stage(StageKind::Differential, 3),
            stage(StageKind::DifferentialTda, 3),
        ]);
        let run = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        assert!(teacher.params().values_bitwise_eq(before.params()));
        assert_eq!(run.log.len(), 9);
        assert!(run.log.iter().all(|row| row.record.all_finite()));
        assert!(run.log[6..].iter().all(|row| row.record.tda_d_loss.is_some()));
        assert_eq!(
            run.spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(),
            vec![(0, 3), (3, 6), (6, 9)]
        );
        assert!(run.warnings.is_empty());
    }

    #[test]
    fn zero_iterations_keep_initial_student() {
        let teacher = small_teacher(31);
        let cfg = tiny_config(vec![stage(StageKind::WarmUp, 0), stage(StageKind::DifferentialTda, 0)]);
        let run = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        let spec = StudentNet::spec_for(&[12, 12], TimeEncoding::default());
        let init = init_student_from_teacher(&teacher, &spec).unwrap();
        assert!(run.student.params().values_bitwise_eq(init.params()));
    }

    #[test]
    fn zero_lambda_tda_matches_differential_bitwise() {
        let teacher = small_teacher(32);
        let mut cfg = tiny_config(vec![stage(StageKind::Differential, 4)]);
        cfg.lambda_tda = 0.0;
        let plain = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        cfg.stages = vec![stage(StageKind::DifferentialTda, 4)];
        let tda = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        assert!(plain.student.params().values_bitwise_eq(tda.student.params()));
    }

    #[test]
    fn shared_prefix_runs_agree() {
        let teacher = small_teacher(33);
        let cfg = tiny_config(vec![
            stage(StageKind::WarmUp, 2),
            stage(StageKind::Differential, 2),
        ]);
        let full = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        let mut d = Distiller::new(&teacher, MixtureSpec::default(), cfg.clone()).unwrap();
        d.run_stage(0, cfg.stages[0]).unwrap();
        let mut fork = d.clone();
        fork.run_stage(1, cfg.stages[1]).unwrap();
        assert!(fork.student.params().values_bitwise_eq(full.student.params()));
    }

    #[test]
    fn runs_are_deterministic() {
        let teacher = small_teacher(34);
        let cfg = tiny_config(vec![stage(StageKind::WarmUp, 2), stage(StageKind::DifferentialTda, 2)]);
        let a = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        let b = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        assert!(a.student.params().values_bitwise_eq(b.student.params()));
        assert!(a.discriminator.params().values_bitwise_eq(b.discriminator.params()));
        let losses = |r: &DistillRun| r.log.iter().map(|l| l.record.mf_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn stage_overrides() {
        let teacher = small_teacher(36);
        let base = tiny_config(vec![stage(StageKind::Differential, 3)]);
        let run = |stages: Vec<DistillStage>| {
            let cfg = DistillConfig { stages, ..base.clone() };
            run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap().student
        };
        let plain = run(base.stages.clone());
        let same = run(vec![DistillStage {
            time_policy: Some(base.time_policy),
            lr_student: Some(base.lr_student),
            ..stage(StageKind::Differential, 3)
        }]);
        assert!(plain.params().values_bitwise_eq(same.params()));
        let long = run(vec![DistillStage {
            time_policy: Some(TimePolicy::LONG_INTERVALS),
            ..stage(StageKind::Differential, 3)
        }]);
        assert!(!plain.params().values_bitwise_eq(long.params()));

        let s = DistillStage {
            lr_student: Some(0.5),
            ..stage(StageKind::WarmUp, 1)
        };
        let eff = s.effective_config(&base);
        assert_eq!((eff.lr_student, eff.time_policy), (0.5, base.time_policy));

        let bad = DistillConfig {
            stages: vec![DistillStage {
                time_policy: Some(TimePolicy { rho_boundary: 2.0, min_gap: 0.0 }),
                lr_student: Some(-1.0),
                ..stage(StageKind::WarmUp, 1)
            }],
            ..base.clone()
        };
        match bad.validate() {
            Err(Error::Config { keys }) => assert_eq!(
                keys,
                ["distill.stages[0].time_policy.rho_boundary", "distill.stages[0].lr_student"]
            ),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn long_interval_policy_bounds_gap() {
        let mut rng = SeededRng::new(4);
        for _ in 0..1000 {
            let p = sample_time_pair(&mut rng, &TimePolicy::LONG_INTERVALS);
            assert!(p.gap() >= 0.5 && p.t() <= 1.0 && p.r() >= 0.0);
        }
    }

    #[test]
    fn tda_first_is_warning_only() {
        let teacher = small_teacher(35);
        let cfg = tiny_config(vec![stage(StageKind::DifferentialTda, 1)]);
        let run = run_distillation(&teacher, &MixtureSpec::default(), &cfg).unwrap();
        assert_eq!(run.warnings.len(), 1);
    }

    #[test]
    fn discriminator_step_leaves_student_and_teacher_grads() {
        let teacher = small_teacher(36);
        let mut student = small_student(37);
        let mut disc = small_disc(38);
        let disc_before = disc.clone();
        let cfg = tiny_config(vec![]);
        let batch = StepBatch::draw(&MixtureSpec::default(), 8, &cfg.time_policy, &mut SeededRng::new(1)).unwrap();
        distill_step(StageKind::Differential, &teacher, &mut student, &mut disc, &batch, &cfg).unwrap();
        assert!(disc.params().values_bitwise_eq(disc_before.params()));
        distill_step(StageKind::DifferentialTda, &teacher, &mut student, &mut disc, &batch, &cfg).unwrap();
        assert!(!disc.params().values_bitwise_eq(disc_before.params()));
        // Adam zeroes grads after each step; no stray gradient remains anywhere
        assert!(student.params().flat_grads().iter().all(|&v| v == 0.0));
        assert!(disc.params().flat_grads().iter().all(|&v| v == 0.0));
        assert!(teacher.params().flat_grads().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_cases() {
        let teacher = constant_teacher([1.0, -0.5]);
        let spec = StudentNet::spec_for(&[4], TimeEncoding::default());
        let student = init_student_from_teacher(&teacher, &spec).unwrap();
        let prior = probe(10, 40);
        for nfe in [1, 2, 5] {
            let out = sample_student(&student, 10, nfe, &mut SeededRng::new(40)).unwrap();
            let expected = prior.add_row_broadcast(&Tensor2::row_vector(&[-1.0, 0.5]));
            assert!(out.sub(&expected).max_abs() < 1e-12, "nfe {nfe}");
        }
        assert!(sample_student(&student, 3, 0, &mut SeededRng::new(1)).is_err());

        let student = small_student(41);
        let one = sample_student(&student, 6, 1, &mut SeededRng::new(42)).unwrap();
        let z1 = probe(6, 42);
        let manual = z1.sub(&student.forward(&z1, 0.0, 1.0).unwrap());
        assert_eq!(one, manual);
    }
}
