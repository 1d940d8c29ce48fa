//! Linear flow paths, conditional flow matching and fixed-step ODE solvers.
//!
//! The path is `z_t = (1 - t)·x + t·ε` with data `x` at `t = 0` and noise `ε`
//! at `t = 1`; its conditional velocity is the constant `ε - x`. Sampling
//! integrates the learned field from `t = 1` down to `t = 0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamHyper, Graph, Tensor2};
use crate::data::{sample_prior, MixtureSpec, SeededRng};
use crate::error::{Error, Result};
use crate::net::{TeacherNet, TimeEncoding};

/// Anything that yields an instantaneous velocity for a batch at per-row times.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor2, tau: &[f64]) -> Result<Tensor2>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor2, &[f64]) -> Result<Tensor2>,
{
    fn velocity(&self, z: &Tensor2, tau: &[f64]) -> Result<Tensor2> {
        self(z, tau)
    }
}

impl VelocityField for TeacherNet {
    fn velocity(&self, z: &Tensor2, tau: &[f64]) -> Result<Tensor2> {
        self.velocity_rows(z, tau)
    }
}

pub fn interpolate(x: &Tensor2, eps: &Tensor2, t: f64) -> Result<Tensor2> {
    interpolate_rows(x, eps, &vec![t; x.rows()])
}

/// `(1 - tᵢ)·xᵢ + tᵢ·εᵢ` row by row.
pub fn interpolate_rows(x: &Tensor2, eps: &Tensor2, t: &[f64]) -> Result<Tensor2> {
    x.check_same_shape(eps, "interpolate")?;
    if t.len() != x.rows() {
        return Err(Error::shape("interpolate", "one time per row required"));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("interpolation time {bad} outside [0, 1]")));
    }
    let mut out = x.clone();
    for (r, &ti) in t.iter().enumerate() {
        for (o, &e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = (1.0 - ti) * *o + ti * e;
        }
    }
    Ok(out)
}

/// `ε - x`, the time derivative of the linear path.
pub fn conditional_velocity(x: &Tensor2, eps: &Tensor2) -> Result<Tensor2> {
    x.check_same_shape(eps, "conditional_velocity")?;
    Ok(eps.sub(x))
}

/// One flow-matching minibatch.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub x: Tensor2,
    pub eps: Tensor2,
    pub t: Vec<f64>,
    pub z_t: Tensor2,
    pub v_cond: Tensor2,
}

impl FlowBatch {
    pub fn new(x: Tensor2, eps: Tensor2, t: Vec<f64>) -> Result<Self> {
        let z_t = interpolate_rows(&x, &eps, &t)?;
        let v_cond = conditional_velocity(&x, &eps)?;
        Ok(FlowBatch {
            x,
            eps,
            t,
            z_t,
            v_cond,
        })
    }

    /// Data from the mixture, noise from the prior, `t ~ U(0, 1)` per row.
    pub fn draw(mixture: &MixtureSpec, n: usize, rng: &mut SeededRng) -> Result<Self> {
        let x = mixture.sample(n, rng);
        let eps = sample_prior(n, rng);
        let t = (0..n).map(|_| rng.uniform()).collect();
        Self::new(x, eps, t)
    }
}

/// `mean ‖v(z_t, t) - (ε - x)‖²` averaged over batch and coordinates.
pub fn cfm_loss(teacher: &TeacherNet, batch: &FlowBatch) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(batch.z_t.clone());
    let v = teacher.build(&mut g, z, &batch.t)?;
    let loss = g.mse(v, &batch.v_cond)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeKind {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeMethod {
    pub kind: OdeKind,
    pub n_steps: usize,
}

impl OdeMethod {
    pub fn euler(n_steps: usize) -> Self {
        OdeMethod {
            kind: OdeKind::Euler,
            n_steps,
        }
    }

    pub fn heun(n_steps: usize) -> Self {
        OdeMethod {
            kind: OdeKind::Heun,
            n_steps,
        }
    }
}

pub fn ode_solve<F: VelocityField + ?Sized>(
    field: &F,
    z_t: &Tensor2,
    t: f64,
    r: f64,
    method: OdeMethod,
) -> Result<Tensor2> {
    let n = z_t.rows();
    ode_solve_rows(field, z_t, &vec![t; n], &vec![r; n], method)
}

/// Integrates `dz/dτ = field(z, τ)` from `τ = tᵢ` to `τ = rᵢ` for every row,
/// each row on its own uniform grid of `n_steps` substeps. Rows with
/// `rᵢ = tᵢ` come back unchanged.
pub fn ode_solve_rows<F: VelocityField + ?Sized>(
    field: &F,
    z_t: &Tensor2,
    t: &[f64],
    r: &[f64],
    method: OdeMethod,
) -> Result<Tensor2> {
    if method.n_steps == 0 {
        return Err(Error::contract("ode_solve needs n_steps >= 1"));
    }
    if t.len() != z_t.rows() || r.len() != z_t.rows() {
        return Err(Error::shape("ode_solve", "one (t, r) per row required"));
    }
    if let Some((r, t)) = r
        .iter()
        .zip(t)
        .find(|(r, t)| !(0.0 <= **r && r <= t && **t <= 1.0))
    {
        return Err(Error::contract(format!("ode_solve needs 0 <= r <= t <= 1, got r={r} t={t}")));
    }
    let n = method.n_steps;
    let grid = |k: usize| -> Vec<f64> {
        if k == n {
            r.to_vec()
        } else {
            t.iter()
                .zip(r)
                .map(|(&t, &r)| t + (r - t) * (k as f64 / n as f64))
                .collect()
        }
    };
    // signed step per row: τ decreases from t to r
    let h: Vec<f64> = t.iter().zip(r).map(|(&t, &r)| (r - t) / n as f64).collect();
    let half_h: Vec<f64> = h.iter().map(|h| 0.5 * h).collect();

    let mut z = z_t.clone();
    let mut tau = grid(0);
    for k in 1..=n {
        let next = grid(k);
        let v0 = field.velocity(&z, &tau)?;
        z = match method.kind {
            OdeKind::Euler => z.add_scaled_rows(&v0, &h),
            OdeKind::Heun => {
                let pred = z.add_scaled_rows(&v0, &h);
                let v1 = field.velocity(&pred, &next)?;
                z.add_scaled_rows(&v0.add(&v1), &half_h)
            }
        };
        tau = next;
    }
    Ok(z)
}

/// Draws `n` prior points at `t = 1` and integrates them to `t = 0`.
pub fn sample_with_field<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    method: OdeMethod,
    rng: &mut SeededRng,
) -> Result<Tensor2> {
    let z1 = sample_prior(n, rng);
    ode_solve(field, &z1, 1.0, 0.0, method)
}

/// Learning-rate schedule over a training run, as a multiple of the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `1 - i/n` at iteration `i` of `n`.
    #[default]
    Linear,
}

impl LrSchedule {
    pub fn factor(&self, iter: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - iter as f64 / total.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden_dims: Vec<usize>,
    pub time_freqs: usize,
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamHyper,
    pub lr_schedule: LrSchedule,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden_dims: vec![256, 256],
            time_freqs: crate::net::DEFAULT_FREQS,
            iterations: 5000,
            batch: 256,
            adam: AdamHyper::with_lr(1e-3),
            lr_schedule: LrSchedule::Linear,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let mut keys = Vec::new();
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            keys.push("teacher.hidden_dims".to_owned());
        }
        if self.batch == 0 {
            keys.push("teacher.batch".to_owned());
        }
        if let Err(Error::Config { keys: bad }) = self.adam.validate() {
            keys.extend(bad.into_iter().map(|k| format!("teacher.adam.{k}")));
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub teacher: TeacherNet,
    pub losses: Vec<f64>,
}

/// Adam on the CFM objective, with the learning rate following
/// `config.lr_schedule`. Fully determined by `(config, mixture, seed)`.
pub fn train_teacher(config: &TeacherConfig, mixture: &MixtureSpec, seed: u64) -> Result<TeacherRun> {
    config.validate()?;
    mixture.validate()?;
    let root = SeededRng::derive(seed, "teacher");
    let time = TimeEncoding {
        freqs: config.time_freqs,
    };
    let mut teacher = TeacherNet::new(&config.hidden_dims, time, &mut root.substream("init"))?;
    let mut batches = root.substream("batches");
    let mut losses = Vec::with_capacity(config.iterations);
    for i in 0..config.iterations {
        let batch = FlowBatch::draw(mixture, config.batch, &mut batches)?;
        let grads = {
            let mut g = Graph::new();
            let z = g.constant(batch.z_t.clone());
            let v = teacher.build(&mut g, z, &batch.t)?;
            let loss = g.mse(v, &batch.v_cond)?;
            losses.push(g.value(loss).item());
            g.backward(loss)?
        };
        grads.apply_to(teacher.params_mut());
        let hyper = AdamHyper {
            lr: config.adam.lr * config.lr_schedule.factor(i, config.iterations),
            ..config.adam
        };
        teacher.params_mut().adam_step(&hyper);
    }
    Ok(TeacherRun { teacher, losses })
}
