//! The three toy networks: teacher velocity `v(z, t)`, student average
//! velocity `u(z, r, t)` and the endpoint discriminator `D(z, r)`.
//!
//! All are tanh MLPs over `[z, time features...]`. Times are given per row,
//! with scalar conveniences for the common single-time case.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualBatch, Graph, ParamSet, Tensor2, Var};
use crate::data::SeededRng;
use crate::error::{Error, Result};

pub const DATA_DIM: usize = 2;
pub const DEFAULT_FREQS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0)
        {
            return Err(Error::contract(format!("MLP dims must be >= 1: {self:?}")));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::contract("MLP needs at least one hidden layer"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, scope: &str, rng: &mut SeededRng) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::new(scope);
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(weight_name(i), Tensor2::from_raw(fan_in, fan_out, w))?;
        params.insert(bias_name(i), Tensor2::zeros(1, fan_out))?;
    }
    Ok(params)
}

/// Zero-initialized parameters with the layout of `spec`.
pub fn zero_params(spec: &MlpSpec, scope: &str) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::new(scope);
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        params.insert(weight_name(i), Tensor2::zeros(fan_in, fan_out))?;
        params.insert(bias_name(i), Tensor2::zeros(1, fan_out))?;
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let layers = self.spec.hidden_dims.len() + 1;
        let mut h = x;
        for i in 0..layers {
            let w = g.param(&self.params, &weight_name(i))?;
            let b = g.param(&self.params, &bias_name(i))?;
            h = g.linear(h, w, b)?;
            if i + 1 < layers {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Sinusoidal time encoding `[s, sin 2πks, cos 2πks for k = 1..F]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub freqs: usize,
}

impl Default for TimeEncoding {
    fn default() -> Self {
        TimeEncoding {
            freqs: DEFAULT_FREQS,
        }
    }
}

impl TimeEncoding {
    pub fn dim(&self) -> usize {
        2 * self.freqs + 1
    }

    fn check(s: f64) -> Result<()> {
        if (0.0..=1.0).contains(&s) {
            Ok(())
        } else {
            Err(Error::contract(format!("time {s} outside [0, 1]")))
        }
    }

    pub fn features(&self, s: f64) -> Result<Vec<f64>> {
        Self::check(s)?;
        let mut out = Vec::with_capacity(self.dim());
        out.push(s);
        for k in 1..=self.freqs {
            let w = 2.0 * PI * k as f64;
            out.push((w * s).sin());
            out.push((w * s).cos());
        }
        Ok(out)
    }

    /// `d features / ds`.
    pub fn derivative(&self, s: f64) -> Result<Vec<f64>> {
        Self::check(s)?;
        let mut out = Vec::with_capacity(self.dim());
        out.push(1.0);
        for k in 1..=self.freqs {
            let w = 2.0 * PI * k as f64;
            out.push(w * (w * s).cos());
            out.push(-w * (w * s).sin());
        }
        Ok(out)
    }

    /// Features for a column of times; with `tangent`, the tangent is
    /// `d features/ds · ṡ` row by row.
    pub fn batch(&self, times: &[f64], tangent: Option<&[f64]>) -> Result<DualBatch> {
        let mut primal = Vec::with_capacity(times.len() * self.dim());
        for &s in times {
            primal.extend(self.features(s)?);
        }
        let primal = Tensor2::from_raw(times.len(), self.dim(), primal);
        match tangent {
            None => Ok(DualBatch::new(primal)),
            Some(ds) => {
                if ds.len() != times.len() {
                    return Err(Error::shape("TimeEncoding::batch", "tangent length"));
                }
                let mut t = Vec::with_capacity(primal.len());
                for (&s, &d) in times.iter().zip(ds) {
                    t.extend(self.derivative(s)?.into_iter().map(|v| v * d));
                }
                DualBatch::with_tangent(primal, Tensor2::from_raw(times.len(), self.dim(), t))
            }
        }
    }
}

fn check_rows(z: &Tensor2, times: &[f64], what: &'static str) -> Result<()> {
    if z.cols() != DATA_DIM || times.len() != z.rows() {
        return Err(Error::shape(
            what,
            format!("z {:?} with {} times", z.shape(), times.len()),
        ));
    }
    Ok(())
}

/// Teacher velocity field `v(z, t)`; input `[z, feat(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherNet {
    pub mlp: Mlp,
    pub time: TimeEncoding,
}

impl TeacherNet {
    pub fn spec_for(hidden: &[usize], time: TimeEncoding) -> MlpSpec {
        MlpSpec {
            input_dim: DATA_DIM + time.dim(),
            hidden_dims: hidden.to_vec(),
            output_dim: DATA_DIM,
        }
    }

    pub fn new(hidden: &[usize], time: TimeEncoding, rng: &mut SeededRng) -> Result<Self> {
        let spec = Self::spec_for(hidden, time);
        let params = init_params(&spec, "teacher", rng)?;
        Self::from_parts(spec, params, time)
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet, time: TimeEncoding) -> Result<Self> {
        if spec.input_dim != DATA_DIM + time.dim() || spec.output_dim != DATA_DIM {
            return Err(Error::contract(format!(
                "teacher spec {spec:?} does not fit data dim {DATA_DIM} + time dim {}",
                time.dim()
            )));
        }
        Ok(TeacherNet {
            mlp: Mlp { spec, params },
            time,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.mlp.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.mlp.params
    }

    /// Records `v(z, t)` into `g`.
    pub fn build(&self, g: &mut Graph, z: Var, t: &[f64]) -> Result<Var> {
        let feats = g.constant(self.time.batch(t, None)?.primal);
        let input = g.concat_cols(&[z, feats])?;
        self.mlp.forward(g, input)
    }

    pub fn velocity_rows(&self, z: &Tensor2, t: &[f64]) -> Result<Tensor2> {
        check_rows(z, t, "teacher_forward")?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.build(&mut g, zv, t)?;
        Ok(g.value(out).clone())
    }

    pub fn velocity(&self, z: &Tensor2, t: f64) -> Result<Tensor2> {
        self.velocity_rows(z, &vec![t; z.rows()])
    }
}

/// Student average velocity `u(z, r, t)`; input `[z, feat(t), feat(r)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub mlp: Mlp,
    pub time: TimeEncoding,
}

impl StudentNet {
    pub fn spec_for(hidden: &[usize], time: TimeEncoding) -> MlpSpec {
        MlpSpec {
            input_dim: DATA_DIM + 2 * time.dim(),
            hidden_dims: hidden.to_vec(),
            output_dim: DATA_DIM,
        }
    }

    pub fn new(hidden: &[usize], time: TimeEncoding, rng: &mut SeededRng) -> Result<Self> {
        let spec = Self::spec_for(hidden, time);
        let params = init_params(&spec, "student", rng)?;
        Self::from_parts(spec, params, time)
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet, time: TimeEncoding) -> Result<Self> {
        if spec.input_dim != DATA_DIM + 2 * time.dim() || spec.output_dim != DATA_DIM {
            return Err(Error::contract(format!(
                "student spec {spec:?} does not fit data dim {DATA_DIM} + 2 x time dim {}",
                time.dim()
            )));
        }
        Ok(StudentNet {
            mlp: Mlp { spec, params },
            time,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.mlp.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.mlp.params
    }

    fn check_pairs(r: &[f64], t: &[f64]) -> Result<()> {
        if r.len() != t.len() {
            return Err(Error::shape("student", "r and t lengths differ"));
        }
        if let Some((r, t)) = r.iter().zip(t).find(|(r, t)| r > t) {
            return Err(Error::contract(format!("student needs r <= t, got r={r} t={t}")));
        }
        Ok(())
    }

    /// Records `u(z, r, t)` into `g`. With `time_tangent`, the `t` features
    /// carry tangent `dt/dt = 1` while `r` features carry none (`dr/dt = 0`);
    /// any tangent already on `z` flows through as well.
    pub fn build(&self, g: &mut Graph, z: Var, r: &[f64], t: &[f64], time_tangent: bool) -> Result<Var> {
        Self::check_pairs(r, t)?;
        let ones = vec![1.0; t.len()];
        let ft = self.time.batch(t, time_tangent.then_some(ones.as_slice()))?;
        let ft = if time_tangent {
            g.input_dual(ft)
        } else {
            g.constant(ft.primal)
        };
        let fr = g.constant(self.time.batch(r, None)?.primal);
        let input = g.concat_cols(&[z, ft, fr])?;
        self.mlp.forward(g, input)
    }

    pub fn forward_rows(&self, z: &Tensor2, r: &[f64], t: &[f64]) -> Result<Tensor2> {
        check_rows(z, t, "student_forward")?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.build(&mut g, zv, r, t, false)?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, z: &Tensor2, r: f64, t: f64) -> Result<Tensor2> {
        let n = z.rows();
        self.forward_rows(z, &vec![r; n], &vec![t; n])
    }

    /// `(u, du/dt)` along the flow, i.e. the JVP with tangent `(v, 0, 1)` in
    /// `(z, r, t)`, from one forward-mode pass.
    pub fn time_jvp_rows(
        &self,
        z: &Tensor2,
        r: &[f64],
        t: &[f64],
        v: &Tensor2,
    ) -> Result<(Tensor2, Tensor2)> {
        check_rows(z, t, "student_time_jvp")?;
        let mut g = Graph::new();
        let zv = g.input_dual(DualBatch::with_tangent(z.clone(), v.clone())?);
        let out = self.build(&mut g, zv, r, t, true)?;
        Ok((g.value(out).clone(), g.tangent_or_zero(out)))
    }

    pub fn time_jvp(&self, z: &Tensor2, r: f64, t: f64, v: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let n = z.rows();
        self.time_jvp_rows(z, &vec![r; n], &vec![t; n], v)
    }
}

/// Copies the teacher into a student whose extra `r`-feature inputs start
/// with zero weight, so the student initially reproduces `v(z, t)` for every `r`.
pub fn init_student_from_teacher(teacher: &TeacherNet, student_spec: &MlpSpec) -> Result<StudentNet> {
    let t_spec = &teacher.mlp.spec;
    let time = teacher.time;
    if *student_spec != StudentNet::spec_for(&t_spec.hidden_dims, time) {
        return Err(Error::contract(format!(
            "student spec {student_spec:?} is not the teacher spec {t_spec:?} plus r features"
        )));
    }
    let mut params = zero_params(student_spec, "student")?;
    for (name, entry) in teacher.params().iter() {
        if name == weight_name(0) {
            let mut w = Tensor2::zeros(student_spec.input_dim, student_spec.hidden_dims[0]);
            for row in 0..t_spec.input_dim {
                w.row_mut(row).copy_from_slice(entry.value.row(row));
            }
            params.set_value(name, w)?;
        } else {
            params.set_value(name, entry.value.clone())?;
        }
    }
    StudentNet::from_parts(student_spec.clone(), params, time)
}

/// Endpoint discriminator `D(z, r)` returning one raw logit per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    pub mlp: Mlp,
    pub time: TimeEncoding,
}

impl DiscriminatorNet {
    pub fn spec_for(hidden: &[usize], time: TimeEncoding) -> MlpSpec {
        MlpSpec {
            input_dim: DATA_DIM + time.dim(),
            hidden_dims: hidden.to_vec(),
            output_dim: 1,
        }
    }

    pub fn new(hidden: &[usize], time: TimeEncoding, rng: &mut SeededRng) -> Result<Self> {
        let spec = Self::spec_for(hidden, time);
        let params = init_params(&spec, "discriminator", rng)?;
        Self::from_parts(spec, params, time)
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet, time: TimeEncoding) -> Result<Self> {
        if spec.input_dim != DATA_DIM + time.dim() || spec.output_dim != 1 {
            return Err(Error::contract(format!(
                "discriminator spec {spec:?} does not fit data dim {DATA_DIM} + time dim {}",
                time.dim()
            )));
        }
        Ok(DiscriminatorNet {
            mlp: Mlp { spec, params },
            time,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.mlp.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.mlp.params
    }

    pub fn build(&self, g: &mut Graph, z: Var, r: &[f64]) -> Result<Var> {
        let fr = g.constant(self.time.batch(r, None)?.primal);
        let input = g.concat_cols(&[z, fr])?;
        self.mlp.forward(g, input)
    }

    pub fn logits_rows(&self, z: &Tensor2, r: &[f64]) -> Result<Tensor2> {
        check_rows(z, r, "discriminator_forward")?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.build(&mut g, zv, r)?;
        Ok(g.value(out).clone())
    }

    pub fn logits(&self, z: &Tensor2, r: f64) -> Result<Tensor2> {
        self.logits_rows(z, &vec![r; z.rows()])
    }
}
