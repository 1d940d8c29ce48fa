//! Finite-difference verification of every differentiation rule.
//!
//! For each primitive `y = op(x₁, …)` on random inputs, with random output
//! weights `w` and input direction `d`:
//!
//! * reverse mode: `∇ₓ⟨w, y⟩` against central differences,
//! * forward mode: the tangent of `y` along `d` against a central directional
//!   difference,
//! * dot-product test: `⟨∇ₓ⟨w, y⟩, d⟩ = ⟨w, ẏ⟩`.
//!
//! Two composites cover parameter binding through a 2-layer MLP and the
//! student's time derivative with tangent `(v, 0, 1)`.

use serde::Serialize;

use crate::autodiff::{finite_diff_directional, finite_diff_gradient, rel_err, DualBatch, Fault, Graph, Tensor2, Var};
use crate::data::SeededRng;
use crate::error::Result;
use crate::net::{init_params, Mlp, MlpSpec, StudentNet, TimeEncoding};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
pub const DOT_TOL: f64 = 1e-10;

const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub vjp_rel_err: Option<f64>,
    pub jvp_rel_err: Option<f64>,
    pub dot_rel_err: Option<f64>,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        let ok = |v: Option<f64>, tol: f64| v.is_none_or(|e| e <= tol);
        ok(self.vjp_rel_err, GRAD_TOL) && ok(self.jvp_rel_err, GRAD_TOL) && ok(self.dot_rel_err, DOT_TOL)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect()
    }
}

type Builder<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

fn randn(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor2::from_vec(rows, cols, data).expect("finite normals")
}

/// Normal draws pushed at least `margin` away from zero, for kinked rules.
fn randn_off_zero(rows: usize, cols: usize, margin: f64, rng: &mut SeededRng) -> Tensor2 {
    randn(rows, cols, rng).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

fn flatten(xs: &[Tensor2]) -> Vec<f64> {
    xs.iter().flat_map(|x| x.as_slice().iter().copied()).collect()
}

fn unflatten(flat: &[f64], like: &[Tensor2]) -> Vec<Tensor2> {
    let mut at = 0;
    like.iter()
        .map(|x| {
            let t = Tensor2::from_vec(x.rows(), x.cols(), flat[at..at + x.len()].to_vec()).expect("shape");
            at += x.len();
            t
        })
        .collect()
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    rel_err(&Tensor2::row_vector(a), &Tensor2::row_vector(b), FLOOR)
}

fn eval(build: &Builder, inputs: &[Tensor2], fault: Fault) -> Result<Tensor2> {
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

fn check_primitive(name: &'static str, inputs: Vec<Tensor2>, build: Builder, fault: Fault, rng: &mut SeededRng) -> Result<CheckRow> {
    let out = eval(&build, &inputs, fault)?;
    let w = randn(out.rows(), out.cols(), rng);
    let dirs: Vec<Tensor2> = inputs.iter().map(|x| randn(x.rows(), x.cols(), rng)).collect();

    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let y = build(&mut g, &vars)?;
    let loss = g.weighted_sum(y, &w)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor2> = vars.iter().map(|&v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor2::zeros(0, 0))).collect();
    let analytic_flat = flatten(&analytic);

    let numeric = finite_diff_gradient(
        |flat| {
            let xs = unflatten(flat, &inputs);
            eval(&build, &xs, fault).map_or(f64::NAN, |y| y.dot(&w))
        },
        &flatten(&inputs),
        FD_STEP,
    );
    let vjp = vec_rel(&analytic_flat, &numeric);

    let mut g = Graph::with_fault(fault);
    let vars = inputs
        .iter()
        .zip(&dirs)
        .map(|(x, d)| Ok(g.input_dual(DualBatch::with_tangent(x.clone(), d.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let y = build(&mut g, &vars)?;
    let tangent = g.tangent_or_zero(y);
    let fd_tangent = finite_diff_directional(|xs| eval(&build, xs, fault), &inputs, &dirs, FD_STEP)?;
    let jvp = rel_err(&tangent, &fd_tangent, FLOOR);

    let lhs: f64 = analytic_flat.iter().zip(flatten(&dirs)).map(|(a, b)| a * b).sum();
    let rhs = w.dot(&tangent);
    let dot = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(FLOOR);

    Ok(CheckRow {
        name,
        vjp_rel_err: Some(vjp),
        jvp_rel_err: Some(jvp),
        dot_rel_err: Some(dot),
    })
}

/// Parameter gradients of a random 2-layer MLP through [`crate::autodiff::Gradients::apply_to`],
/// plus forward and dot-product checks with respect to its input.
fn check_mlp(fault: Fault, rng: &mut SeededRng) -> Result<CheckRow> {
    let spec = MlpSpec {
        input_dim: 3,
        hidden_dims: vec![6, 5],
        output_dim: 2,
    };
    let params = init_params(&spec, "gradcheck", rng)?;
    let mlp = Mlp { spec, params };
    let x = randn(4, 3, rng);
    let w = randn(4, 2, rng);
    let d = randn(4, 3, rng);
    let forward = |m: &Mlp, x: &Tensor2| -> Result<Tensor2> {
        let mut g = Graph::with_fault(fault);
        let xv = g.input(x.clone());
        let y = m.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    };

    let mut g = Graph::with_fault(fault);
    let xv = g.input(x.clone());
    let y = mlp.forward(&mut g, xv)?;
    let loss = g.weighted_sum(y, &w)?;
    let grads = g.backward(loss)?;
    let mut bound = mlp.params.clone();
    grads.apply_to(&mut bound);
    let numeric = finite_diff_gradient(
        |flat| {
            let mut m = mlp.clone();
            m.params.set_flat_values(flat).expect("layout");
            forward(&m, &x).map_or(f64::NAN, |y| y.dot(&w))
        },
        &mlp.params.flat_values(),
        FD_STEP,
    );
    let vjp = vec_rel(&bound.flat_grads(), &numeric);
    let gx = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor2::zeros(4, 3));

    let mut g = Graph::with_fault(fault);
    let xv = g.input_dual(DualBatch::with_tangent(x.clone(), d.clone())?);
    let y = mlp.forward(&mut g, xv)?;
    let tangent = g.tangent_or_zero(y);
    let fd = finite_diff_directional(|xs| forward(&mlp, &xs[0]), &[x.clone()], &[d.clone()], FD_STEP)?;
    let jvp = rel_err(&tangent, &fd, FLOOR);

    let (lhs, rhs) = (gx.dot(&d), w.dot(&tangent));
    let dot = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(FLOOR);
    Ok(CheckRow {
        name: "mlp2_params",
        vjp_rel_err: Some(vjp),
        jvp_rel_err: Some(jvp),
        dot_rel_err: Some(dot),
    })
}

/// `du/dt` along `(v, 0, 1)` against `[u(z + hv, r, t + h) - u(z - hv, r, t - h)] / 2h`.
fn check_student_time(fault: Fault, rng: &mut SeededRng) -> Result<CheckRow> {
    let student = StudentNet::new(&[8, 8], TimeEncoding::default(), rng)?;
    let n = 5;
    let z = randn(n, 2, rng);
    let v = randn(n, 2, rng);
    let r: Vec<f64> = (0..n).map(|_| 0.2 * rng.uniform()).collect();
    let t: Vec<f64> = (0..n).map(|_| 0.3 + 0.5 * rng.uniform()).collect();
    let fwd = |z: &Tensor2, t: &[f64]| -> Result<Tensor2> {
        let mut g = Graph::with_fault(fault);
        let zv = g.constant(z.clone());
        let u = student.build(&mut g, zv, &r, t, false)?;
        Ok(g.value(u).clone())
    };
    let mut g = Graph::with_fault(fault);
    let zv = g.input_dual(DualBatch::with_tangent(z.clone(), v.clone())?);
    let u = student.build(&mut g, zv, &r, &t, true)?;
    let dudt = g.tangent_or_zero(u);
    let shifted = |s: f64| -> Result<Tensor2> {
        let ts: Vec<f64> = t.iter().map(|t| t + s * FD_STEP).collect();
        fwd(&z.zip_map(&v, |z, v| z + s * FD_STEP * v), &ts)
    };
    let fd = shifted(1.0)?.sub(&shifted(-1.0)?).scale(0.5 / FD_STEP);
    Ok(CheckRow {
        name: "student_time_jvp",
        vjp_rel_err: None,
        jvp_rel_err: Some(rel_err(&dudt, &fd, FLOOR)),
        dot_rel_err: None,
    })
}

/// Runs the whole suite. `fault` corrupts one rule for negative-control runs.
pub fn run_gradcheck(seed: u64, fault: Fault) -> Result<GradcheckReport> {
    let mut rng = SeededRng::derive(seed, "gradcheck");
    let (n, k, m) = (4, 3, 5);
    let target = randn(n, m, &mut rng);
    let weights = randn(n, m, &mut rng);
    let coef: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut rows = Vec::new();

    let x = randn(n, k, &mut rng);
    let w = randn(k, m, &mut rng);
    let b = randn(1, m, &mut rng);
    rows.push(check_primitive("linear", vec![x, w, b], Box::new(|g, v| g.linear(v[0], v[1], v[2])), fault, &mut rng)?);
    let x = randn(n, m, &mut rng);
    rows.push(check_primitive("tanh", vec![x], Box::new(|g, v| Ok(g.tanh(v[0]))), fault, &mut rng)?);
    let x = randn_off_zero(n, m, 1e-2, &mut rng);
    rows.push(check_primitive("relu", vec![x], Box::new(|g, v| Ok(g.relu(v[0]))), fault, &mut rng)?);
    let x = randn(n, m, &mut rng);
    rows.push(check_primitive("affine", vec![x], Box::new(|g, v| Ok(g.affine(v[0], -1.5, 0.25))), fault, &mut rng)?);
    let x = randn(n, m, &mut rng);
    rows.push(check_primitive("scale", vec![x], Box::new(|g, v| Ok(g.scale(v[0], 0.75))), fault, &mut rng)?);
    let (a, c) = (randn(n, m, &mut rng), randn(n, m, &mut rng));
    rows.push(check_primitive("add", vec![a, c], Box::new(|g, v| g.add(v[0], v[1])), fault, &mut rng)?);
    let (a, c) = (randn(n, m, &mut rng), randn(n, m, &mut rng));
    rows.push(check_primitive(
        "add_scaled_rows",
        vec![a, c],
        Box::new(|g, v| g.add_scaled_rows(v[0], v[1], &coef)),
        fault,
        &mut rng,
    )?);
    let (a, c) = (randn(n, 2, &mut rng), randn(n, 3, &mut rng));
    rows.push(check_primitive("concat_cols", vec![a, c], Box::new(|g, v| g.concat_cols(&[v[0], v[1]])), fault, &mut rng)?);
    let x = randn(n, m, &mut rng);
    rows.push(check_primitive("mean", vec![x], Box::new(|g, v| Ok(g.mean(v[0]))), fault, &mut rng)?);
    let x = randn(n, m, &mut rng);
    rows.push(check_primitive("mse", vec![x], Box::new(|g, v| g.mse(v[0], &target)), fault, &mut rng)?);
    let x = randn(n, m, &mut rng);
    rows.push(check_primitive("weighted_sum", vec![x], Box::new(|g, v| g.weighted_sum(v[0], &weights)), fault, &mut rng)?);

    rows.push(check_mlp(fault, &mut rng)?);
    rows.push(check_student_time(fault, &mut rng)?);
    Ok(GradcheckReport { seed, rows })
}
