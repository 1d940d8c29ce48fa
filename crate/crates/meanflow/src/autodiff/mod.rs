//! Dense automatic differentiation: reverse mode for training gradients,
//! forward mode for the total time derivative of the student, and the
//! finite-difference oracles both are checked against.

mod graph;
mod params;
mod tensor;

pub use graph::{Fault, Gradients, Graph, ParamKey, Var};
pub use params::{AdamHyper, ParamEntry, ParamSet};
pub use tensor::{rel_err, Tensor2};

use crate::error::{Error, Result};

/// A batch of values with an optional forward-mode tangent of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    pub primal: Tensor2,
    pub tangent: Option<Tensor2>,
}

impl DualBatch {
    pub fn new(primal: Tensor2) -> Self {
        DualBatch {
            primal,
            tangent: None,
        }
    }

    pub fn with_tangent(primal: Tensor2, tangent: Tensor2) -> Result<Self> {
        primal.check_same_shape(&tangent, "DualBatch")?;
        Ok(DualBatch {
            primal,
            tangent: Some(tangent),
        })
    }
}

/// Evaluates `f` once with tangents attached to its inputs and returns
/// `(f(inputs), Σᵢ ∂f/∂inputᵢ · tangentᵢ)`.
///
/// Parameters bound inside `f` carry no tangent.
pub fn jvp_forward<F>(f: F, inputs: &[Tensor2], tangents: &[Tensor2]) -> Result<(Tensor2, Tensor2)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    if inputs.len() != tangents.len() {
        return Err(Error::shape(
            "jvp_forward",
            format!("{} inputs but {} tangents", inputs.len(), tangents.len()),
        ));
    }
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| Ok(g.input_dual(DualBatch::with_tangent(x.clone(), t.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).clone(), g.tangent_or_zero(out)))
}

/// Central difference `(f(x + h·d) - f(x - h·d)) / 2h` along a direction
/// given per input.
pub fn finite_diff_directional<F>(
    f: F,
    inputs: &[Tensor2],
    direction: &[Tensor2],
    h: f64,
) -> Result<Tensor2>
where
    F: Fn(&[Tensor2]) -> Result<Tensor2>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    if inputs.len() != direction.len() {
        return Err(Error::shape(
            "finite_diff_directional",
            format!("{} inputs but {} directions", inputs.len(), direction.len()),
        ));
    }
    let shift = |sign: f64| -> Result<Vec<Tensor2>> {
        inputs
            .iter()
            .zip(direction)
            .map(|(x, d)| {
                x.check_same_shape(d, "finite_diff_directional")?;
                Ok(x.zip_map(d, |x, d| x + sign * h * d))
            })
            .collect()
    };
    let plus = f(&shift(1.0)?)?;
    let minus = f(&shift(-1.0)?)?;
    Ok(plus.sub(&minus).scale(0.5 / h))
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn two_layer(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_out: usize) -> ParamSet {
        let mut p = ParamSet::new("mlp");
        p.insert("w0", random(rng, d_in, hidden)).unwrap();
        p.insert("b0", random(rng, 1, hidden)).unwrap();
        p.insert("w1", random(rng, hidden, hidden)).unwrap();
        p.insert("b1", random(rng, 1, hidden)).unwrap();
        p.insert("w2", random(rng, hidden, d_out)).unwrap();
        p.insert("b2", random(rng, 1, d_out)).unwrap();
        p
    }

    fn mlp(g: &mut Graph, p: &ParamSet, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..3 {
            let w = g.param(p, &format!("w{layer}"))?;
            let b = g.param(p, &format!("b{layer}"))?;
            h = g.linear(h, w, b)?;
            if layer < 2 {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    fn mlp_value(p: &ParamSet, x: &Tensor2) -> Tensor2 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = mlp(&mut g, p, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn linear_mse_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 3);
        let target = random(&mut rng, 4, 2);
        let mut p = ParamSet::new("lin");
        p.insert("w", random(&mut rng, 3, 2)).unwrap();
        p.insert("b", random(&mut rng, 1, 2)).unwrap();

        let loss_of = |flat: &[f64]| {
            let mut q = p.clone();
            q.set_flat_values(flat).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (w, b) = (g.param(&q, "w").unwrap(), g.param(&q, "b").unwrap());
            let y = g.linear(xv, w, b).unwrap();
            let l = g.mse(y, &target).unwrap();
            g.value(l).item()
        };
        let fd = finite_diff_gradient(loss_of, &p.flat_values(), 1e-5);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (w, b) = (g.param(&p, "w").unwrap(), g.param(&p, "b").unwrap());
        let y = g.linear(xv, w, b).unwrap();
        let l = g.mse(y, &target).unwrap();
        g.backward(l).unwrap().apply_to(&mut p);

        let analytic = Tensor2::row_vector(&p.flat_grads());
        let err = rel_err(&analytic, &Tensor2::row_vector(&fd), 1e-12);
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn mlp_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = two_layer(&mut rng, 3, 8, 2);
        let x = random(&mut rng, 5, 3);
        let target = random(&mut rng, 5, 2);
        let loss_of = |flat: &[f64]| {
            let mut q = p.clone();
            q.set_flat_values(flat).unwrap();
            let y = mlp_value(&q, &x);
            y.sub(&target).as_slice().iter().map(|d| d * d).sum::<f64>() / y.len() as f64
        };
        let fd = finite_diff_gradient(loss_of, &p.flat_values(), 1e-5);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = mlp(&mut g, &p, xv).unwrap();
        let l = g.mse(y, &target).unwrap();
        g.backward(l).unwrap().apply_to(&mut p);
        let err = rel_err(
            &Tensor2::row_vector(&p.flat_grads()),
            &Tensor2::row_vector(&fd),
            1e-12,
        );
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn jvp_matches_finite_differences_on_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = two_layer(&mut rng, 4, 16, 3);
        let x = random(&mut rng, 6, 4);
        let d = random(&mut rng, 6, 4);
        let (value, tangent) =
            jvp_forward(|g, xs| mlp(g, &p, xs[0]), &[x.clone()], &[d.clone()]).unwrap();
        assert_eq!(value, mlp_value(&p, &x));
        let fd = finite_diff_directional(|xs| Ok(mlp_value(&p, &xs[0])), &[x], &[d], 1e-5).unwrap();
        let err = rel_err(&tangent, &fd, 1e-12);
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn jvp_of_constant_network_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = two_layer(&mut rng, 2, 4, 2);
        p.set_value("w2", Tensor2::zeros(4, 2)).unwrap();
        let x = random(&mut rng, 3, 2);
        let d = random(&mut rng, 3, 2);
        let (_, tangent) = jvp_forward(|g, xs| mlp(g, &p, xs[0]), &[x], &[d]).unwrap();
        assert!(tangent.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jvp_of_linear_map_in_z_and_t() {
        // f(z, t) = z·A + t·c, tangents (v, 1) -> v·A + c
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let c = Tensor2::from_rows(&[vec![0.25, -1.0]]).unwrap();
        let mut p = ParamSet::new("lin");
        p.insert("w", Tensor2::concat_rows(&[&a, &c]).unwrap()).unwrap();
        p.insert("b", Tensor2::zeros(1, 2)).unwrap();
        let z = Tensor2::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let t = Tensor2::column(&[0.3, 0.7]);
        let v = Tensor2::from_rows(&[vec![2.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let ones = Tensor2::column(&[1.0, 1.0]);
        let (_, tangent) = jvp_forward(
            |g, xs| {
                let input = g.concat_cols(&[xs[0], xs[1]])?;
                let (w, b) = (g.param(&p, "w")?, g.param(&p, "b")?);
                g.linear(input, w, b)
            },
            &[z, t],
            &[v.clone(), ones],
        )
        .unwrap();
        let expected = v.matmul(&a).add_row_broadcast(&c);
        assert_eq!(tangent, expected);
    }

    #[test]
    fn finite_diff_examples() {
        let lin = |xs: &[Tensor2]| Ok(xs[0].scale(3.0));
        let x = Tensor2::scalar(2.0);
        for h in [1e-1, 1e-3, 1.0] {
            let est = finite_diff_directional(lin, &[x.clone()], &[Tensor2::scalar(1.0)], h).unwrap();
            assert!((est.item() - 3.0).abs() < 1e-12);
        }
        let sq = |xs: &[Tensor2]| Ok(xs[0].map(|v| v * v));
        let est = finite_diff_directional(
            sq,
            &[Tensor2::scalar(1.0)],
            &[Tensor2::scalar(1.0)],
            1e-5,
        )
        .unwrap();
        assert!((est.item() - 2.0).abs() < 1e-9);
        assert!(finite_diff_directional(sq, &[x.clone()], &[x], 0.0).is_err());
    }

    #[test]
    fn stop_gradient_target_equals_constant_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = two_layer(&mut rng, 2, 6, 2);
        let x = random(&mut rng, 4, 2);
        let x2 = random(&mut rng, 4, 2);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mlp(&mut g, &p, xv).unwrap();
        let x2v = g.constant(x2.clone());
        let other = mlp(&mut g, &p, x2v).unwrap();
        let target = g.stop_gradient(other);
        let target_value = g.value(target).clone();
        let l = g.mse(y, &target_value).unwrap();
        let mut with_sg = p.clone();
        g.backward(l).unwrap().apply_to(&mut with_sg);

        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = mlp(&mut g, &p, xv).unwrap();
        let l = g.mse(y, &mlp_value(&p, &x2)).unwrap();
        let mut with_const = p.clone();
        g.backward(l).unwrap().apply_to(&mut with_const);

        let a: Vec<u64> = with_sg.flat_grads().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = with_const.flat_grads().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

            #[test]
            fn jvp_is_linear_in_tangent(seed in 0u64..1_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = two_layer(&mut rng, 3, 8, 2);
                let x = random(&mut rng, 4, 3);
                let a = random(&mut rng, 4, 3);
                let b = random(&mut rng, 4, 3);
                let jvp = |d: Tensor2| jvp_forward(|g, xs| mlp(g, &p, xs[0]), &[x.clone()], &[d]).unwrap().1;
                let combined = jvp(a.scale(alpha).add(&b.scale(beta)));
                let separate = jvp(a).scale(alpha).add(&jvp(b).scale(beta));
                prop_assert!(rel_err(&combined, &separate, 1e-12) < 1e-12);
            }

            #[test]
            fn vjp_jvp_dot_product(seed in 0u64..1_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = two_layer(&mut rng, 3, 8, 2);
                let x = random(&mut rng, 4, 3);
                let d = random(&mut rng, 4, 3);
                let w = random(&mut rng, 4, 2);
                let (_, jd) = jvp_forward(|g, xs| mlp(g, &p, xs[0]), &[x.clone()], &[d.clone()]).unwrap();
                let mut g = Graph::new();
                let xv = g.input(x);
                let y = mlp(&mut g, &p, xv).unwrap();
                let s = g.weighted_sum(y, &w).unwrap();
                let grads = g.backward(s).unwrap();
                let lhs = grads.wrt(xv).unwrap().dot(&d);
                let rhs = w.dot(&jd);
                prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12));
            }
        }
    }
}
