//! Recorded computation with forward-mode tangents and a reverse sweep.
//!
//! Every node holds a [`DualBatch`]: the primal value plus an optional
//! tangent. Tangents are pushed forward eagerly while the graph is built, so a
//! single forward pass yields both `f(x)` and the directional derivative
//! `J_f(x)·ẋ` for whatever input tangents were supplied. Parameters and
//! constants never carry tangents. [`Graph::backward`] then runs reverse mode
//! over the same record.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{DualBatch, ParamSet, Tensor2};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Deliberate rule corruption, used as a negative control for the gradient
/// checker. Never set outside verification code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Drops the `1 - tanh²` factor from the tanh tangent rule.
    TanhJvp,
    /// Doubles the weight gradient of `linear`.
    LinearVjp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamKey {
    pub scope: String,
    pub name: String,
}

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(ParamKey),
    Linear { x: usize, w: usize, b: usize },
    Tanh(usize),
    Relu(usize),
    Affine { x: usize, scale: f64 },
    Add(usize, usize),
    Scale { x: usize, s: f64 },
    AddScaledRows { a: usize, b: usize, coef: Vec<f64> },
    ConcatCols(Vec<usize>),
    Mean(usize),
    Mse { a: usize, target: Tensor2 },
    WeightedSum { x: usize, weights: Tensor2 },
}

#[derive(Debug)]
struct Node {
    value: DualBatch,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    fault: Fault,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: Fault::None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            fault,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "Var used with a graph that did not create it");
        v.index
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[self.idx(v)]
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.node(v).value.primal
    }

    pub fn tangent(&self, v: Var) -> Option<&Tensor2> {
        self.node(v).value.tangent.as_ref()
    }

    /// Tangent, or zeros of the value's shape when no tangent reached `v`.
    pub fn tangent_or_zero(&self, v: Var) -> Tensor2 {
        let n = self.node(v);
        n.value.tangent.clone().unwrap_or_else(|| {
            let (r, c) = n.value.primal.shape();
            Tensor2::zeros(r, c)
        })
    }

    pub fn dual(&self, v: Var) -> &DualBatch {
        &self.node(v).value
    }

    fn push(&mut self, value: DualBatch, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A differentiable input without tangent.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(DualBatch::new(value), Op::Input, true)
    }

    /// A differentiable input carrying a forward-mode tangent.
    pub fn input_dual(&mut self, value: DualBatch) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A value that is a constant for both differentiation modes.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(DualBatch::new(value), Op::Constant, false)
    }

    /// Stop-gradient: re-enters `v`'s value as a constant. No reverse edge,
    /// no tangent.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Binds a parameter. Binding the same parameter twice returns the same node.
    pub fn param(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        let key = ParamKey {
            scope: set.scope().to_owned(),
            name: name.to_owned(),
        };
        if let Some(i) = self
            .nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Param(k) if *k == key))
        {
            return Ok(Var {
                graph: self.id,
                index: i,
            });
        }
        let value = set
            .value(name)
            .ok_or_else(|| {
                Error::contract(format!("no parameter `{name}` in scope `{}`", set.scope()))
            })?
            .clone();
        Ok(self.push(DualBatch::new(value), Op::Param(key), true))
    }

    fn grad_flag(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let (xv, wv, bv) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value.primal,
            &self.nodes[bi].value.primal,
        );
        if xv.primal.cols() != wv.rows() || bv.shape() != (1, wv.cols()) {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    xv.primal.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let primal = xv.primal.matmul(wv).add_row_broadcast(bv);
        let (wt, bt) = (&self.nodes[wi].value.tangent, &self.nodes[bi].value.tangent);
        // ẋW + xẆ + ḃ, skipping absent (zero) tangents
        let mut tangent = xv.tangent.as_ref().map(|t| t.matmul(wv));
        if let Some(wt) = wt {
            let term = xv.primal.matmul(wt);
            tangent = Some(match tangent {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        if let Some(bt) = bt {
            tangent = Some(match tangent {
                Some(t) => t.add_row_broadcast(bt),
                None => Tensor2::zeros(primal.rows(), primal.cols()).add_row_broadcast(bt),
            });
        }
        let needs = self.grad_flag(&[xi, wi, bi]);
        Ok(self.push(
            DualBatch { primal, tangent },
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
            needs,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let primal = xv.primal.map(f64::tanh);
        let tangent = xv.tangent.as_ref().map(|t| match self.fault {
            Fault::TanhJvp => t.clone(),
            _ => t.zip_map(&primal, |d, y| d * (1.0 - y * y)),
        });
        let needs = self.nodes[xi].needs_grad;
        self.push(DualBatch { primal, tangent }, Op::Tanh(xi), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let primal = xv.primal.map(|v| v.max(0.0));
        let tangent = xv
            .tangent
            .as_ref()
            .map(|t| t.zip_map(&xv.primal, |d, v| if v > 0.0 { d } else { 0.0 }));
        let needs = self.nodes[xi].needs_grad;
        self.push(DualBatch { primal, tangent }, Op::Relu(xi), needs)
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let primal = xv.primal.map(|v| scale * v + shift);
        let tangent = xv.tangent.as_ref().map(|t| t.scale(scale));
        let needs = self.nodes[xi].needs_grad;
        self.push(DualBatch { primal, tangent }, Op::Affine { x: xi, scale }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let primal = xv.primal.scale(s);
        let tangent = xv.tangent.as_ref().map(|t| t.scale(s));
        let needs = self.nodes[xi].needs_grad;
        self.push(DualBatch { primal, tangent }, Op::Scale { x: xi, s }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        av.primal.check_same_shape(&bv.primal, "add")?;
        let primal = av.primal.add(&bv.primal);
        let tangent = sum_tangents(av.tangent.as_ref(), bv.tangent.as_ref(), |t| t.clone());
        let needs = self.grad_flag(&[ai, bi]);
        Ok(self.push(DualBatch { primal, tangent }, Op::Add(ai, bi), needs))
    }

    /// `a + coef[i]·b` row by row.
    pub fn add_scaled_rows(&mut self, a: Var, b: Var, coef: &[f64]) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        av.primal.check_same_shape(&bv.primal, "add_scaled_rows")?;
        if coef.len() != av.primal.rows() {
            return Err(Error::shape(
                "add_scaled_rows",
                format!("{} coefficients for {} rows", coef.len(), av.primal.rows()),
            ));
        }
        let primal = av.primal.add_scaled_rows(&bv.primal, coef);
        let tangent = sum_tangents(av.tangent.as_ref(), bv.tangent.as_ref(), |t| {
            t.scale_rows(coef)
        });
        let needs = self.grad_flag(&[ai, bi]);
        Ok(self.push(
            DualBatch { primal, tangent },
            Op::AddScaledRows {
                a: ai,
                b: bi,
                coef: coef.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let primals: Vec<&Tensor2> = idx.iter().map(|&i| &self.nodes[i].value.primal).collect();
        let primal = Tensor2::concat_cols(&primals)?;
        let tangent = if idx.iter().any(|&i| self.nodes[i].value.tangent.is_some()) {
            let zeros: Vec<Tensor2> = idx
                .iter()
                .map(|&i| {
                    let (r, c) = self.nodes[i].value.primal.shape();
                    Tensor2::zeros(r, c)
                })
                .collect();
            let tans: Vec<&Tensor2> = idx
                .iter()
                .zip(&zeros)
                .map(|(&i, z)| self.nodes[i].value.tangent.as_ref().unwrap_or(z))
                .collect();
            Some(Tensor2::concat_cols(&tans)?)
        } else {
            None
        };
        let needs = self.grad_flag(&idx);
        Ok(self.push(DualBatch { primal, tangent }, Op::ConcatCols(idx), needs))
    }

    /// Mean of all entries, as a `1×1` node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let primal = Tensor2::scalar(xv.primal.mean());
        let tangent = xv.tangent.as_ref().map(|t| Tensor2::scalar(t.mean()));
        let needs = self.nodes[xi].needs_grad;
        self.push(DualBatch { primal, tangent }, Op::Mean(xi), needs)
    }

    /// Mean squared error against a constant target, averaged over all entries.
    pub fn mse(&mut self, a: Var, target: &Tensor2) -> Result<Var> {
        let ai = self.idx(a);
        let av = &self.nodes[ai].value;
        av.primal.check_same_shape(target, "mse")?;
        let diff = av.primal.sub(target);
        let n = diff.len() as f64;
        let primal = Tensor2::scalar(diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n);
        let tangent = av
            .tangent
            .as_ref()
            .map(|t| Tensor2::scalar(2.0 * diff.dot(t) / n));
        let needs = self.nodes[ai].needs_grad;
        Ok(self.push(
            DualBatch { primal, tangent },
            Op::Mse {
                a: ai,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// `Σ weights ⊙ x` as a `1×1` node; the weights are constant.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor2) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        xv.primal.check_same_shape(weights, "weighted_sum")?;
        let primal = Tensor2::scalar(xv.primal.dot(weights));
        let tangent = xv.tangent.as_ref().map(|t| Tensor2::scalar(t.dot(weights)));
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(
            DualBatch { primal, tangent },
            Op::WeightedSum {
                x: xi,
                weights: weights.clone(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(Error::contract(
                "backward called on a node this graph did not record",
            ));
        }
        let root = &self.nodes[loss.index];
        if root.value.primal.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                root.value.primal.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            // leaves keep their gradient for the caller
            if !node.needs_grad || matches!(node.op, Op::Input | Op::Constant | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Input | Op::Constant | Op::Param(_) => unreachable!(),
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xv = &self.nodes[x].value.primal;
                    let wv = &self.nodes[w].value.primal;
                    if self.nodes[x].needs_grad {
                        accumulate(&mut grads, x, g.matmul_t(false, wv, true));
                    }
                    if self.nodes[w].needs_grad {
                        let mut gw = xv.matmul_t(true, &g, false);
                        if self.fault == Fault::LinearVjp {
                            gw = gw.scale(2.0);
                        }
                        accumulate(&mut grads, w, gw);
                    }
                    if self.nodes[b].needs_grad {
                        accumulate(&mut grads, b, g.col_sum());
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value.primal;
                    accumulate(&mut grads, *x, g.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value.primal;
                    accumulate(
                        &mut grads,
                        *x,
                        g.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 }),
                    );
                }
                Op::Affine { x, scale } => accumulate(&mut grads, *x, g.scale(*scale)),
                Op::Scale { x, s } => accumulate(&mut grads, *x, g.scale(*s)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddScaledRows { a, b, coef } => {
                    accumulate(&mut grads, *b, g.scale_rows(coef));
                    accumulate(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.nodes[p].value.primal.cols();
                        if self.nodes[p].needs_grad {
                            accumulate(&mut grads, p, g.slice_cols(offset, width));
                        }
                        offset += width;
                    }
                }
                Op::Mean(x) => {
                    let (r, c) = self.nodes[*x].value.primal.shape();
                    let n = (r * c) as f64;
                    accumulate(&mut grads, *x, Tensor2::filled(r, c, g.item() / n));
                }
                Op::Mse { a, target } => {
                    let av = &self.nodes[*a].value.primal;
                    let k = 2.0 * g.item() / av.len() as f64;
                    accumulate(&mut grads, *a, av.zip_map(target, |a, t| k * (a - t)));
                }
                Op::WeightedSum { x, weights } => {
                    accumulate(&mut grads, *x, weights.scale(g.item()));
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.index + 1)
            .filter_map(|(i, n)| match &n.op {
                Op::Param(key) => grads[i].clone().map(|g| (key.clone(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            nodes: grads,
            params,
        })
    }
}

fn sum_tangents(
    a: Option<&Tensor2>,
    b: Option<&Tensor2>,
    map_b: impl Fn(&Tensor2) -> Tensor2,
) -> Option<Tensor2> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(map_b(b)),
        (Some(a), Some(b)) => Some(a.add(&map_b(b))),
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], i: usize, g: Tensor2) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    nodes: Vec<Option<Tensor2>>,
    params: Vec<(ParamKey, Tensor2)>,
}

impl Gradients {
    /// Gradient with respect to an input or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        assert_eq!(v.graph, self.graph, "Var from a different graph");
        self.nodes.get(v.index).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Tensor2)> {
        self.params.iter().map(|(k, g)| (k, g))
    }

    /// Adds the gradients of parameters bound from `set`'s scope into its
    /// accumulators. Parameters that did not take part are left alone.
    pub fn apply_to(&self, set: &mut ParamSet) {
        let scope = set.scope().to_owned();
        for (key, g) in &self.params {
            if key.scope != scope {
                continue;
            }
            if let Some(entry) = set.entry_mut(&key.name) {
                entry.grad.add_assign(g);
            }
        }
    }
}
