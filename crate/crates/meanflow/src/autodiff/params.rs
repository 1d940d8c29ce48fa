use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};

/// One named parameter with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor2,
    pub grad: Tensor2,
    pub adam_m: Tensor2,
    pub adam_v: Tensor2,
}

impl ParamEntry {
    fn new(value: Tensor2) -> Self {
        let (r, c) = value.shape();
        ParamEntry {
            value,
            grad: Tensor2::zeros(r, c),
            adam_m: Tensor2::zeros(r, c),
            adam_v: Tensor2::zeros(r, c),
        }
    }
}

/// Named parameter matrices of one network.
///
/// The `scope` tags every parameter bound into a [`Graph`](super::Graph) so
/// that gradients computed there can be routed back to the owning set.
/// Entries keep insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    scope: String,
    entries: Vec<(String, ParamEntry)>,
    step_count: u64,
}

impl ParamSet {
    pub fn new(scope: impl Into<String>) -> Self {
        ParamSet {
            scope: scope.into(),
            entries: Vec::new(),
            step_count: 0,
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<()> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::contract(format!(
                "duplicate parameter `{name}` in scope `{}`",
                self.scope
            )));
        }
        self.entries.push((name, ParamEntry::new(value)));
        Ok(())
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor2> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2> {
        self.entry(name).map(|e| &e.grad)
    }

    /// Replaces a value, keeping shape. Optimizer state is left alone.
    pub fn set_value(&mut self, name: &str, value: Tensor2) -> Result<()> {
        let scope = self.scope.clone();
        let entry = self
            .entry_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter `{name}` in scope `{scope}`")))?;
        value.check_same_shape(&entry.value, "ParamSet::set_value")?;
        entry.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, e) in &mut self.entries {
            e.grad.as_mut_slice().fill(0.0);
        }
    }

    /// Adam with bias correction; grads are zeroed afterwards.
    pub fn adam_step(&mut self, hyper: &AdamHyper) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (_, e) in &mut self.entries {
            let g = e.grad.as_slice();
            let m = e.adam_m.as_mut_slice();
            let v = e.adam_v.as_mut_slice();
            let w = e.value.as_mut_slice();
            for i in 0..g.len() {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        self.zero_grads();
    }

    /// Values only, in entry order, for checkpoints and comparisons.
    pub fn values(&self) -> Vec<(String, Tensor2)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.value.clone()))
            .collect()
    }

    /// Flattens all values in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, e)| e.value.as_slice().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, e)| e.grad.as_slice().iter().copied())
            .collect()
    }

    /// Overwrites values from a flat vector laid out as [`flat_values`](Self::flat_values).
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "ParamSet::set_flat_values",
                format!("expected {} values, got {}", self.numel(), flat.len()),
            ));
        }
        let mut offset = 0;
        for (_, e) in &mut self.entries {
            let n = e.value.len();
            e.value
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// True when values are bitwise equal entry by entry.
    pub fn values_bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((n1, e1), (n2, e2))| {
                n1 == n2
                    && e1.value.shape() == e2.value.shape()
                    && e1
                        .value
                        .as_slice()
                        .iter()
                        .zip(e2.value.as_slice())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..AdamHyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push("lr");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta2");
        }
        if !(self.eps > 0.0) {
            bad.push("eps");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                keys: bad.into_iter().map(String::from).collect(),
            })
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new("t");
        p.insert("w", Tensor2::scalar(value)).unwrap();
        p.entry_mut("w").unwrap().grad = Tensor2::scalar(grad);
        p
    }

    #[test]
    fn zero_grad_leaves_values() {
        let mut p = ParamSet::new("t");
        p.insert("w", Tensor2::from_rows(&[vec![1.0, -2.0]]).unwrap())
            .unwrap();
        let before = p.clone();
        p.adam_step(&AdamHyper::default());
        assert!(p.values_bitwise_eq(&before));
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let hyper = AdamHyper::with_lr(0.01);
        for g in [3.0, -0.25, 1e-3] {
            let mut p = ParamSet::new("t");
            p.insert("w", Tensor2::filled(2, 3, 1.0)).unwrap();
            p.entry_mut("w").unwrap().grad = Tensor2::filled(2, 3, g);
            p.adam_step(&hyper);
            for &w in p.value("w").unwrap().as_slice() {
                let step = 1.0 - w;
                assert!((step.abs() - 0.01).abs() < 1e-7, "g={g} step={step}");
                assert_eq!(step.signum(), g.signum());
            }
            assert!(p.grad("w").unwrap().as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // scalar Adam written out by hand, independent of ParamSet
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let grads = [0.5, -2.0];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let hyper = AdamHyper {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        let mut p = one_param(1.0, grads[0]);
        p.adam_step(&hyper);
        p.entry_mut("w").unwrap().grad = Tensor2::scalar(grads[1]);
        p.adam_step(&hyper);
        assert_eq!(p.value("w").unwrap().item(), w);
        // frozen from an independent run of the same recurrence
        assert!((w - 0.955_950_351_020_055_5).abs() < 1e-12, "w={w}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new("t");
        p.insert("w", Tensor2::scalar(0.0)).unwrap();
        assert!(p.insert("w", Tensor2::scalar(1.0)).is_err());
    }

    #[test]
    fn invalid_hyper_lists_keys() {
        let h = AdamHyper {
            lr: 0.0,
            beta1: 1.0,
            beta2: 0.5,
            eps: 1e-8,
        };
        match h.validate() {
            Err(Error::Config { keys }) => assert_eq!(keys, vec!["lr", "beta1"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
