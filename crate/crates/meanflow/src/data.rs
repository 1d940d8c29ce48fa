//! Toy source and target distributions with reproducible random streams.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2;
use crate::error::{Error, Result};

/// Deterministic random stream identified by `(seed, label)`.
///
/// Substreams are derived from the root seed and a label path, never from the
/// parent's position, so consuming one stream cannot shift another.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, "")
    }

    pub fn derive(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(label.as_bytes()));
        SeededRng {
            seed,
            label: label.to_owned(),
            inner,
        }
    }

    /// Independent stream labelled `parent/label`.
    pub fn substream(&self, label: &str) -> SeededRng {
        if self.label.is_empty() {
            Self::derive(self.seed, label)
        } else {
            Self::derive(self.seed, &format!("{}/{label}", self.label))
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Equal-weight isotropic Gaussian mixture with modes spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub k_modes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            k_modes: 8,
            radius: 6.0,
            sigma: 0.4,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut keys = Vec::new();
        if self.k_modes < 1 {
            keys.push("k_modes".to_owned());
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            keys.push("radius".to_owned());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            keys.push("sigma".to_owned());
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }

    /// `radius·(cos 2πk/K, sin 2πk/K)` for `k = 0..K`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let k = self.k_modes as f64;
        (0..self.k_modes)
            .map(|i| {
                let angle = 2.0 * PI * i as f64 / k;
                [self.radius * angle.cos(), self.radius * angle.sin()]
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Tensor2 {
        let centers = self.centers();
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[rng.random_range(0..self.k_modes)];
            data.push(c[0] + self.sigma * rng.normal());
            data.push(c[1] + self.sigma * rng.normal());
        }
        Tensor2::from_raw(n, 2, data)
    }
}

/// `n` i.i.d. draws from the standard normal prior in two dimensions.
pub fn sample_prior(n: usize, rng: &mut SeededRng) -> Tensor2 {
    let data = (0..2 * n).map(|_| rng.normal()).collect();
    Tensor2::from_raw(n, 2, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_centers_on_unit_circle() {
        let spec = MixtureSpec {
            k_modes: 4,
            radius: 1.0,
            sigma: 0.1,
        };
        let expected = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (c, e) in spec.centers().iter().zip(expected) {
            assert!((c[0] - e[0]).abs() < 1e-15 && (c[1] - e[1]).abs() < 1e-15);
        }
        let one = MixtureSpec {
            k_modes: 1,
            radius: 2.5,
            sigma: 0.1,
        };
        assert_eq!(one.centers(), vec![[2.5, 0.0]]);
    }

    #[test]
    fn adjacent_center_distance_is_chord() {
        let spec = MixtureSpec::default();
        let c = spec.centers();
        let chord = 2.0 * spec.radius * (PI / spec.k_modes as f64).sin();
        for i in 0..c.len() {
            let j = (i + 1) % c.len();
            let d = ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt();
            assert!((d - chord).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_collapses_onto_center() {
        let spec = MixtureSpec {
            k_modes: 1,
            radius: 3.0,
            sigma: 1e-12,
        };
        let x = spec.sample(100, &mut SeededRng::new(1));
        for row in x.iter_rows() {
            assert!((row[0] - 3.0).abs() < 1e-9 && row[1].abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_streams_independent() {
        let spec = MixtureSpec::default();
        let a = spec.sample(64, &mut SeededRng::derive(5, "data"));
        let b = spec.sample(64, &mut SeededRng::derive(5, "data"));
        assert_eq!(a, b);
        let root = SeededRng::new(5);
        let mut s1 = root.substream("x");
        let mut s2 = root.substream("y");
        assert_ne!(s1.next_u64(), s2.next_u64());
        // labels compose as paths
        assert_eq!(root.substream("x").substream("y").label(), "x/y");
    }

    #[test]
    fn mixture_mean_is_centroid() {
        let spec = MixtureSpec::default();
        let n = 100_000;
        let x = spec.sample(n, &mut SeededRng::new(42));
        let mean = x.col_mean();
        // centroid of a full ring is the origin; per-coordinate spread is
        // sqrt(R²/2 + σ²)
        let spread = (spec.radius.powi(2) / 2.0 + spec.sigma.powi(2)).sqrt();
        let tol = 3.0 * spread / (n as f64).sqrt();
        assert!(mean.get(0, 0).abs() < tol && mean.get(0, 1).abs() < tol, "{mean:?}");
    }

    #[test]
    fn mode_counts_are_balanced() {
        let spec = MixtureSpec::default();
        let n = 100_000;
        let x = spec.sample(n, &mut SeededRng::new(8));
        let centers = spec.centers();
        let mut counts = vec![0usize; centers.len()];
        for row in x.iter_rows() {
            let nearest = (0..centers.len())
                .min_by(|&a, &b| {
                    let da = (row[0] - centers[a][0]).powi(2) + (row[1] - centers[a][1]).powi(2);
                    let db = (row[0] - centers[b][0]).powi(2) + (row[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            counts[nearest] += 1;
        }
        let p = 1.0 / spec.k_modes as f64;
        let band = 4.0 * (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= band, "count {c}");
        }
    }

    #[test]
    fn prior_moments() {
        let n = 100_000;
        let z = sample_prior(n, &mut SeededRng::new(3));
        let mean = z.col_mean();
        assert!(mean.as_slice().iter().all(|m| m.abs() < 0.02), "{mean:?}");
        let mut cov = [[0.0; 2]; 2];
        for row in z.iter_rows() {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (row[i] - mean.get(0, i)) * (row[j] - mean.get(0, j));
                }
            }
        }
        for (i, row) in cov.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((c / n as f64 - expected).abs() < 0.03);
            }
        }
    }

    #[test]
    fn invalid_spec_lists_keys() {
        let bad = MixtureSpec {
            k_modes: 0,
            radius: -1.0,
            sigma: 0.0,
        };
        match bad.validate() {
            Err(Error::Config { keys }) => assert_eq!(keys, vec!["k_modes", "radius", "sigma"]),
            other => panic!("{other:?}"),
        }
    }
}
