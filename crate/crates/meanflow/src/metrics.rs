//! Sample-quality metrics and field export.

use serde::Serialize;

use crate::autodiff::Tensor2;
use crate::error::{Error, Result};

/// Kernel bandwidth for [`mmd2`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the union of both sets.
    Auto,
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the rows of `a` and `b` together.
pub fn median_heuristic(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    let all = Tensor2::concat_rows(&[a, b])?;
    let n = all.rows();
    if n < 2 {
        return Err(Error::contract("median heuristic needs at least two points"));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(all.row(i), all.row(j)));
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(m.sqrt())
}

/// Unbiased Gaussian-kernel MMD² with `k(x, y) = exp(-‖x - y‖² / 2h²)`.
///
/// Within-set sums exclude the diagonal, so the estimate can be negative.
///
/// ```
/// use meanflow::autodiff::Tensor2;
/// use meanflow::metrics::{mmd2, Bandwidth};
///
/// let a = Tensor2::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
/// let v = mmd2(&a, &a, Bandwidth::Fixed(1.0)).unwrap();
/// assert!((v - ((-0.5f64).exp() - 1.0)).abs() < 1e-15);
/// ```
pub fn mmd2(a: &Tensor2, b: &Tensor2, bandwidth: Bandwidth) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::contract(format!(
            "mmd2 needs at least two rows per set, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("mmd2", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let h = match bandwidth {
        Bandwidth::Auto => median_heuristic(a, b)?,
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("mmd2 bandwidth must be positive, got {h}")));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let within = |x: &Tensor2| {
        let n = x.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += (-gamma * sq_dist(x.row(i), x.row(j))).exp();
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    let cross = cross / (a.rows() * b.rows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

pub const DEFAULT_K_RADIUS: f64 = 3.0;

/// Lower end of the nearest/second-nearest distance ratio band that marks a
/// sample as lying between two modes; the band is `[0.8, 1/0.8]`.
pub const BETWEEN_MODES_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStats {
    pub per_mode_counts: Vec<usize>,
    pub outlier_count: usize,
    pub outlier_fraction: f64,
    pub assignment_radius: f64,
}

fn check_centers(centers: &[[f64; 2]], sigma: f64, samples: &Tensor2) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::contract("mode statistics need at least one center"));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if samples.cols() != 2 {
        return Err(Error::shape("mode_stats", format!("samples {:?}", samples.shape())));
    }
    Ok(())
}

/// Distances to the nearest and second-nearest center, and the nearest index.
fn nearest_two(p: &[f64], centers: &[[f64; 2]]) -> (usize, f64, f64) {
    let (mut best, mut d1, mut d2) = (0, f64::INFINITY, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c).sqrt();
        if d < d1 {
            d2 = d1;
            d1 = d;
            best = k;
        } else if d < d2 {
            d2 = d;
        }
    }
    (best, d1, d2)
}

/// Assigns each sample to its nearest center when within `k_radius·sigma`,
/// otherwise counts it as an outlier.
pub fn mode_stats(samples: &Tensor2, centers: &[[f64; 2]], sigma: f64, k_radius: f64) -> Result<ModeStats> {
    check_centers(centers, sigma, samples)?;
    let radius = k_radius * sigma;
    let mut counts = vec![0; centers.len()];
    let mut outliers = 0;
    for p in samples.iter_rows() {
        let (k, d1, _) = nearest_two(p, centers);
        if d1 <= radius {
            counts[k] += 1;
        } else {
            outliers += 1;
        }
    }
    let total = samples.rows();
    Ok(ModeStats {
        per_mode_counts: counts,
        outlier_count: outliers,
        outlier_fraction: if total == 0 { 0.0 } else { outliers as f64 / total as f64 },
        assignment_radius: radius,
    })
}

/// Fraction of all samples that are outliers at `k_radius·sigma` and lie
/// roughly equidistant from their two nearest centers.
///
/// ```
/// use meanflow::autodiff::Tensor2;
/// use meanflow::metrics::mean_seek_score;
///
/// let centers = [[-5.0, 0.0], [5.0, 0.0]];
/// let s = Tensor2::from_rows(&[vec![0.0, 0.0], vec![5.0, 0.0]]).unwrap();
/// assert_eq!(mean_seek_score(&s, &centers, 0.5, 3.0).unwrap(), 0.5);
/// ```
pub fn mean_seek_score(samples: &Tensor2, centers: &[[f64; 2]], sigma: f64, k_radius: f64) -> Result<f64> {
    check_centers(centers, sigma, samples)?;
    if samples.rows() == 0 {
        return Ok(0.0);
    }
    let radius = k_radius * sigma;
    let between = samples
        .iter_rows()
        .filter(|p| {
            let (_, d1, d2) = nearest_two(p, centers);
            d1 > radius && d2.is_finite() && d1 >= BETWEEN_MODES_RATIO * d2
        })
        .count();
    Ok(between as f64 / samples.rows() as f64)
}

/// Axis-aligned box `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

/// One row of an exported field: position and network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldRow {
    pub x: f64,
    pub y: f64,
    pub ux: f64,
    pub uy: f64,
}

/// Evaluates `eval` on a `res × res` grid in one batch. Rows run over `x`
/// fastest, then `y`.
pub fn field_grid(
    eval: impl FnOnce(&Tensor2) -> Result<Tensor2>,
    bbox: BBox,
    res: usize,
) -> Result<Vec<FieldRow>> {
    if res < 2 {
        return Err(Error::contract(format!("field grid resolution must be >= 2, got {res}")));
    }
    let lerp = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (res - 1) as f64;
    let mut pts = Vec::with_capacity(2 * res * res);
    for iy in 0..res {
        for ix in 0..res {
            pts.push(lerp(bbox.x, ix));
            pts.push(lerp(bbox.y, iy));
        }
    }
    let z = Tensor2::from_vec(res * res, 2, pts)?;
    let u = eval(&z)?;
    if u.shape() != z.shape() {
        return Err(Error::shape("field_grid", format!("evaluator returned {:?}", u.shape())));
    }
    Ok(z.iter_rows()
        .zip(u.iter_rows())
        .map(|(p, v)| FieldRow {
            x: p[0],
            y: p[1],
            ux: v[0],
            uy: v[1],
        })
        .collect())
}

/// Exponential moving average `m ← decay·m + (1 - decay)·x`, started at the
/// first value.
pub fn ema(values: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut m = None;
    for &x in values {
        let next = match m {
            None => x,
            Some(prev) => decay * prev + (1.0 - decay) * x,
        };
        m = Some(next);
        out.push(next);
    }
    out
}
