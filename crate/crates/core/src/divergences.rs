//! Semimetrics of negative type, distance-induced kernels, the generalized
//! energy distance and MMD, and their relation to Energy Confusion.
//!
//! Point sets are matrices whose rows are points. All expectations are
//! V-statistics: every ordered pair, self-pairs included, with uniform
//! weights.

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::confusion::{energy_confusion, ClassGroup};
use crate::error::{EcamlError, Result};

/// Absolute tolerance for the inequality and identity checks.
pub const INEQUALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semimetric {
    SquaredEuclidean,
    Euclidean,
    /// `(‖x−y‖²)^q`; of negative type for `q ∈ (0, 1]`.
    Power(f64),
}

impl Semimetric {
    pub fn power(q: f64) -> Result<Self> {
        if q > 0.0 && q < 1.0 {
            Ok(Semimetric::Power(q))
        } else {
            Err(EcamlError::Config(format!("power semimetric needs q in (0,1), got {q}")))
        }
    }

    pub fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        match *self {
            Semimetric::SquaredEuclidean => sq,
            Semimetric::Euclidean => sq.sqrt(),
            Semimetric::Power(q) => sq.powf(q),
        }
    }
}

/// Checked evaluation of `ρ(x, y)`.
pub fn semimetric_eval(rho: &Semimetric, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EcamlError::Shape(format!(
            "semimetric on vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(rho.eval(x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `k(x, y) = xᵀy`
    Linear,
    /// `k(x, y) = ½(ρ(x, z0) + ρ(y, z0) − ρ(x, y))`
    DistanceInduced { rho: Semimetric, z0: Vec<f64> },
}

impl Kernel {
    pub fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        match self {
            Kernel::Linear => x.dot(&y),
            Kernel::DistanceInduced { rho, z0 } => {
                let z0 = ArrayView1::from(z0.as_slice());
                0.5 * (rho.eval(x, z0) + rho.eval(y, z0) - rho.eval(x, y))
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            Kernel::DistanceInduced { z0, .. } if z0.len() != dim => Err(EcamlError::Shape(format!(
                "kernel centre has {} coordinates, points have {dim}",
                z0.len()
            ))),
            _ => Ok(()),
        }
    }
}

fn check_sets(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(EcamlError::Precondition("point sets must be non-empty".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(EcamlError::Shape(format!(
            "point sets have dimension {} and {}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

/// `E f(A, B)` over all ordered pairs.
fn v_mean(a: &ArrayView2<f64>, b: &ArrayView2<f64>, f: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        for rb in b.rows() {
            total += f(ra, rb);
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Generalized energy distance `2·E ρ(X,Y) − E ρ(X,X') − E ρ(Y,Y')`.
pub fn ged(x: ArrayView2<f64>, y: ArrayView2<f64>, rho: &Semimetric) -> Result<f64> {
    check_sets(&x, &y)?;
    let f = |a: ArrayView1<f64>, b: ArrayView1<f64>| rho.eval(a, b);
    Ok(2.0 * v_mean(&x, &y, f) - v_mean(&x, &x, f) - v_mean(&y, &y, f))
}

/// Squared MMD `E k(X,X') + E k(Y,Y') − 2·E k(X,Y)`.
pub fn mmd_sq(x: ArrayView2<f64>, y: ArrayView2<f64>, kernel: &Kernel) -> Result<f64> {
    check_sets(&x, &y)?;
    kernel.check_dim(x.ncols())?;
    let f = |a: ArrayView1<f64>, b: ArrayView1<f64>| kernel.eval(a, b);
    let value = v_mean(&x, &x, f) + v_mean(&y, &y, f) - 2.0 * v_mean(&x, &y, f);
    if *kernel == Kernel::Linear {
        let closed = linear_mmd_closed_form(x, y);
        debug_assert!(
            (value - closed).abs() <= 1e-8 * closed.abs().max(1.0),
            "linear MMD {value} disagrees with mean-difference form {closed}"
        );
    }
    Ok(value)
}

/// `‖mean(X) − mean(Y)‖²`
pub fn linear_mmd_closed_form(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let mx = x.mean_axis(Axis(0)).expect("non-empty");
    let my = y.mean_axis(Axis(0)).expect("non-empty");
    let diff = mx - my;
    diff.dot(&diff)
}

/// Gram matrix of the distance-induced kernel centred at `z0`, for an
/// arbitrary symmetric dissimilarity `rho`.
pub fn distance_induced_gram_with<F>(points: ArrayView2<f64>, z0: ArrayView1<f64>, rho: F) -> Result<Array2<f64>>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    if z0.len() != points.ncols() {
        return Err(EcamlError::Shape(format!(
            "centre has {} coordinates, points have {}",
            z0.len(),
            points.ncols()
        )));
    }
    let n = points.nrows();
    let to_centre: Vec<f64> = points.rows().into_iter().map(|p| rho(p, z0)).collect();
    let mut gram = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (to_centre[i] + to_centre[j] - rho(points.row(i), points.row(j)));
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }
    Ok(gram)
}

pub fn distance_induced_kernel_gram(
    points: ArrayView2<f64>,
    rho: &Semimetric,
    z0: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    distance_induced_gram_with(points, z0, |a, b| rho.eval(a, b))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(matrix: &Array2<f64>) -> Result<f64> {
    let (n, m) = matrix.dim();
    if n != m {
        return Err(EcamlError::Shape(format!("eigenvalues of a non-square {n}×{m} matrix")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let dm = DMatrix::from_fn(n, n, |i, j| matrix[[i, j]]);
    let eig = dm.symmetric_eigenvalues();
    Ok(eig.iter().copied().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsdCheck {
    pub min_eigenvalue: f64,
    pub tolerance: f64,
    pub is_psd: bool,
}

/// PSD test with tolerance `1e-9 · max|K|`.
pub fn psd_check(matrix: &Array2<f64>) -> Result<PsdCheck> {
    let min = min_eigenvalue(matrix)?;
    let scale = matrix.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tolerance = INEQUALITY_TOL * scale;
    Ok(PsdCheck {
        min_eigenvalue: min,
        tolerance,
        is_psd: min >= -tolerance,
    })
}

/// `Σ_i Σ_j α_i α_j ρ(z_i, z_j)` for zero-sum `α`.
pub fn negative_type_witness(points: ArrayView2<f64>, alphas: &[f64], rho: &Semimetric) -> Result<f64> {
    if alphas.len() != points.nrows() {
        return Err(EcamlError::Shape(format!(
            "{} weights for {} points",
            alphas.len(),
            points.nrows()
        )));
    }
    let sum: f64 = alphas.iter().sum();
    if sum.abs() > 1e-12 {
        return Err(EcamlError::Precondition(format!(
            "negative-type weights must sum to zero, got {sum}"
        )));
    }
    let mut total = 0.0;
    for (i, zi) in points.rows().into_iter().enumerate() {
        for (j, zj) in points.rows().into_iter().enumerate() {
            total += alphas[i] * alphas[j] * rho.eval(zi, zj);
        }
    }
    Ok(total)
}

/// `−2‖Σ α_i z_i‖²`, the closed form of the squared-Euclidean witness.
pub fn squared_euclidean_witness_identity(points: ArrayView2<f64>, alphas: &[f64]) -> f64 {
    let mut combo = Array1::<f64>::zeros(points.ncols());
    for (a, z) in alphas.iter().zip(points.rows()) {
        combo.scaled_add(*a, &z);
    }
    -2.0 * combo.dot(&combo)
}

fn stacked_confusion(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let stacked = concatenate(Axis(0), &[x, y])
        .map_err(|e| EcamlError::Shape(format!("cannot stack point sets: {e}")))?;
    let gi = ClassGroup::new(0, (0..x.nrows()).collect())?;
    let gj = ClassGroup::new(1, (x.nrows()..stacked.nrows()).collect())?;
    Ok(energy_confusion(stacked.view(), &gi, &gj)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcGedCheck {
    pub ec: f64,
    pub half_ged: f64,
    pub holds: bool,
}

/// Energy Confusion against half the squared-Euclidean energy distance.
pub fn check_ec_ged(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<EcGedCheck> {
    check_sets(&x, &y)?;
    let ec = stacked_confusion(x, y)?;
    let half_ged = 0.5 * ged(x, y, &Semimetric::SquaredEuclidean)?;
    Ok(EcGedCheck {
        ec,
        half_ged,
        holds: ec >= half_ged - INEQUALITY_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcMmdCheck {
    pub ec: f64,
    pub mmd: f64,
    pub half_ged: f64,
    /// `|MMD² − ½·GED|`
    pub equality_gap: f64,
    pub holds: bool,
}

/// Energy Confusion against the squared MMD of the linear kernel, plus the
/// identity `MMD² = ½·GED`.
pub fn check_ec_mmd(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<EcMmdCheck> {
    check_sets(&x, &y)?;
    let ec = stacked_confusion(x, y)?;
    let mmd = mmd_sq(x, y, &Kernel::Linear)?;
    let half_ged = 0.5 * ged(x, y, &Semimetric::SquaredEuclidean)?;
    let equality_gap = (mmd - half_ged).abs();
    Ok(EcMmdCheck {
        ec,
        mmd,
        half_ged,
        equality_gap,
        holds: ec >= mmd - INEQUALITY_TOL && equality_gap <= INEQUALITY_TOL,
    })
}
