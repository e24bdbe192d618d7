//! Geometry of unit vectors: normalisation, angles, uniform sampling and the
//! expected nearest-neighbour separation of uniformly placed class centres.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-30;

/// Unit-norm tolerance for constructed vectors.
pub const UNIT_TOL: f64 = 1e-12;

/// Sequential dot product. Every cosine in the crate goes through this
/// single fold so that independently written paths produce bit-identical
/// values on identical inputs.
pub fn vdot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Angle in radians between two vectors of cosine `dot`, clamped to [-1, 1]
/// before arccos.
pub fn angle_from_dot(dot: f64) -> f64 {
    dot.clamp(-1.0, 1.0).acos()
}

/// A vector on the unit sphere, d >= 2, norm 1 within [`UNIT_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Array1<f64>);

impl UnitVector {
    /// Normalises `v` onto the sphere.
    pub fn normalize(v: Array1<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidDimension { d: v.len() });
        }
        let norm = vdot(v.view(), v.view()).sqrt();
        if norm < ZERO_NORM {
            return Err(Error::ZeroVector { index: 0 });
        }
        Ok(UnitVector(v / norm))
    }

    /// Wraps a vector that is already unit norm within [`UNIT_TOL`].
    pub fn from_unit(v: Array1<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidDimension { d: v.len() });
        }
        let norm = vdot(v.view(), v.view()).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonFiniteInput);
        }
        Ok(UnitVector(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// N row-wise unit vectors of dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<f64> {
        self.rows.row(i)
    }
}

/// n column-wise unit vectors (class centres) of dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct CentreMatrix {
    cols: Array2<f64>,
}

impl CentreMatrix {
    pub fn classes(&self) -> usize {
        self.cols.ncols()
    }

    pub fn dim(&self) -> usize {
        self.cols.nrows()
    }

    pub fn cols(&self) -> &Array2<f64> {
        &self.cols
    }

    pub fn col(&self, j: usize) -> ArrayView1<f64> {
        self.cols.column(j)
    }
}

/// Row-normalises an N x d matrix onto the sphere.
pub fn normalize_rows(matrix: &Array2<f64>) -> Result<EmbeddingBatch> {
    if matrix.nrows() < 1 {
        return Err(Error::InvalidDimension { d: 0 });
    }
    if matrix.ncols() < 2 {
        return Err(Error::InvalidDimension { d: matrix.ncols() });
    }
    let mut rows = matrix.clone();
    for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
        let norm = vdot(row.view(), row.view()).sqrt();
        if norm < ZERO_NORM {
            return Err(Error::ZeroVector { index: i });
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(EmbeddingBatch { rows })
}

/// Column-normalises a d x n matrix of class centres.
pub fn normalize_columns(matrix: &Array2<f64>) -> Result<CentreMatrix> {
    if matrix.ncols() < 2 {
        return Err(Error::InvalidDimension { d: matrix.ncols() });
    }
    if matrix.nrows() < 2 {
        return Err(Error::InvalidDimension { d: matrix.nrows() });
    }
    let mut cols = matrix.clone();
    for (j, mut col) in cols.columns_mut().into_iter().enumerate() {
        let norm = vdot(col.view(), col.view()).sqrt();
        if norm < ZERO_NORM {
            return Err(Error::ZeroVector { index: j });
        }
        col.mapv_inplace(|x| x / norm);
    }
    Ok(CentreMatrix { cols })
}

/// Angle between two unit vectors, radians in [0, pi].
pub fn angle(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    Ok(angle_from_dot(vdot(u.view(), v.view())))
}

/// Draws a direction from the rotation-invariant distribution on the
/// (d-1)-sphere by normalising a standard Gaussian vector.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> UnitVector {
    assert!(d >= 2, "sphere sampling needs d >= 2");
    loop {
        let v = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        if let Ok(u) = UnitVector::normalize(v) {
            return u;
        }
    }
}

/// Samples n uniform centres as a d x n matrix.
pub fn sample_uniform_centres<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> CentreMatrix {
    assert!(n >= 2, "need at least two centres");
    let mut cols = Array2::zeros((d, n));
    for j in 0..n {
        let u = sample_uniform_sphere(d, rng);
        cols.column_mut(j).assign(&u.view());
    }
    CentreMatrix { cols }
}

/// Minimum angle over all unordered pairs of centres, by exhaustive scan.
///
/// The maximum pairwise cosine is reduced first; arccos is applied once.
/// Max is exact under any evaluation order, so the result is identical to
/// taking the minimum of the per-pair angles.
pub fn min_pairwise_angle(centres: &CentreMatrix) -> f64 {
    let n = centres.classes();
    assert!(n >= 2, "need at least two centres");
    let mut max_dot = f64::NEG_INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = vdot(centres.col(i), centres.col(j));
            if d > max_dot {
                max_dot = d;
            }
        }
    }
    angle_from_dot(max_dot)
}

/// Expected minimum pairwise angle of n uniform centres on the (d-1)-sphere:
///
/// ```text
/// n^(-2/(d-1)) * Gamma(1 + 1/(d-1))
///     * ( Gamma(d/2) / (2 sqrt(pi) (d-1) Gamma((d-1)/2)) )^(-1/(d-1))
/// ```
///
/// Evaluated through log-gamma so large d does not overflow. The formula is
/// an n -> infinity asymptotic; see [`mc_nearest_separation`] for the
/// empirical check of its validity at a given (d, n).
pub fn expected_nearest_separation(d: usize, n: u64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidDimension { d });
    }
    assert!(n >= 2, "need at least two classes");
    let dm1 = (d - 1) as f64;
    let ln_n = (n as f64).ln();
    let ln_inner = ln_gamma(d as f64 / 2.0)
        - (2.0 * std::f64::consts::PI.sqrt()).ln()
        - dm1.ln()
        - ln_gamma((d as f64 - 1.0) / 2.0);
    let ln_e = -2.0 / dm1 * ln_n + ln_gamma(1.0 + 1.0 / dm1) - ln_inner / dm1;
    Ok(ln_e.exp())
}

/// Monte-Carlo estimate of the same expectation: mean over `trials`
/// independent draws of n uniform centres of [`min_pairwise_angle`].
///
/// Trials run in parallel; each owns a generator seeded from `seed` and the
/// trial index, and the mean is reduced in trial order, so the result does
/// not depend on the worker count.
pub fn mc_nearest_separation(d: usize, n: usize, trials: usize, seed: u64) -> f64 {
    assert!(trials >= 1);
    let mins: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let centres = sample_uniform_centres(d, n, &mut rng);
            min_pairwise_angle(&centres)
        })
        .collect();
    mins.iter().sum::<f64>() / trials as f64
}
