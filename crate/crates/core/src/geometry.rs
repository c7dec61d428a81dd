//! Ellipsoidal uncertainty-set geometry.
//!
//! A set is `U(L, rho) = { u : ||L^{-1} u||_2 <= rho }` with `L` lower triangular
//! and a positive diagonal. This module provides the gauge (score) and support
//! functions, their Frobenius gradients with respect to `L`, the projection back
//! onto valid factors, and a jittered Cholesky factorization for baselines.
//!
//! All triangular systems are solved by substitution; no inverse is formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default lower bound enforced on the diagonal of a shape.
pub const DEFAULT_DIAG_FLOOR: f64 = 1e-6;

/// `||L^T w||` below this is treated as a vanishing support direction.
pub const ZERO_DIRECTION_TOL: f64 = 1e-12;

/// Trace tolerance for trace-normalized shapes.
pub const TRACE_TOL: f64 = 1e-9;

/// Lower-triangular Cholesky factor with a floored positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyShape {
    l: DMatrix<f64>,
}

impl CholeskyShape {
    /// Validates `m` against the default diagonal floor.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_floor(m, DEFAULT_DIAG_FLOOR)
    }

    pub fn with_floor(m: DMatrix<f64>, diag_floor: f64) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::InvalidShape(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("non-finite entry".into()));
        }
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                if m[(i, j)] != 0.0 {
                    return Err(Error::InvalidShape(format!(
                        "upper-triangular entry ({i},{j}) is nonzero"
                    )));
                }
            }
            if m[(i, i)] < diag_floor {
                return Err(Error::DegenerateShape { index: i, value: m[(i, i)], floor: diag_floor });
            }
        }
        Ok(Self { l: m })
    }

    pub fn identity(d: usize) -> Self {
        Self { l: DMatrix::identity(d, d) }
    }

    /// Diagonal factor; every entry must clear the default floor.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidShape("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.l
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.l.row(i).iter().copied().collect()).collect()
    }

    /// `trace(L L^T)`, the squared Frobenius norm.
    pub fn trace_llt(&self) -> f64 {
        self.l.norm_squared()
    }

    /// `L L^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Solves `L v = u` by forward substitution.
    pub fn forward_solve(&self, u: &[f64]) -> Result<DVector<f64>> {
        let d = self.dim();
        check_len(u.len(), d)?;
        let mut v = DVector::zeros(d);
        for i in 0..d {
            let lii = self.l[(i, i)];
            if lii.abs() < DEFAULT_DIAG_FLOOR {
                return Err(Error::DegenerateShape { index: i, value: lii, floor: DEFAULT_DIAG_FLOOR });
            }
            let mut acc = u[i];
            for j in 0..i {
                acc -= self.l[(i, j)] * v[j];
            }
            v[i] = acc / lii;
        }
        Ok(v)
    }

    /// Solves `L^T y = v` by back substitution.
    pub fn transpose_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.dim();
        check_len(v.len(), d)?;
        let mut y = DVector::zeros(d);
        for i in (0..d).rev() {
            let lii = self.l[(i, i)];
            if lii.abs() < DEFAULT_DIAG_FLOOR {
                return Err(Error::DegenerateShape { index: i, value: lii, floor: DEFAULT_DIAG_FLOOR });
            }
            let mut acc = v[i];
            for j in (i + 1)..d {
                acc -= self.l[(j, i)] * y[j];
            }
            y[i] = acc / lii;
        }
        Ok(y)
    }

    /// `L^T w`.
    pub fn transpose_mul(&self, w: &[f64]) -> Result<DVector<f64>> {
        check_len(w.len(), self.dim())?;
        Ok(self.l.tr_mul(&DVector::from_column_slice(w)))
    }

    /// Lower-triangle entries, row-major (`d(d+1)/2` values).
    pub fn lower_entries(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                out.push(self.l[(i, j)]);
            }
        }
        out
    }
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("vector of length {got}, shape dimension {want}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ShapeJson {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl Serialize for CholeskyShape {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ShapeJson { dim: self.dim(), rows: self.rows() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CholeskyShape {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = ShapeJson::deserialize(d)?;
        if raw.rows.len() != raw.dim {
            return Err(serde::de::Error::custom(format!(
                "dim {} but {} rows",
                raw.dim,
                raw.rows.len()
            )));
        }
        CholeskyShape::from_rows(&raw.rows).map_err(serde::de::Error::custom)
    }
}

/// Gradient with respect to a shape, restricted to the lower triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeGradient {
    g: DMatrix<f64>,
}

impl ShapeGradient {
    /// Wraps `m` after zeroing its strict upper triangle.
    pub fn masked(mut m: DMatrix<f64>) -> Self {
        mask_lower(&mut m);
        Self { g: m }
    }

    pub fn zeros(d: usize) -> Self {
        Self { g: DMatrix::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.g.norm()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { g: &self.g * c }
    }

    pub fn add_scaled(&mut self, other: &ShapeGradient, c: f64) {
        self.g += &other.g * c;
    }

    /// Frobenius inner product with an arbitrary matrix.
    pub fn dot(&self, m: &DMatrix<f64>) -> f64 {
        self.g.dot(m)
    }

    /// Rescales so the Frobenius norm does not exceed `max_norm`; returns the pre-clip norm.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.frobenius_norm();
        if n > max_norm && n > 0.0 {
            self.g *= max_norm / n;
        }
        n
    }
}

fn mask_lower(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..m.ncols() {
            m[(i, j)] = 0.0;
        }
    }
}

/// Ellipsoidal gauge `||L^{-1} u||_2`.
pub fn gauge(l: &CholeskyShape, u: &[f64]) -> Result<f64> {
    Ok(l.forward_solve(u)?.norm())
}

/// Support function `rho ||L^T w||_2` of `U(L, rho)`.
pub fn support(l: &CholeskyShape, rho: f64, w: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), l.dim());
    let lt = l.matrix();
    let d = l.dim();
    let mut acc = 0.0;
    for j in 0..d {
        let mut s = 0.0;
        for i in j..d {
            s += lt[(i, j)] * w[i];
        }
        acc += s * s;
    }
    rho * acc.sqrt()
}

/// `rho w w^T L / ||L^T w||`, masked to the lower triangle.
pub fn grad_support_l(l: &CholeskyShape, rho: f64, w: &[f64]) -> Result<ShapeGradient> {
    let y = l.transpose_mul(w)?;
    let norm = y.norm();
    if norm <= ZERO_DIRECTION_TOL {
        return Err(Error::ZeroDirection(norm));
    }
    let wv = DVector::from_column_slice(w);
    Ok(ShapeGradient::masked(wv * y.transpose() * (rho / norm)))
}

/// `-L^{-T} v v^T / ||v||` with `v = L^{-1} u`, masked to the lower triangle.
pub fn grad_gauge_l(l: &CholeskyShape, u: &[f64]) -> Result<ShapeGradient> {
    let v = l.forward_solve(u)?;
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroRealization);
    }
    let y = l.transpose_solve(&v)?;
    Ok(ShapeGradient::masked(y * v.transpose() * (-1.0 / norm)))
}

/// Projects an arbitrary matrix onto valid shapes: mask, clamp the diagonal,
/// then optionally rescale to `trace(L L^T) = d`.
pub fn project_shape(m: &DMatrix<f64>, diag_floor: f64, normalize_trace: bool) -> CholeskyShape {
    let d = m.nrows();
    let mut l = m.clone();
    mask_lower(&mut l);
    for i in 0..d {
        l[(i, i)] = l[(i, i)].max(diag_floor);
    }
    if normalize_trace {
        let tr = l.norm_squared();
        l *= (d as f64 / tr).sqrt();
        // Rescaling can push a clamped entry back under the floor when the
        // floor is large relative to the rest; clamp again in that case.
        for i in 0..d {
            if l[(i, i)] < diag_floor {
                l[(i, i)] = diag_floor;
            }
        }
    }
    CholeskyShape { l }
}

/// Cholesky factor of a symmetric PSD matrix, retrying with diagonal jitter.
pub fn cholesky_factor(sigma: &DMatrix<f64>) -> Result<CholeskyShape> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::Dimension("covariance must be square and non-empty".into()));
    }
    let d = sigma.nrows();
    let jitter = 1e-8 * sigma.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    let mut work = sigma.clone();
    let mut last = Error::NotPsd { pivot: 0, value: f64::NAN };
    for attempt in 0..=3 {
        if attempt > 0 {
            for i in 0..d {
                work[(i, i)] += jitter;
            }
        }
        match plain_cholesky(&work) {
            Ok(l) => return CholeskyShape::new(l),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn plain_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let mut l = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || diag.sqrt() < DEFAULT_DIAG_FLOOR {
            return Err(Error::NotPsd { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}
