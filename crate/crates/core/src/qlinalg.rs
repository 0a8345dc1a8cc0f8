//! Dense complex linear algebra for the 2-, 4- and 16-dimensional objects
//! used by the simulator.
//!
//! Storage is row-major `Vec<Complex64>`. Nothing here is tuned for large
//! dimensions; the composite qubit-defect space is 4-dimensional and its
//! superoperators are 16x16.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {got}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("operation requires a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("incompatible dimensions: {left:?} and {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("state vector norm {norm} differs from 1")]
    NotNormalized { norm: f64 },
}

/// Dense complex matrix in row-major order.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(LinalgError::ShapeMismatch {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Real-valued convenience constructor, panics on shape mismatch.
    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let data = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), m, "ragged rows");
                r.iter().map(|&x| C64::new(x, 0.0))
            })
            .collect();
        Self::from_vec(n, m, data).expect("finite real entries")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn diag(entries: &[C64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &z) in entries.iter().enumerate() {
            m[(i, i)] = z;
        }
        m
    }

    pub fn outer(a: &StateVector, b: &StateVector) -> Self {
        let mut m = Self::zeros(a.dim(), b.dim());
        for i in 0..a.dim() {
            for j in 0..b.dim() {
                m[(i, j)] = a.amplitudes()[i] * b.amplitudes()[j].conj();
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    fn require_square(&self) -> Result<usize, LinalgError> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Conjugate transpose.
    pub fn dagger(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)].conj();
            }
        }
        t
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest entry modulus.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Maximum absolute row sum (induced infinity norm).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute column sum (induced 1-norm).
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                left: (self.rows, self.cols),
                right: (rhs.rows, rhs.cols),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, v: &[C64]) -> Result<Vec<C64>, LinalgError> {
        if self.cols != v.len() {
            return Err(LinalgError::DimensionMismatch {
                left: (self.rows, self.cols),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// `[self, rhs] = self·rhs − rhs·self`
    pub fn commutator(&self, rhs: &Self) -> Result<Self, LinalgError> {
        Ok(&self.matmul(rhs)? - &rhs.matmul(self)?)
    }

    /// `{self, rhs} = self·rhs + rhs·self`
    pub fn anticommutator(&self, rhs: &Self) -> Result<Self, LinalgError> {
        Ok(&self.matmul(rhs)? + &rhs.matmul(self)?)
    }

    pub fn try_add(&self, rhs: &Self) -> Result<Self, LinalgError> {
        self.same_shape(rhs)?;
        Ok(self.zip_with(rhs, |a, b| a + b))
    }

    pub fn try_sub(&self, rhs: &Self) -> Result<Self, LinalgError> {
        self.same_shape(rhs)?;
        Ok(self.zip_with(rhs, |a, b| a - b))
    }

    fn same_shape(&self, rhs: &Self) -> Result<(), LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimensionMismatch {
                left: (self.rows, self.cols),
                right: (rhs.rows, rhs.cols),
            });
        }
        Ok(())
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Max-norm distance from Hermiticity, `max |a_ij − conj(a_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                err = err.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        err
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// The operator impls panic on shape mismatch; use the `try_*` methods where
// shapes come from user input.
impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.try_add(rhs).expect("matrix add shape")
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.try_sub(rhs).expect("matrix sub shape")
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs).expect("matrix mul shape")
    }
}

impl Neg for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn neg(self) -> ComplexMatrix {
        self.scale_real(-1.0)
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                let z = self[(i, j)];
                write!(f, "{:+.6e}{:+.6e}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Normalized pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: Vec<C64>,
}

impl StateVector {
    pub const NORM_TOL: f64 = 1e-12;

    pub fn new(amplitudes: Vec<C64>) -> Result<Self, LinalgError> {
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > Self::NORM_TOL {
            return Err(LinalgError::NotNormalized { norm });
        }
        Ok(Self { amplitudes })
    }

    /// Normalizes the given amplitudes.
    pub fn normalized(amplitudes: Vec<C64>) -> Result<Self, LinalgError> {
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(LinalgError::NotNormalized { norm });
        }
        Ok(Self {
            amplitudes: amplitudes.into_iter().map(|z| z / norm).collect(),
        })
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut amplitudes = vec![ZERO; dim];
        amplitudes[index] = ONE;
        Self { amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn kron(&self, other: &Self) -> Self {
        let amplitudes = self
            .amplitudes
            .iter()
            .flat_map(|&a| other.amplitudes.iter().map(move |&b| a * b))
            .collect();
        Self { amplitudes }
    }

    pub fn projector(&self) -> ComplexMatrix {
        ComplexMatrix::outer(self, self)
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = ComplexMatrix::zeros(rows, cols);
    for ai in 0..a.rows {
        for aj in 0..a.cols {
            let s = a[(ai, aj)];
            if s == ZERO {
                continue;
            }
            for bi in 0..b.rows {
                for bj in 0..b.cols {
                    out[(ai * b.rows + bi, aj * b.cols + bj)] = s * b[(bi, bj)];
                }
            }
        }
    }
    out
}

/// `(a + a†) / 2`
pub fn hermitize(a: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    let n = a.require_square()?;
    let mut out = a.clone();
    hermitize_in_place(&mut out.data, n);
    Ok(out)
}

/// Symmetrizes a row-major `n x n` buffer in place.
pub(crate) fn hermitize_in_place(data: &mut [C64], n: usize) {
    for i in 0..n {
        let d = &mut data[i * n + i];
        *d = C64::new(d.re, 0.0);
        for j in (i + 1)..n {
            let avg = (data[i * n + j] + data[j * n + i].conj()) * 0.5;
            data[i * n + j] = avg;
            data[j * n + i] = avg.conj();
        }
    }
}

// Degree-13 Padé coefficients and theta_13 from Higham (2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring around a fixed degree-13 Padé
/// approximant.
pub fn expm(a: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    let n = a.require_square()?;
    if n == 0 {
        return Ok(a.clone());
    }
    let norm = a.norm_one();
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a.scale_real(0.5f64.powi(squarings));

    let id = ComplexMatrix::identity(n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let lin = |c6: f64, c4: f64, c2: f64, c0: f64| -> ComplexMatrix {
        let mut m = a6.scale_real(c6);
        m = &m + &a4.scale_real(c4);
        m = &m + &a2.scale_real(c2);
        &m + &id.scale_real(c0)
    };
    let hi_u = &a6 * &(&(&a6.scale_real(b[13]) + &a4.scale_real(b[11])) + &a2.scale_real(b[9]));
    let u = &scaled * &(&hi_u + &lin(b[7], b[5], b[3], b[1]));
    let hi_v = &a6 * &(&(&a6.scale_real(b[12]) + &a4.scale_real(b[10])) + &a2.scale_real(b[8]));
    let v = &hi_v + &lin(b[6], b[4], b[2], b[0]);

    let p = &v + &u;
    let q = &v - &u;
    let mut r = solve(&q, &p)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    let n = a.require_square()?;
    if b.rows != n {
        return Err(LinalgError::DimensionMismatch {
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let m = b.cols;
    let mut lu = a.data.clone();
    let mut x = b.data.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| lu[p * n + col].norm().total_cmp(&lu[q * n + col].norm()))
            .unwrap_or(col);
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            for j in 0..m {
                x.swap(col * m + j, pivot * m + j);
            }
        }
        let d = lu[col * n + col];
        if d == ZERO {
            return Err(LinalgError::NonFinite { row: col, col });
        }
        for r in (col + 1)..n {
            let f = lu[r * n + col] / d;
            if f == ZERO {
                continue;
            }
            for j in col..n {
                let v = lu[col * n + j];
                lu[r * n + j] -= f * v;
            }
            for j in 0..m {
                let v = x[col * m + j];
                x[r * m + j] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[col * n + col];
        for j in 0..m {
            let mut acc = x[col * m + j];
            for k in (col + 1)..n {
                acc -= lu[col * n + k] * x[k * m + j];
            }
            x[col * m + j] = acc / d;
        }
    }
    ComplexMatrix::from_vec(n, m, x)
}

/// Eigenvalues of a Hermitian matrix, ascending.
///
/// The n x n Hermitian `A = X + iY` is embedded as the real symmetric
/// `[[X, −Y], [Y, X]]`, whose spectrum is that of `A` with every eigenvalue
/// doubled; cyclic Jacobi rotations diagonalize the embedding.
pub fn eigvalsh(a: &ComplexMatrix) -> Result<Vec<f64>, LinalgError> {
    let n = a.require_square()?;
    let h = hermitize(a)?;
    let m = 2 * n;
    let mut s = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            let z = h[(i, j)];
            s[i * m + j] = z.re;
            s[(i + n) * m + (j + n)] = z.re;
            s[i * m + (j + n)] = -z.im;
            s[(i + n) * m + j] = z.im;
        }
    }
    jacobi_eigenvalues(&mut s, m);
    let mut vals: Vec<f64> = (0..m).map(|i| s[i * m + i]).collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect())
}

fn jacobi_eigenvalues(s: &mut [f64], m: usize) {
    let scale: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i * m + j] * s[i * m + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            return;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = s[p * m + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = s[p * m + p];
                let aqq = s[q * m + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let akp = s[k * m + p];
                    let akq = s[k * m + q];
                    s[k * m + p] = c * akp - sn * akq;
                    s[k * m + q] = sn * akp + c * akq;
                }
                for k in 0..m {
                    let apk = s[p * m + k];
                    let aqk = s[q * m + k];
                    s[p * m + k] = c * apk - sn * aqk;
                    s[q * m + k] = sn * apk + c * aqk;
                }
            }
        }
    }
}

/// Single-spin operators in the basis {|0>, |1>} with σ_z|0> = +|0>.
pub mod pauli {
    use super::{ComplexMatrix, C64, ONE, ZERO};

    pub fn identity() -> ComplexMatrix {
        ComplexMatrix::identity(2)
    }

    pub fn x() -> ComplexMatrix {
        ComplexMatrix::from_vec(2, 2, vec![ZERO, ONE, ONE, ZERO]).unwrap()
    }

    pub fn y() -> ComplexMatrix {
        ComplexMatrix::from_vec(2, 2, vec![ZERO, C64::new(0.0, -1.0), C64::new(0.0, 1.0), ZERO])
            .unwrap()
    }

    pub fn z() -> ComplexMatrix {
        ComplexMatrix::diag(&[ONE, -ONE])
    }

    /// `σ_+ = (σ_x + iσ_y)/2 = |0><1|`
    pub fn raising() -> ComplexMatrix {
        ComplexMatrix::from_vec(2, 2, vec![ZERO, ONE, ZERO, ZERO]).unwrap()
    }

    /// `σ_− = (σ_x − iσ_y)/2 = |1><0|`, taking the excited |0> to |1>.
    pub fn lowering() -> ComplexMatrix {
        ComplexMatrix::from_vec(2, 2, vec![ZERO, ZERO, ONE, ZERO]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(n: usize, seed: u64, scale: f64) -> ComplexMatrix {
        // small LCG keeps the test free of extra dependencies
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let data = (0..n * n).map(|_| c(next(), next())).collect();
        let m = ComplexMatrix::from_vec(n, n, data).unwrap();
        let norm = m.norm_one();
        m.scale_real(scale / norm)
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(matches!(
            ComplexMatrix::from_vec(2, 2, vec![ONE; 3]),
            Err(LinalgError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            ComplexMatrix::from_vec(1, 2, vec![ONE, c(f64::NAN, 0.0)]),
            Err(LinalgError::NonFinite { row: 0, col: 1 })
        ));
        assert!(StateVector::new(vec![ONE, ONE]).is_err());
    }

    #[test]
    fn kron_identity_and_sigma_z() {
        let i2 = pauli::identity();
        assert_eq!(kron(&i2, &i2), ComplexMatrix::identity(4));
        let zi = kron(&pauli::z(), &i2);
        assert_eq!(zi, ComplexMatrix::diag(&[ONE, ONE, -ONE, -ONE]));
    }

    #[test]
    fn kron_flip_flop_moves_excitation() {
        // |1>⊗|0> has index 2·1 + 0 = 2; |0>⊗|1> has index 1
        let op = kron(&pauli::raising(), &pauli::lowering());
        let v = op.apply(StateVector::basis(4, 2).amplitudes()).unwrap();
        assert_eq!(v, StateVector::basis(4, 1).amplitudes());

        // brute-force index expansion of the same product
        let (a, b) = (pauli::raising(), pauli::lowering());
        let input = StateVector::basis(2, 1).kron(&StateVector::basis(2, 0));
        let mut out = vec![ZERO; 4];
        for i1 in 0..2 {
            for i2 in 0..2 {
                for j1 in 0..2 {
                    for j2 in 0..2 {
                        out[2 * i1 + i2] += a[(i1, j1)] * b[(i2, j2)] * input.amplitudes()[2 * j1 + j2];
                    }
                }
            }
        }
        assert_eq!(out, v);
    }

    #[test]
    fn expm_zero_is_identity() {
        let e = expm(&ComplexMatrix::zeros(4, 4)).unwrap();
        assert_eq!(e, ComplexMatrix::identity(4));
    }

    #[test]
    fn expm_pauli_euler_identity() {
        let a = pauli::x().scale(c(0.0, -std::f64::consts::FRAC_PI_2));
        let e = expm(&a).unwrap();
        let expected = pauli::x().scale(c(0.0, -1.0));
        assert!(e.max_abs_diff(&expected) < 1e-14, "{e:?}");
    }

    #[test]
    fn expm_inverse_product() {
        for seed in 0..20 {
            let a = random_matrix(4, seed, 1.0);
            let prod = &expm(&a).unwrap() * &expm(&(-&a)).unwrap();
            assert!(prod.max_abs_diff(&ComplexMatrix::identity(4)) < 1e-10);
        }
    }

    #[test]
    fn expm_large_norm_against_diagonal() {
        let d = [c(-9.0, 3.0), c(2.5, -7.0), c(0.1, 0.0), c(-0.5, 9.5)];
        let e = expm(&ComplexMatrix::diag(&d)).unwrap();
        for (i, z) in d.iter().enumerate() {
            let exact = z.exp();
            assert!((e[(i, i)] - exact).norm() <= 1e-10 * exact.norm());
        }
        assert!(expm(&ComplexMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn expm_commuting_diagonals_add() {
        let a = ComplexMatrix::diag(&[c(0.3, 1.0), c(-2.0, 0.5), c(1.0, -3.0)]);
        let b = ComplexMatrix::diag(&[c(-1.0, 2.0), c(0.7, 0.0), c(2.0, 4.0)]);
        let lhs = expm(&(&a + &b)).unwrap();
        let rhs = &expm(&a).unwrap() * &expm(&b).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * rhs.max_norm());
    }

    #[test]
    fn hermitize_cases() {
        let h = kron(&pauli::x(), &pauli::y());
        assert_eq!(hermitize(&h).unwrap(), h);
        let anti = pauli::z().scale(I);
        assert_eq!(hermitize(&anti).unwrap(), ComplexMatrix::zeros(2, 2));
        assert!(hermitize(&ComplexMatrix::zeros(2, 3)).is_err());

        let eps = 1e-3;
        let mut p = h.clone();
        p[(0, 3)] += c(eps, -eps);
        let fixed = hermitize(&p).unwrap();
        assert!(fixed.max_abs_diff(&p) <= eps * 2f64.sqrt() / 2.0 + 1e-15);
        assert!(fixed.is_hermitian(0.0));
    }

    #[test]
    fn eigvalsh_known_spectra() {
        let vals = eigvalsh(&pauli::y()).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let m = ComplexMatrix::from_vec(
            2,
            2,
            vec![c(2.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(2.0, 0.0)],
        )
        .unwrap();
        let vals = eigvalsh(&m).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn solve_recovers_product() {
        let a = &random_matrix(4, 7, 3.0) + &ComplexMatrix::identity(4);
        let x = random_matrix(4, 8, 1.0);
        let b = &a * &x;
        assert!(solve(&a, &b).unwrap().max_abs_diff(&x) < 1e-12);
    }

    fn pauli_by_index(k: u8) -> ComplexMatrix {
        match k % 4 {
            0 => pauli::identity(),
            1 => pauli::x(),
            2 => pauli::y(),
            _ => pauli::z(),
        }
    }

    proptest! {
        #[test]
        fn kron_is_associative_on_paulis(a in 0u8..4, b in 0u8..4, d in 0u8..4) {
            let (a, b, d) = (pauli_by_index(a), pauli_by_index(b), pauli_by_index(d));
            prop_assert_eq!(kron(&kron(&a, &b), &d), kron(&a, &kron(&b, &d)));
        }

        #[test]
        fn kron_trace_factorizes(s1 in 0u64..1000, s2 in 0u64..1000, n in 1usize..4, m in 1usize..4) {
            let a = random_matrix(n, s1, 2.0);
            let b = random_matrix(m, s2 + 5000, 2.0);
            let lhs = kron(&a, &b).trace();
            let rhs = a.trace() * b.trace();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn eigvalsh_sum_matches_trace(seed in 0u64..500) {
            let h = hermitize(&random_matrix(4, seed, 5.0)).unwrap();
            let vals = eigvalsh(&h).unwrap();
            prop_assert!((vals.iter().sum::<f64>() - h.trace().re).abs() < 1e-12);
        }
    }
}
