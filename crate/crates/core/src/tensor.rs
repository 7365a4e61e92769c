//! Dense numerical foundation: row-major `Matrix`, `Vector`, the Gaussian
//! state that flows through an augmented forward pass, and the small
//! factorization/solve kernels everything else is built on.
//!
//! Everything is 64-bit. Caches store 32-bit on disk but are widened on load;
//! the GP solves are too ill-conditioned for f32 arithmetic.

use crate::error::{GapaError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries and
    /// length mismatches.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GapaError::DimensionMismatch {
                context: "Matrix::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(GapaError::NonFinite {
                context: "Matrix::from_vec",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector::from_slice_unchecked(self.row(r))
    }

    /// Element-wise square, `W ⊙ W`. Exact for all finite inputs.
    pub fn squared(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * v).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Dense product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(GapaError::DimensionMismatch {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(GapaError::NonFinite {
                context: "Vector::from_vec",
            });
        }
        Ok(Self { data })
    }

    pub(crate) fn from_slice_unchecked(data: &[f64]) -> Self {
        Self {
            data: data.to_vec(),
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Maps every entry through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(GapaError::DimensionMismatch {
                context: "dot",
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(GapaError::DimensionMismatch {
                context: "add",
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist2(&self, other: &Vector) -> f64 {
        dist2(&self.data, &other.data)
    }
}

/// Squared Euclidean distance between two slices of equal length.
#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Matrix-vector product `W x`.
pub fn matvec(w: &Matrix, x: &Vector) -> Result<Vector> {
    if w.cols() != x.len() {
        return Err(GapaError::DimensionMismatch {
            context: "matvec",
            expected: w.cols(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; w.rows()];
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x.data()) {
            acc += a * b;
        }
        *o = acc;
    }
    Ok(Vector { data: out })
}

/// Element-wise product `a ⊙ b`.
pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(GapaError::DimensionMismatch {
            context: "hadamard",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(Vector {
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| x * y)
            .collect(),
    })
}

/// Mean vector plus per-coordinate variance: the state of one hidden layer
/// in an augmented forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVector {
    mean: Vector,
    var: Vector,
}

impl GaussianVector {
    /// Rejects mismatched lengths and any negative variance entry.
    pub fn new(mean: Vector, var: Vector) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(GapaError::DimensionMismatch {
                context: "GaussianVector::new",
                expected: mean.len(),
                got: var.len(),
            });
        }
        if let Some((i, &v)) = var.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(GapaError::NegativeVariance { index: i, value: v });
        }
        Ok(Self { mean, var })
    }

    /// A point value: variance zero everywhere.
    pub fn certain(mean: Vector) -> Self {
        let var = Vector::zeros(mean.len());
        Self { mean, var }
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn var(&self) -> &Vector {
        &self.var
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn into_parts(self) -> (Vector, Vector) {
        (self.mean, self.var)
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first; kernel evaluation
/// round-off routinely breaks exact symmetry.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(GapaError::DimensionMismatch {
            context: "cholesky",
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let aij = 0.5 * (a.get(i, j) + a.get(j, i));
            let mut sum = aij;
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(GapaError::NotPositiveDefinite { pivot_index: i });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L` (in place on a copy of `b`).
fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut acc = y[i];
        for k in 0..i {
            acc -= l.get(i, k) * y[k];
        }
        y[i] = acc / l.get(i, i);
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
fn solve_upper_transposed(l: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        let mut acc = x[i];
        for k in i + 1..n {
            acc -= l.get(k, i) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    x
}

/// Solves `A X = B` for symmetric positive definite `A` via Cholesky.
///
/// `A` is symmetrized before factorization. Fails with
/// [`GapaError::NotPositiveDefinite`] when a pivot is not strictly positive,
/// which signals that the caller's jitter is too small.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(GapaError::DimensionMismatch {
            context: "cholesky_solve",
            expected: a.rows(),
            got: b.rows(),
        });
    }
    let l = cholesky(a)?;
    let n = a.rows();
    let mut out = Matrix::zeros(n, b.cols());
    let mut col = vec![0.0; n];
    for c in 0..b.cols() {
        for r in 0..n {
            col[r] = b.get(r, c);
        }
        let y = solve_lower(&l, &col);
        let x = solve_upper_transposed(&l, &y);
        for r in 0..n {
            out.set(r, c, x[r]);
        }
    }
    Ok(out)
}

/// Solves `A x = b` for SPD `A` and a single right-hand side.
pub fn cholesky_solve_vec(a: &Matrix, b: &Vector) -> Result<Vector> {
    if a.rows() != b.len() {
        return Err(GapaError::DimensionMismatch {
            context: "cholesky_solve_vec",
            expected: a.rows(),
            got: b.len(),
        });
    }
    let l = cholesky(a)?;
    let y = solve_lower(&l, b.data());
    let x = solve_upper_transposed(&l, &y);
    Ok(Vector { data: x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent dense-solver oracle: Gaussian elimination with partial
    /// pivoting. Shares no code with the Cholesky path.
    fn gauss_solve(a: &Matrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = a.row(r).to_vec();
                row.push(b[r]);
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for r in col + 1..n {
                let f = aug[r][col] / p;
                for c in col..=n {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = aug[r][n];
            for c in r + 1..n {
                acc -= aug[r][c] * x[c];
            }
            x[r] = acc / aug[r][r];
        }
        x
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> Matrix {
        // G Gᵀ + n·I is comfortably positive definite.
        let g: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Matrix::from_vec(n, n, g).unwrap();
        let mut a = g.matmul(&g.transpose()).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + n as f64);
        }
        a
    }

    #[test]
    fn cholesky_solve_identity_returns_rhs() {
        let a = Matrix::identity(3);
        let b = Matrix::from_vec(3, 1, vec![1.5, -2.0, 7.25]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        assert_eq!(x.data(), b.data());
    }

    #[test]
    fn cholesky_solve_scalar_diagonal() {
        let a = Matrix::from_vec(1, 1, vec![4.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![8.0]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        assert_eq!(x.get(0, 0), 2.0);
    }

    #[test]
    fn cholesky_solve_matches_gaussian_elimination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_spd(5, &mut rng);
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let bm = Matrix::from_vec(5, 1, b.clone()).unwrap();
            let x = cholesky_solve(&a, &bm).unwrap();
            let oracle = gauss_solve(&a, &b);
            for i in 0..5 {
                assert!((x.get(i, 0) - oracle[i]).abs() < 1e-9);
            }
            // Residual check: ‖A·X − B‖_∞ / ‖B‖_∞ ≤ 1e-8.
            let mut resid: f64 = 0.0;
            let mut bmax: f64 = 0.0;
            for i in 0..5 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += a.get(i, j) * x.get(j, 0);
                }
                resid = resid.max((acc - b[i]).abs());
                bmax = bmax.max(b[i].abs());
            }
            assert!(resid / bmax <= 1e-8);
        }
    }

    #[test]
    fn cholesky_inverse_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[2usize, 8, 33, 64] {
            let a = random_spd(n, &mut rng);
            let inv = cholesky_solve(&a, &Matrix::identity(n)).unwrap();
            let prod = a.matmul(&inv).unwrap();
            let mut err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    err = err.max((prod.get(i, j) - want).abs());
                }
            }
            assert!(err <= 1e-8, "n={n}: inverse residual {err}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match cholesky(&a) {
            Err(GapaError::NotPositiveDefinite { pivot_index }) => assert_eq!(pivot_index, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn squared_eliminates_signs() {
        let w = Matrix::from_vec(1, 2, vec![-2.0, 3.0]).unwrap();
        assert_eq!(w.squared().data(), &[4.0, 9.0]);
    }

    #[test]
    fn hadamard_basic() {
        let a = Vector::from_vec(vec![1.0, 2.0]).unwrap();
        let b = Vector::from_vec(vec![3.0, 4.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn matvec_identity() {
        let x = Vector::from_vec(vec![5.0, 7.0]).unwrap();
        assert_eq!(matvec(&Matrix::identity(2), &x).unwrap().data(), x.data());
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let w = Matrix::zeros(2, 3);
        let x = Vector::zeros(2);
        assert!(matches!(
            matvec(&w, &x),
            Err(GapaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gaussian_vector_rejects_negative_variance() {
        let mean = Vector::zeros(2);
        let var = Vector::from_vec(vec![0.5, -1e-12]).unwrap();
        assert!(matches!(
            GaussianVector::new(mean, var),
            Err(GapaError::NegativeVariance { index: 1, .. })
        ));
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Vector::from_vec(vec![f64::INFINITY]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn squared_entries_are_exact_squares(entries in proptest::collection::vec(-1e6f64..1e6, 1..24)) {
                let cols = entries.len();
                let m = Matrix::from_vec(1, cols, entries.clone()).unwrap();
                let sq = m.squared();
                for (s, e) in sq.data().iter().zip(&entries) {
                    prop_assert_eq!(*s, e * e);
                }
            }

            #[test]
            fn dist2_is_symmetric(a in proptest::collection::vec(-100f64..100.0, 4), b in proptest::collection::vec(-100f64..100.0, 4)) {
                prop_assert_eq!(dist2(&a, &b), dist2(&b, &a));
            }

            #[test]
            fn gaussian_vector_rejects_any_negative_entry(vars in proptest::collection::vec(-1.0f64..1.0, 1..12)) {
                let mean = Vector::zeros(vars.len());
                let has_negative = vars.iter().any(|v| *v < 0.0);
                let out = GaussianVector::new(mean, Vector::from_vec(vars).unwrap());
                prop_assert_eq!(out.is_err(), has_negative);
            }
        }
    }
}
