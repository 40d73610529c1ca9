//! Minimal dense linear algebra: row-major `f64` matrices, products, column
//! norms, singular values and seeded Gaussian sampling.
//!
//! # Random numbers
//!
//! Every random draw in the crate goes through [`DetRng`], which is ChaCha8
//! (`rand_chacha::ChaCha8Rng`) seeded with `seed_from_u64`. Uniform `f64`
//! values are `rng.random::<f64>()` (53 high bits of one `u64`, scaled by
//! 2⁻⁵³). Standard normals use the cosine branch of Box–Muller:
//!
//! ```text
//! u1 = 1 - uniform()          // (0, 1]
//! u2 = uniform()
//! z  = sqrt(-2 ln u1) * cos(2π u2)
//! ```
//!
//! Independent sub-streams are derived with [`derive_seed`], a SplitMix64
//! finalizer applied to `seed ^ (stream * golden_gamma)`. Reimplementing these
//! three pieces reproduces every trace the crate produces.

use std::cell::Cell;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The deterministic generator used for all sampling.
pub type DetRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 mix of `(seed, stream)`; used to give each consumer its own stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One standard normal draw (Box–Muller, cosine branch).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

thread_local! {
    static MATMUL_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`matmul`] calls made on the current thread so far.
///
/// Used as an operation counter by the merge benchmark and structural tests.
pub fn matmul_calls() -> u64 {
    MATMUL_CALLS.with(Cell::get)
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dims must be >= 1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("data length {} != {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// Panics when either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be >= 1");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    fn check_same(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_map(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same(other, what)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Adds `bias[c]` to every entry of column `c`.
    pub fn add_row_broadcast(&mut self, bias: &Vector) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!("bias len {} vs {} cols", bias.len(), self.cols)));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias.as_slice()) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Multiplies row `r` by `s[r]`.
    pub fn scale_rows(&self, s: &[f64]) -> Matrix {
        let mut out = self.clone();
        for (r, &sr) in s.iter().enumerate().take(self.rows) {
            for v in out.row_mut(r) {
                *v *= sr;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product ⟨self, other⟩.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same(other, "inner")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean norm of every column.
pub fn column_norms(m: &Matrix) -> Vector {
    let mut acc = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v * v;
        }
    }
    Vector(acc.into_iter().map(f64::sqrt).collect())
}

/// Euclidean norm of every row; `row_norms(Mᵀ) == column_norms(M)`.
pub fn row_norms(m: &Matrix) -> Vector {
    Vector((0..m.rows).map(|r| norm2(m.row(r))).collect())
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("matmul: {}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    MATMUL_CALLS.with(|c| c.set(c.get() + 1));
    let n = b.cols;
    let mut out = Matrix::zeros(a.rows, n);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!("matmul_tn: ({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    MATMUL_CALLS.with(|c| c.set(c.get() + 1));
    let n = b.cols;
    let mut out = Matrix::zeros(a.cols, n);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, bkj) in out.data[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!("matmul_nt: {}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols)));
    }
    MATMUL_CALLS.with(|c| c.set(c.get() + 1));
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// Singular values in descending order, via one-sided (Hestenes) Jacobi.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Orthogonalise the columns of the taller orientation.
    let work = if m.cols > m.rows { m.transpose() } else { m.clone() };
    let (rows, cols) = work.shape();
    let mut colv: Vec<Vec<f64>> = (0..cols).map(|c| work.column(c)).collect();

    const MAX_SWEEPS: usize = 80;
    let tol = f64::EPSILON * rows as f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&colv[p], &colv[p]);
                let beta = dot(&colv[q], &colv[q]);
                let gamma = dot(&colv[p], &colv[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = colv.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for i in 0..rows {
                    let xp = cp[i];
                    let xq = cq[i];
                    cp[i] = c * xp - s * xq;
                    cq[i] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = colv.iter().map(|c| norm2(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values greater than `tol × σ_max`; zero for the zero matrix.
pub fn numerical_rank(m: &Matrix, tol: f64) -> usize {
    let sv = singular_values(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

/// Fill a matrix with i.i.d. `N(0, std²)` draws from `rng`, row-major order.
pub fn gaussian_from<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * standard_normal(rng)).collect();
    Matrix { rows, cols, data }
}

/// i.i.d. `N(0, std²)` matrix from a fresh generator seeded with `seed`.
pub fn seeded_gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    gaussian_from(&mut rng_from_seed(seed), rows, cols, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Singular values from nalgebra, as an independent oracle.
    fn oracle_rank(x: &Matrix, tol: f64) -> usize {
        let na = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let sv = na.singular_values();
        let smax = sv.max();
        if smax == 0.0 {
            return 0;
        }
        sv.iter().filter(|&&s| s > tol * smax).count()
    }

    #[test]
    fn column_norms_examples() {
        assert_eq!(column_norms(&m(&[&[3.0, 0.0], &[4.0, 0.0]])).as_slice(), &[5.0, 0.0]);
        assert_eq!(column_norms(&Matrix::identity(2)).as_slice(), &[1.0, 1.0]);
        let n = column_norms(&m(&[&[1.0, 2.0], &[2.0, 1.0], &[2.0, 2.0]]));
        assert_eq!(n.as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_examples() {
        let x = seeded_gaussian(3, 4, 1.0, 7);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[0.0, 1.0], &[0.0, 0.0]]));
        let z = matmul(&Matrix::zeros(2, 3), &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn transposed_products_agree() {
        let a = seeded_gaussian(5, 3, 1.0, 1);
        let b = seeded_gaussian(5, 4, 1.0, 2);
        let c = seeded_gaussian(6, 3, 1.0, 3);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = matmul(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = matmul(&a, &c.transpose()).unwrap();
        for (x, y) in tn.data().iter().zip(tn_ref.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
        for (x, y) in nt.data().iter().zip(nt_ref.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn matmul_counter_increments() {
        let before = matmul_calls();
        let _ = matmul(&Matrix::identity(2), &Matrix::identity(2)).unwrap();
        assert_eq!(matmul_calls(), before + 1);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::zeros(4, 4), 1e-8), 0);
        assert_eq!(numerical_rank(&Matrix::identity(4), 1e-8), 4);
        let u = m(&[&[1.0], &[2.0], &[-1.0], &[0.5]]);
        let v = m(&[&[3.0, -1.0, 0.25, 2.0]]);
        let outer = matmul(&u, &v).unwrap();
        assert_eq!(oracle_rank(&outer, 1e-8), 1);
        assert_eq!(numerical_rank(&outer, 1e-8), 1);
    }

    #[test]
    fn singular_values_match_oracle() {
        for seed in 0..10 {
            let x = seeded_gaussian(7, 5, 1.0, seed);
            let ours = singular_values(&x);
            let na = nalgebra::DMatrix::from_row_slice(7, 5, x.data());
            let mut theirs: Vec<f64> = na.singular_values().iter().copied().collect();
            theirs.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in ours.iter().zip(&theirs) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_examples() {
        assert!(seeded_gaussian(3, 3, 0.0, 1).data().iter().all(|&v| v == 0.0));
        assert_eq!(seeded_gaussian(4, 5, 1.0, 99), seeded_gaussian(4, 5, 1.0, 99));
        assert_ne!(seeded_gaussian(4, 5, 1.0, 99), seeded_gaussian(4, 5, 1.0, 100));

        let g = seeded_gaussian(100_000, 1, 0.1, 2024);
        let n = g.data().len() as f64;
        let mean = g.data().iter().sum::<f64>() / n;
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() / 0.01 < 0.05, "variance {var}");
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn column_norms_sum_to_frobenius(x in small_matrix(6, 4)) {
            let s: f64 = column_norms(&x).as_slice().iter().map(|v| v * v).sum();
            let f = x.frobenius_norm().powi(2);
            prop_assert!((s - f).abs() <= 1e-12 * f.max(1e-300));
        }

        #[test]
        fn matmul_associative(a in small_matrix(3, 4), b in small_matrix(4, 5), c in small_matrix(5, 2)) {
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = matmul(&matmul(&a.map(f64::abs), &b.map(f64::abs)).unwrap(), &c.map(f64::abs)).unwrap();
            for ((x, y), s) in l.data().iter().zip(r.data()).zip(scale.data()) {
                prop_assert!((x - y).abs() <= 1e-10 * s.max(1e-300));
            }
        }

        #[test]
        fn rank_of_product_bounded(seed in 0u64..10_000, k1 in 1usize..4, k2 in 1usize..4) {
            let a = matmul(&seeded_gaussian(6, k1, 1.0, seed), &seeded_gaussian(k1, 6, 1.0, seed + 1)).unwrap();
            let b = matmul(&seeded_gaussian(6, k2, 1.0, seed + 2), &seeded_gaussian(k2, 6, 1.0, seed + 3)).unwrap();
            let ra = numerical_rank(&a, 1e-8);
            let rb = numerical_rank(&b, 1e-8);
            let rab = numerical_rank(&matmul(&a, &b).unwrap(), 1e-8);
            prop_assert_eq!(ra, k1);
            prop_assert_eq!(rb, k2);
            prop_assert!(rab <= ra.min(rb));
        }
    }
}
