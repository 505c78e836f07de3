//! Dense linear algebra, seedable randomness, and a finite-difference
//! gradient checker shared by every other module.
//!
//! All numeric work is in `f64`. Reductions accumulate left to right so a
//! fixed seed reproduces results bitwise within one build.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Result, SfkError};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SfkError::shape(
                "Mat::from_vec",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Test/CLI convenience: build from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(SfkError::shape(
                    "Mat::from_rows",
                    format!("row {} has {} entries, expected {}", i, row.len(), c),
                ));
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other (shapes must match).
    pub fn axpy(&mut self, s: f64, other: &Mat) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SfkError::shape(
                "Mat::axpy",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn check_mul(&self, b: &Mat, ctx: &'static str) -> Result<()> {
        if self.cols != b.rows {
            return Err(SfkError::shape(
                ctx,
                format!("{}x{} . {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        Ok(())
    }

    /// `self * b`. Deterministic within one build; each output entry is the
    /// IEEE-754 product-sum over the shared dimension.
    pub fn matmul(&self, b: &Mat) -> Result<Mat> {
        self.check_mul(b, "matmul")?;
        let mut out = Mat::zeros(self.rows, b.cols);
        if self.rows == 0 || self.cols == 0 || b.cols == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                b.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                b.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `self^T * b` without materializing the transpose.
    pub fn matmul_tn(&self, b: &Mat) -> Result<Mat> {
        if self.rows != b.rows {
            return Err(SfkError::shape(
                "matmul_tn",
                format!("{}x{}^T . {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Mat::zeros(self.cols, b.cols);
        if self.rows == 0 || self.cols == 0 || b.cols == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.cols,
                self.rows,
                b.cols,
                1.0,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                b.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `self * b^T` without materializing the transpose.
    pub fn matmul_nt(&self, b: &Mat) -> Result<Mat> {
        if self.cols != b.cols {
            return Err(SfkError::shape(
                "matmul_nt",
                format!("{}x{} . {}x{}^T", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, b.rows);
        if self.rows == 0 || self.cols == 0 || b.rows == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                b.rows,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                b.data.as_ptr(),
                1,
                b.cols as isize,
                0.0,
                out.data.as_mut_ptr(),
                b.rows as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `self * b` with one row of `b` (one input coordinate) excluded from
    /// the accumulation. The excluded coordinate provably cannot influence
    /// the output: its term is never touched, not cancelled.
    pub fn matmul_skip_row(&self, b: &Mat, skip: Option<usize>) -> Result<Mat> {
        self.check_mul(b, "matmul_skip_row")?;
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if skip == Some(k) {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        Ok(out)
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solve `A X = B` by LU with partial pivoting. `A` is n x n, `B` n x m.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(SfkError::shape(
            "solve",
            format!("{}x{} \\ {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut piv = col;
        let mut best = lu.get(col, col).abs();
        for r in col + 1..n {
            let v = lu.get(r, col).abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(SfkError::InvalidArgument(format!(
                "singular or non-finite matrix in solve (pivot column {})",
                col
            )));
        }
        if piv != col {
            for j in 0..n {
                let t = lu.get(col, j);
                lu.set(col, j, lu.get(piv, j));
                lu.set(piv, j, t);
            }
            for j in 0..m {
                let t = x.get(col, j);
                x.set(col, j, x.get(piv, j));
                x.set(piv, j, t);
            }
        }
        let d = lu.get(col, col);
        for r in col + 1..n {
            let f = lu.get(r, col) / d;
            if f != 0.0 {
                for j in col + 1..n {
                    let v = lu.get(r, j) - f * lu.get(col, j);
                    lu.set(r, j, v);
                }
                for j in 0..m {
                    let v = x.get(r, j) - f * x.get(col, j);
                    x.set(r, j, v);
                }
            }
            lu.set(r, col, 0.0);
        }
    }
    for col in (0..n).rev() {
        let d = lu.get(col, col);
        for j in 0..m {
            let mut v = x.get(col, j);
            for k in col + 1..n {
                v -= lu.get(col, k) * x.get(k, j);
            }
            x.set(col, j, v / d);
        }
    }
    Ok(x)
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seedable, platform-independent random stream (ChaCha8 keyed via a
/// splitmix64 expansion of the seed). Single-owner: never shared across
/// workers; derive substreams instead.
#[derive(Debug, Clone)]
pub struct Prng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self::from_derived(seed)
    }

    fn from_derived(derived: u64) -> Self {
        let mut key = [0u8; 32];
        let mut st = derived;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut st).to_le_bytes());
        }
        Prng {
            seed: derived,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by this stream's seed and the given tags.
    /// Depends only on the seed, not on how far this stream has advanced,
    /// so parallel and serial schedules agree.
    pub fn substream(&self, tags: &[u64]) -> Prng {
        let mut s = self.seed ^ 0xA076_1D64_78BD_642F;
        for &t in tags {
            let mut st = s ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            s = splitmix64(&mut st);
        }
        Self::from_derived(s)
    }

    /// One standard normal draw.
    #[inline]
    pub fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `n` i.i.d. N(0,1) draws.
    pub fn gauss_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gauss()).collect()
    }

    pub fn fill_gauss(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.gauss();
        }
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// `k` distinct indices sampled uniformly from [0, n), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {} of {}", k, n);
        // Partial Fisher-Yates on an index array.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.rng.random_range(0..n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn fd_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(SfkError::InvalidArgument(format!("fd_grad step h={} must be > 0", h)));
    }
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SfkError::NonFinite(format!("fd_grad coordinate {}", i)));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

#[cfg(test)]
pub(crate) fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.rows());
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mat(prng: &mut Prng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, prng.gauss_vec(r * c)).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut p = Prng::new(7);
        let m = random_mat(&mut p, 2, 3);
        let i2 = Mat::identity(2);
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut p = Prng::new(11);
        let a = random_mat(&mut p, 5, 4);
        let b = random_mat(&mut p, 4, 3);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn matmul_dimension_mismatch_errors() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_associativity() {
        let mut p = Prng::new(3);
        for _ in 0..5 {
            let a = random_mat(&mut p, 4, 6);
            let b = random_mat(&mut p, 6, 5);
            let c = random_mat(&mut p, 5, 3);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / denom < 1e-9);
            }
        }
    }

    #[test]
    fn transposed_products_match_explicit() {
        let mut p = Prng::new(21);
        let a = random_mat(&mut p, 4, 3);
        let b = random_mat(&mut p, 4, 5);
        let tn = a.matmul_tn(&b).unwrap();
        let explicit = a.transpose().matmul(&b).unwrap();
        for (x, y) in tn.as_slice().iter().zip(explicit.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = random_mat(&mut p, 6, 3);
        let a2 = random_mat(&mut p, 4, 3);
        let nt = a2.matmul_nt(&c).unwrap();
        let explicit = a2.matmul(&c.transpose()).unwrap();
        for (x, y) in nt.as_slice().iter().zip(explicit.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn skip_row_kernel_matches_and_skips() {
        let mut p = Prng::new(5);
        let a = random_mat(&mut p, 6, 4);
        let b = random_mat(&mut p, 4, 3);
        let no_skip = a.matmul_skip_row(&b, None).unwrap();
        let reference = a.matmul(&b).unwrap();
        for (x, y) in no_skip.as_slice().iter().zip(reference.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Skipping row k must equal the product with row k of b zeroed,
        // and must be exactly insensitive to column k of a.
        let skipped = a.matmul_skip_row(&b, Some(2)).unwrap();
        let mut a2 = a.clone();
        for i in 0..a2.rows() {
            a2.set(i, 2, 1e9);
        }
        let skipped2 = a2.matmul_skip_row(&b, Some(2)).unwrap();
        assert_eq!(skipped.as_slice(), skipped2.as_slice());
    }

    #[test]
    fn gauss_same_seed_identical() {
        let mut a = Prng::new(42);
        let mut b = Prng::new(42);
        assert_eq!(a.gauss_vec(32), b.gauss_vec(32));
    }

    #[test]
    fn gauss_distinct_seeds_differ() {
        for (s1, s2) in [(0u64, 1u64), (7, 8), (123, 456)] {
            let a = Prng::new(s1).gauss_vec(16);
            let b = Prng::new(s2).gauss_vec(16);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn gauss_moments() {
        let n = 100_000;
        let mut p = Prng::new(2024);
        let xs = p.gauss_vec(n);
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        assert!(mean.abs() < 3.0 / nf.sqrt(), "mean {}", mean);
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
        assert!((var - 1.0).abs() < 3.0 * (2.0 / nf).sqrt(), "var {}", var);
    }

    #[test]
    fn substream_is_position_independent() {
        let mut a = Prng::new(9);
        let before = a.substream(&[1, 2]).gauss_vec(4);
        let _ = a.gauss_vec(100);
        let after = a.substream(&[1, 2]).gauss_vec(4);
        assert_eq!(before, after);
        assert_ne!(before, a.substream(&[1, 3]).gauss_vec(4));
    }

    #[test]
    fn sample_indices_distinct_and_in_range() {
        let mut p = Prng::new(1);
        let idx = p.sample_indices(50, 20);
        assert_eq!(idx.len(), 20);
        let mut seen = vec![false; 50];
        for &i in &idx {
            assert!(i < 50);
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn fd_grad_square() {
        let g = fd_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_grad_constant_zero() {
        let g = fd_grad(|_| 4.25, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_grad_sq_norm() {
        let g = fd_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_grad_rejects_non_finite() {
        let r = fd_grad(|x| (x[0] - 1.0).ln(), &[1.0], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn solve_roundtrip() {
        let mut p = Prng::new(13);
        let a = {
            let m = random_mat(&mut p, 5, 5);
            // Diagonally dominate to stay well conditioned.
            let mut a = m.clone();
            for i in 0..5 {
                a.set(i, i, a.get(i, i) + 6.0);
            }
            a
        };
        let x_true = random_mat(&mut p, 5, 2);
        let b = a.matmul(&x_true).unwrap();
        let x = solve(&a, &b).unwrap();
        for (u, v) in x.as_slice().iter().zip(x_true.as_slice()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn solve_singular_errors() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(solve(&a, &b).is_err());
    }
}
