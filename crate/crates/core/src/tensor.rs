//! Minimal row-major matrix used by the predictor and its hand-written
//! backward pass. Vectors are row vectors: `y = x·W`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// # Panics
    /// If `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self { rows, cols, data: (0..rows * cols).map(|_| normal.sample(rng)).collect() }
    }

    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            vec_mat(self.row(r), other, out.row_mut(r));
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            mat_vec(other, self.row(r), out.row_mut(r));
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dims");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            add_outer(&mut out, self.row(r), other.row(r));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn plus(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Numerical rank by Gaussian elimination with partial pivoting.
    pub fn rank(&self, tol: f64) -> usize {
        let mut a = self.data.clone();
        let (rows, cols) = (self.rows, self.cols);
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut rank = 0;
        for c in 0..cols {
            if rank == rows {
                break;
            }
            let pivot = (rank..rows)
                .max_by(|&x, &y| a[x * cols + c].abs().total_cmp(&a[y * cols + c].abs()))
                .expect("non-empty range");
            if a[pivot * cols + c].abs() <= tol * scale {
                continue;
            }
            for k in 0..cols {
                a.swap(rank * cols + k, pivot * cols + k);
            }
            let p = a[rank * cols + c];
            for r in rank + 1..rows {
                let f = a[r * cols + c] / p;
                if f != 0.0 {
                    for k in c..cols {
                        a[r * cols + k] -= f * a[rank * cols + k];
                    }
                }
            }
            rank += 1;
        }
        rank
    }
}

/// `out = x · w` for a row vector `x`.
pub fn vec_mat(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
}

/// `out = w · y`, i.e. the gradient of `x·w` with respect to `x`.
pub fn mat_vec(w: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(y.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (o, r) in out.iter_mut().zip(0..w.rows) {
        *o = dot(w.row(r), y);
    }
}

/// `acc += xᵀ · y`.
pub fn add_outer(acc: &mut Matrix, x: &[f64], y: &[f64]) {
    debug_assert_eq!(x.len(), acc.rows);
    debug_assert_eq!(y.len(), acc.cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (a, &yj) in acc.row_mut(i).iter_mut().zip(y) {
            *a += xi * yj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let ab = a.matmul(&b);
        let ab2 = a.matmul_t(&b.transpose());
        let ab3 = a.transpose().t_matmul(&b);
        for r in 0..3 {
            for c in 0..5 {
                let direct: f64 = (0..4).map(|k| a.get(r, k) * b.get(k, c)).sum();
                assert!((ab.get(r, c) - direct).abs() < 1e-12);
                assert!((ab2.get(r, c) - direct).abs() < 1e-12);
                assert!((ab3.get(r, c) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_of_low_rank_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::random_normal(8, 2, 1.0, &mut rng);
        let b = Matrix::random_normal(2, 10, 1.0, &mut rng);
        assert_eq!(a.matmul(&b).rank(1e-9), 2);
        assert_eq!(Matrix::random_normal(6, 6, 1.0, &mut rng).rank(1e-9), 6);
        assert_eq!(Matrix::zeros(3, 3).rank(1e-9), 0);
    }

    #[test]
    fn stable_logistics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
