//! Zero-mean solves of the singular (pure Neumann) extracellular system.
//!
//! The operator is symmetric positive semidefinite with the constant vector as
//! kernel. The solution is fixed by `Σ |K| u_K = 0`.

use log::warn;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
    diag: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut m = Self { n, row_ptr, col_idx, values, diag: Vec::new() };
        m.diag = (0..n).map(|r| m.get(r, r)).collect();
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.row(r).find(|&(cc, _)| cc == c).map_or(T::zero(), |(_, v)| v)
    }

    pub fn matvec_into(&self, x: &[T], y: &mut [T]) {
        for (r, out) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> &[T] {
        &self.diag
    }

    /// `max_{r,c} |A_rc − A_cr|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings<T> {
    /// Relative residual target `‖b − Au‖₂ ≤ tol ‖b‖₂`.
    pub tol: T,
    /// Iteration cap; `None` means `10 · n`.
    pub max_iter: Option<usize>,
}

impl<T: Real> Default for SolverSettings<T> {
    fn default() -> Self {
        Self { tol: T::of(1e-8), max_iter: None }
    }
}

pub struct LinearSystem<'a, T> {
    pub matrix: &'a CsrMatrix<T>,
    pub rhs: &'a [T],
    /// Cell measures `|K|` defining the mean constraint.
    pub weights: &'a [T],
    pub settings: SolverSettings<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// `u − (Σ wᵢuᵢ / Σ wᵢ)·1`.
pub fn project_zero_mean<T: Real>(u: &mut [T], weights: &[T]) {
    let (num, den) = u
        .iter()
        .zip(weights)
        .fold((T::zero(), T::zero()), |(n, d), (&x, &w)| (n + w * x, d + w));
    let mean = num / den;
    u.iter_mut().for_each(|x| *x -= mean);
}

pub fn weighted_mean<T: Real>(u: &[T], weights: &[T]) -> T {
    let den: T = weights.iter().copied().sum();
    u.iter().zip(weights).map(|(&x, &w)| w * x).sum::<T>() / den
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients for the singular system, returning
/// the representative with zero weighted mean.
pub fn solve_zero_mean<T: Real>(sys: &LinearSystem<'_, T>, initial_guess: &[T]) -> Result<(Vec<T>, SolveReport)> {
    let n = sys.matrix.dim();
    assert_eq!(sys.rhs.len(), n);
    assert_eq!(sys.weights.len(), n);
    assert_eq!(initial_guess.len(), n);

    // Consistency: the range of A is orthogonal to the constants.
    let mut b = sys.rhs.to_vec();
    let sum: T = b.iter().copied().sum();
    let abs_sum: T = b.iter().map(|x| x.abs()).sum();
    if sum.abs() > T::of(1e-8) * abs_sum.max(T::min_positive_value()) {
        warn!("elliptic right-hand side has nonzero sum {sum:e}; projecting");
    }
    let mean = sum / T::of(n as f64);
    b.iter_mut().for_each(|x| *x -= mean);

    let b_norm = dot(&b, &b).sqrt();
    if b_norm == T::zero() {
        return Ok((vec![T::zero(); n], SolveReport { iterations: 0, relative_residual: 0.0 }));
    }

    let mut u = initial_guess.to_vec();
    project_zero_mean(&mut u, sys.weights);
    let mut r = sys.matrix.matvec(&u);
    for (ri, bi) in r.iter_mut().zip(&b) {
        *ri = *bi - *ri;
    }
    let target = sys.settings.tol * b_norm;
    let max_iter = sys.settings.max_iter.unwrap_or(10 * n.max(1));

    let inv_diag: Vec<T> = sys
        .matrix
        .diagonal()
        .iter()
        .map(|&d| if d > T::zero() { T::one() / d } else { T::one() })
        .collect();
    let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(&a, &d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt();
    let mut iterations = 0;

    while res > target {
        if iterations >= max_iter {
            return Err(Error::Convergence { iterations, residual: (res / b_norm).as_f64() });
        }
        sys.matrix.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::Convergence { iterations, residual: (res / b_norm).as_f64() });
        }
        let alpha = rz / pap;
        for k in 0..n {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
        res = dot(&r, &r).sqrt();
        iterations += 1;
    }

    project_zero_mean(&mut u, sys.weights);
    Ok((u, SolveReport { iterations, relative_residual: (res / b_norm).as_f64() }))
}
