//! Sparse matrices and Jacobi-preconditioned Krylov solvers.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

/// Row-wise assembler; duplicate entries in a row are summed.
#[derive(Debug, Clone)]
pub struct CsrBuilder<T> {
    n: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> CsrBuilder<T> {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn add(&mut self, row: usize, col: usize, val: T) {
        debug_assert!(row < self.n && col < self.n);
        let r = &mut self.rows[row];
        if let Some(e) = r.iter_mut().find(|e| e.0 == col) {
            e.1 = e.1 + val;
        } else {
            r.push((col, val));
        }
    }

    /// Replace row `row` by the identity row.
    pub fn set_identity_row(&mut self, row: usize) {
        self.rows[row].clear();
        self.rows[row].push((row, T::one()));
    }

    pub fn build(self) -> CsrMatrix<T> {
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in self.rows {
            r.sort_by_key(|e| e.0);
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

impl<T: Real> CsrMatrix<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = T::zero();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s = s + self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.cols[k] == i)
                    .map(|k| self.vals[k])
                    .unwrap_or_else(T::zero)
            })
            .collect()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .find(|&k| self.cols[k] == j)
            .map(|k| self.vals[k])
            .unwrap_or_else(T::zero)
    }

    /// Entries of row `i` as `(col, value)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    pub fn residual(&self, x: &[T], b: &[T]) -> Vec<T> {
        let mut r = vec![T::zero(); self.n];
        self.mul_vec(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = *bi - *ri;
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovOptions<T> {
    /// Relative residual target ||b - Ax|| / ||b||.
    pub rel_tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for KrylovOptions<T> {
    fn default() -> Self {
        Self {
            rel_tol: T::default_solver_tol(),
            max_iter: 20_000,
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn inv_diag<T: Real>(a: &CsrMatrix<T>) -> Vec<T> {
    a.diagonal()
        .into_iter()
        .map(|d| if d != T::zero() { T::one() / d } else { T::one() })
        .collect()
}

/// Preconditioned conjugate gradients for symmetric positive definite `a`.
/// `x` carries the initial guess and receives the solution.
pub fn cg<T: Real>(
    a: &CsrMatrix<T>,
    b: &[T],
    x: &mut [T],
    opts: KrylovOptions<T>,
    context: &str,
) -> Result<SolveStats> {
    let n = a.dim();
    let bnorm = norm(b);
    if bnorm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m = inv_diag(a);
    let mut r = a.residual(x, b);
    let mut z: Vec<T> = r.iter().zip(&m).map(|(r, m)| *r * *m).collect();
    let mut p = z.clone();
    let mut q = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    let mut rel = norm(&r) / bnorm;
    let mut it = 0;
    while rel > opts.rel_tol {
        if it >= opts.max_iter {
            return Err(Error::Solver {
                context: context.to_string(),
                iterations: it,
                residual: rel.to_f64_lossy(),
            });
        }
        a.mul_vec(&p, &mut q);
        let pq = dot(&p, &q);
        if pq == T::zero() {
            break;
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
            r[i] = r[i] - alpha * q[i];
        }
        for i in 0..n {
            z[i] = r[i] * m[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rel = norm(&r) / bnorm;
        it += 1;
    }
    Ok(SolveStats {
        iterations: it,
        relative_residual: rel.to_f64_lossy(),
    })
}

/// Jacobi-preconditioned BiCGSTAB for general nonsingular `a`.
pub fn bicgstab<T: Real>(
    a: &CsrMatrix<T>,
    b: &[T],
    x: &mut [T],
    opts: KrylovOptions<T>,
    context: &str,
) -> Result<SolveStats> {
    let n = a.dim();
    let bnorm = norm(b);
    if bnorm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m = inv_diag(a);
    let mut r = a.residual(x, b);
    let mut rel = norm(&r) / bnorm;
    let mut it = 0;
    let mut restarts = 0;
    'outer: while rel > opts.rel_tol {
        let r_hat = r.clone();
        let mut rho = T::one();
        let mut alpha = T::one();
        let mut omega = T::one();
        let mut v = vec![T::zero(); n];
        let mut p = vec![T::zero(); n];
        let mut y = vec![T::zero(); n];
        let mut s = vec![T::zero(); n];
        let mut z = vec![T::zero(); n];
        let mut t = vec![T::zero(); n];
        loop {
            if it >= opts.max_iter {
                return Err(Error::Solver {
                    context: context.to_string(),
                    iterations: it,
                    residual: rel.to_f64_lossy(),
                });
            }
            let rho_new = dot(&r_hat, &r);
            let tiny = T::min_positive_value().sqrt();
            if rho_new.abs() < tiny * bnorm * bnorm * T::epsilon() {
                // breakdown: restart from the current iterate
                restarts += 1;
                if restarts > 50 {
                    return Err(Error::Solver {
                        context: format!("{context} (BiCGSTAB breakdown)"),
                        iterations: it,
                        residual: rel.to_f64_lossy(),
                    });
                }
                r = a.residual(x, b);
                continue 'outer;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
                y[i] = p[i] * m[i];
            }
            a.mul_vec(&y, &mut v);
            let rv = dot(&r_hat, &v);
            if rv == T::zero() {
                restarts += 1;
                r = a.residual(x, b);
                continue 'outer;
            }
            alpha = rho / rv;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if norm(&s) / bnorm <= opts.rel_tol {
                for i in 0..n {
                    x[i] = x[i] + alpha * y[i];
                }
                it += 1;
                r = a.residual(x, b);
                rel = norm(&r) / bnorm;
                if rel <= opts.rel_tol {
                    break 'outer;
                }
                continue 'outer;
            }
            for i in 0..n {
                z[i] = s[i] * m[i];
            }
            a.mul_vec(&z, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > T::zero() {
                dot(&t, &s) / tt
            } else {
                T::zero()
            };
            for i in 0..n {
                x[i] = x[i] + alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            it += 1;
            rel = norm(&r) / bnorm;
            if rel <= opts.rel_tol {
                // guard against drift of the recursive residual
                r = a.residual(x, b);
                rel = norm(&r) / bnorm;
                if rel <= opts.rel_tol {
                    break 'outer;
                }
                continue 'outer;
            }
            if omega == T::zero() {
                restarts += 1;
                continue 'outer;
            }
        }
    }
    Ok(SolveStats {
        iterations: it,
        relative_residual: rel.to_f64_lossy(),
    })
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    n: usize,
    bw: usize,
    /// Row i holds L[i][i-bw..=i], left-padded.
    l: Vec<T>,
}

impl<T: Real> BandedCholesky<T> {
    /// Factors the matrix whose lower band entries are given by
    /// `entry(i, j)` for `i - bw <= j <= i`.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> T, context: &str) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![T::zero(); n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = entry(i, j);
                let p0 = j0.max(j.saturating_sub(bw));
                for p in p0..j {
                    s -= l[i * w + (p + bw - i)] * l[j * w + (p + bw - j)];
                }
                if i == j {
                    if !(s > T::zero()) {
                        return Err(Error::Solver {
                            context: format!("{context}: matrix not positive definite at row {i}"),
                            iterations: 0,
                            residual: s.to_f64_lossy(),
                        });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves in place.
    pub fn solve(&self, b: &mut [T]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = b[i];
            for p in i.saturating_sub(bw)..i {
                s -= self.l[i * w + (p + bw - i)] * b[p];
            }
            b[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for q in i + 1..(i + bw + 1).min(n) {
                s -= self.l[q * w + (i + bw - q)] * b[q];
            }
            b[i] = s / self.l[i * w + bw];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize, shift: f64) -> CsrMatrix<f64> {
        let mut b = CsrBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.0 + shift);
            if i > 0 {
                b.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
            }
        }
        b.build()
    }

    #[test]
    fn builder_sums_duplicates() {
        let mut b = CsrBuilder::<f64>::new(2);
        b.add(0, 0, 1.0);
        b.add(0, 0, 2.5);
        b.add(1, 0, -1.0);
        b.add(1, 1, 1.0);
        let a = b.build();
        assert_eq!(a.get(0, 0), 3.5);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.diagonal(), vec![3.5, 1.0]);
    }

    #[test]
    fn cg_solves_spd() {
        let a = laplace_1d(50, 0.01);
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; 50];
        a.mul_vec(&xs, &mut b);
        let mut x = vec![0.0; 50];
        let st = cg(&a, &b, &mut x, KrylovOptions::default(), "test").unwrap();
        assert!(st.relative_residual <= 1e-10);
        for (u, v) in x.iter().zip(&xs) {
            assert!((u - v).abs() < 1e-7);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric() {
        let n = 40;
        let mut b = CsrBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.5);
            if i > 0 {
                b.add(i, i - 1, -1.4);
            }
            if i + 1 < n {
                b.add(i, i + 1, -0.6);
            }
        }
        let a = b.build();
        let xs: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
        let mut rhs = vec![0.0; n];
        a.mul_vec(&xs, &mut rhs);
        let mut x = vec![0.0; n];
        bicgstab(&a, &rhs, &mut x, KrylovOptions::default(), "test").unwrap();
        for (u, v) in x.iter().zip(&xs) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let a = laplace_1d(200, 0.0);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let opts = KrylovOptions {
            rel_tol: 1e-12,
            max_iter: 3,
        };
        match cg(&a, &b, &mut x, opts, "tiny budget") {
            Err(Error::Solver { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = laplace_1d(5, 0.0);
        let mut x = vec![1.0; 5];
        cg(&a, &[0.0; 5], &mut x, KrylovOptions::default(), "z").unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn banded_cholesky_solves_tridiagonal_and_pentadiagonal() {
        let n = 40;
        for bw in [1usize, 3] {
            let entry = |i: usize, j: usize| -> f64 {
                if i == j {
                    4.0 + i as f64 * 0.01
                } else if i - j == 1 {
                    -1.0
                } else if i - j == bw {
                    -0.5
                } else {
                    0.0
                }
            };
            let ch = BandedCholesky::factor(n, bw, entry, "test").unwrap();
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
            let mut b = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let a = if j <= i { if i - j <= bw { entry(i, j) } else { 0.0 } } else if j - i <= bw { entry(j, i) } else { 0.0 };
                    b[i] += a * x[j];
                }
            }
            ch.solve(&mut b);
            for i in 0..n {
                assert!((b[i] - x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn banded_cholesky_rejects_indefinite() {
        let r = BandedCholesky::factor(3, 1, |i: usize, j: usize| if i == j { -1.0f64 } else { 0.0 }, "neg");
        assert!(matches!(r, Err(Error::Solver { .. })));
    }
}
