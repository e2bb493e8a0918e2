//! Small numerical building blocks shared across modules: a rank-revealing
//! pivoted QR, nonnegative least squares, and a sparse-solver wrapper.

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::DMatrix;

use crate::{DhnError, Result};

/// Outcome of a column-pivoted Householder QR factorization, reduced to the
/// information needed for rank decisions.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Diagonal of R in pivot order.
    pub r_diag: Vec<f64>,
    /// Column pivot order (indices into the original columns).
    pub pivots: Vec<usize>,
    /// Numerical rank under the relative tolerance used.
    pub rank: usize,
    /// Set when a pivot magnitude falls inside the ambiguity band; carries
    /// the two candidate ranks.
    pub ambiguous: Option<(usize, usize)>,
}

/// Column-pivoted QR of `a`, deciding rank with a relative pivot tolerance
/// `rel_tol * |R11|`. Pivots within a factor 100 of the threshold are
/// reported as ambiguous alongside both candidate ranks.
pub fn pivoted_qr(a: &DMatrix<f64>, rel_tol: f64) -> PivotedQr {
    let m = a.nrows();
    let n = a.ncols();
    let mut work = a.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    let mut r_diag = Vec::with_capacity(n.min(m));

    let kmax = m.min(n);
    for k in 0..kmax {
        // Select the remaining column with the largest norm below row k.
        let (jmax, nmax) = (k..n)
            .map(|j| {
                let norm = work.view_range(k..m, j..j + 1).norm();
                (j, norm)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        work.swap_columns(k, jmax);
        pivots.swap(k, jmax);
        if nmax == 0.0 {
            r_diag.push(0.0);
            continue;
        }
        // Householder reflector annihilating below the diagonal of column k.
        let mut v = work.view_range(k..m, k..k + 1).clone_owned();
        let alpha = -v[(0, 0)].signum() * v.norm();
        v[(0, 0)] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..n {
                let col = work.view_range(k..m, j..j + 1).clone_owned();
                let beta = 2.0 * v.dot(&col) / vnorm2;
                for i in 0..(m - k) {
                    work[(k + i, j)] -= beta * v[(i, 0)];
                }
            }
        }
        r_diag.push(work[(k, k)]);
    }

    let r11 = r_diag.first().map(|v| v.abs()).unwrap_or(0.0);
    let threshold = rel_tol * r11;
    let rank = r_diag.iter().take_while(|d| d.abs() > threshold).count();

    // Ambiguity band: pivots within two orders of magnitude of the cut.
    let mut ambiguous = None;
    if r11 > 0.0 {
        let lo = threshold / 100.0;
        let hi = threshold * 100.0;
        let soft = r_diag
            .iter()
            .take_while(|d| d.abs() > lo)
            .count();
        let in_band = r_diag.iter().any(|d| d.abs() > lo && d.abs() <= hi);
        if in_band && soft != rank {
            ambiguous = Some((rank, soft));
        }
    }

    PivotedQr {
        r_diag,
        pivots,
        rank,
        ambiguous,
    }
}

/// Lawson-Hanson nonnegative least squares: minimize `|a x - b|` subject to
/// `x >= 0`. Returns the solution and its residual norm.
pub fn nnls(a: &DMatrix<f64>, b: &nalgebra::DVector<f64>) -> (nalgebra::DVector<f64>, f64) {
    let n = a.ncols();
    let mut passive = vec![false; n];
    let mut x = nalgebra::DVector::zeros(n);
    let mut w;
    let max_outer = 3 * n + 30;

    for _ in 0..max_outer {
        let resid = b - a * &x;
        w = a.transpose() * &resid;
        // Find the most negative gradient among the active (zero) set.
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > 1e-12 {
                if best.map(|(_, v)| w[j] > v).unwrap_or(true) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((j_in, _)) = best else { break };
        passive[j_in] = true;

        loop {
            // Least squares on the passive set.
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(idx.iter());
            let sol = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-12)
                .unwrap_or_else(|_| nalgebra::DVector::zeros(idx.len()));
            if sol.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = sol[k];
                }
                break;
            }
            // Step back to the boundary and drop offending variables.
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if sol[k] <= 0.0 {
                    let denom = x[j] - sol[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (sol[k] - x[j]);
                if x[j] <= 1e-14 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    let res = (b - a * &x).norm();
    (x, res)
}

/// Sparse square linear system with a structure that is fixed once and
/// refactorized for new values. Used by the implicit-Euler stepper and the
/// interior-point KKT solves.
pub struct SparseLuSolver {
    n: usize,
    triplets: Vec<Triplet<usize, usize, f64>>,
}

impl SparseLuSolver {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            triplets: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.triplets.clear();
    }

    /// Accumulate `value` at `(row, col)`; duplicate entries are summed.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.triplets.push(Triplet::new(row, col, value));
        }
    }

    /// Factorize and solve in place for one or more right-hand sides laid
    /// out as columns of `rhs`.
    pub fn solve(&self, rhs: &mut [f64]) -> Result<()> {
        let mat = SparseColMat::try_new_from_triplets(self.n, self.n, &self.triplets)
            .map_err(|e| DhnError::Singular(format!("sparse assembly: {e:?}")))?;
        let sym = SymbolicLu::try_new(mat.symbolic())
            .map_err(|e| DhnError::Singular(format!("symbolic LU: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(sym, mat.as_ref())
            .map_err(|e| DhnError::Singular(format!("numeric LU: {e:?}")))?;
        let ncols = rhs.len() / self.n;
        let mut m = faer::Mat::from_fn(self.n, ncols, |i, j| rhs[j * self.n + i]);
        lu.solve_in_place(m.as_mut());
        for j in 0..ncols {
            for i in 0..self.n {
                rhs[j * self.n + i] = m[(i, j)];
            }
        }
        Ok(())
    }
}
