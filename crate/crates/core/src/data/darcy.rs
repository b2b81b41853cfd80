//! Five-point finite-difference solver for `-div(a grad u) = f` on the unit square
//! with homogeneous Dirichlet boundary values.
//!
//! Nodes form an `n x n` grid including the boundary. Face coefficients between two
//! nodes are harmonic means of the nodal values, which keeps flux continuous across
//! jumps of a piecewise-constant `a`. The symmetric positive definite system on the
//! `(n-2)^2` interior nodes is solved by banded Cholesky.

use crate::error::{PitError, Result};

/// Assembled interior system in banded lower storage: `band[i][j]` holds
/// `A[i][i - j]` for `j <= bw`.
struct BandedSpd {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.bw + 1) + j]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.band[i * (self.bw + 1) + j]
    }

    /// `y = A x`.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            y[i] += self.at(i, 0) * x[i];
            for j in 1..=self.bw.min(i) {
                let a = self.at(i, j);
                if a != 0.0 {
                    y[i] += a * x[i - j];
                    y[i - j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place Cholesky `A = L Lᵀ`, keeping `L` in the same band.
    fn factor(mut self) -> Result<Self> {
        let bw = self.bw;
        for i in 0..self.n {
            for j in (1..=bw.min(i)).rev() {
                // L[i][i-j]
                let col = i - j;
                let mut s = self.at(i, j);
                for k in 1..=bw.min(col) {
                    if j + k <= bw {
                        s -= self.at(i, j + k) * self.at(col, k);
                    }
                }
                *self.at_mut(i, j) = s / self.at(col, 0);
            }
            let mut d = self.at(i, 0);
            for j in 1..=bw.min(i) {
                d -= self.at(i, j).powi(2);
            }
            if d <= 0.0 {
                return Err(PitError::InvalidArgument(
                    "diffusion matrix is not positive definite".into(),
                ));
            }
            *self.at_mut(i, 0) = d.sqrt();
        }
        Ok(self)
    }

    fn solve_factored(&self, rhs: &[f64]) -> Vec<f64> {
        let mut y = rhs.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for j in 1..=self.bw.min(i) {
                s -= self.at(i, j) * y[i - j];
            }
            y[i] = s / self.at(i, 0);
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for j in 1..=self.bw.min(self.n - 1 - i) {
                s -= self.at(i + j, j) * y[i + j];
            }
            y[i] = s / self.at(i, 0);
        }
        y
    }
}

/// Result of one solve.
#[derive(Clone, Debug)]
pub struct DarcySolution {
    /// Nodal values on the full `n x n` grid (boundary entries are zero), row-major.
    pub u: Vec<f64>,
    /// `max |A u - f|` over the interior system.
    pub residual: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Solves on an `n x n` node grid with coefficient `a` and forcing `f` given at every
/// node in row-major order.
pub fn solve_darcy(n: usize, a: &[f64], f: &[f64]) -> Result<DarcySolution> {
    if n < 3 {
        return Err(PitError::InvalidArgument(format!(
            "grid needs at least 3 nodes per side, got {n}"
        )));
    }
    if a.len() != n * n || f.len() != n * n {
        return Err(PitError::InvalidArgument(format!(
            "expected {} nodal values for a {n}x{n} grid",
            n * n
        )));
    }
    if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(PitError::InvalidArgument(
            "coefficient must be positive and finite".into(),
        ));
    }
    let m = n - 2;
    let h2 = ((n - 1) as f64).powi(2);
    let node = |i: usize, j: usize| i * n + j;
    let mut sys = BandedSpd {
        n: m * m,
        bw: m,
        band: vec![0.0; m * m * (m + 1)],
    };
    let mut rhs = vec![0.0; m * m];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let row = (i - 1) * m + (j - 1);
            let ac = a[node(i, j)];
            let neighbours = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)];
            let mut diag = 0.0;
            for (ni, nj) in neighbours {
                let c = harmonic(ac, a[node(ni, nj)]) * h2;
                diag += c;
                let interior = (1..n - 1).contains(&ni) && (1..n - 1).contains(&nj);
                if interior {
                    let col = (ni - 1) * m + (nj - 1);
                    if col < row {
                        *sys.at_mut(row, row - col) = -c;
                    }
                }
            }
            *sys.at_mut(row, 0) = diag;
            rhs[row] = f[node(i, j)];
        }
    }
    let original = BandedSpd {
        n: sys.n,
        bw: sys.bw,
        band: sys.band.clone(),
    };
    let x = sys.factor()?.solve_factored(&rhs);
    let ax = original.apply(&x);
    let residual = ax.iter().zip(&rhs).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let mut u = vec![0.0; n * n];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            u[node(i, j)] = x[(i - 1) * m + (j - 1)];
        }
    }
    Ok(DarcySolution { u, residual })
}

/// Piecewise-constant coefficient: `hi` where the field is non-negative, `lo` elsewhere.
pub fn threshold_coefficient(field: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    field.iter().map(|&v| if v >= 0.0 { hi } else { lo }).collect()
}
