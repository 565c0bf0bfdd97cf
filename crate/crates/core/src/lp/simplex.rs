//! Dense bounded-variable primal simplex for
//!
//! ```text
//! max c·x   s.t.  A x ≤ b,  0 ≤ x ≤ u,   b ≥ 0
//! ```
//!
//! Slacks form the starting basis, so no phase one is needed. Variable upper
//! bounds are handled natively (bound flips), and both entering and leaving
//! variables follow Bland's smallest-index rule.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("right-hand side {value} of row {row} is negative")]
    NegativeRhs { row: usize, value: f64 },
    #[error("problem is unbounded")]
    Unbounded,
    #[error("iteration limit reached")]
    IterationLimit,
}

/// Row-major dense LP in `≤` form with box-bounded columns.
#[derive(Debug, Clone, Default)]
pub struct DenseLp {
    pub num_cols: usize,
    pub cost: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl DenseLp {
    pub fn new(cost: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(cost.len(), upper.len());
        Self {
            num_cols: cost.len(),
            cost,
            upper,
            rows: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, rhs: f64) {
        assert_eq!(coeffs.len(), self.num_cols);
        self.rows.push(coeffs);
        self.rhs.push(rhs);
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Largest violation of any row or bound by `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (row, &b) in self.rows.iter().zip(&self.rhs) {
            let lhs: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
            worst = worst.max(lhs - b);
        }
        for (v, &u) in x.iter().zip(&self.upper) {
            worst = worst.max(-v).max(v - u);
        }
        worst
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Weak-duality bound `b·y + Σ_j u_j·max(0, c_j − a_j·y)` for row
    /// multipliers `y ≥ 0` (negative entries are clipped). Any such `y`
    /// yields an upper bound on the optimum; equality certifies optimality.
    pub fn dual_bound(&self, y: &[f64]) -> f64 {
        let y: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
        let mut bound: f64 = self.rhs.iter().zip(&y).map(|(b, v)| b * v).sum();
        for j in 0..self.num_cols {
            let ay: f64 = self.rows.iter().zip(&y).map(|(r, v)| r[j] * v).sum();
            let reduced = self.cost[j] - ay;
            if reduced > 0.0 {
                bound += self.upper[j] * reduced;
            }
        }
        bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Row duals (shadow prices), non-negative at optimality.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Basic,
    Lower,
    Upper,
}

const PIVOT_TOL: f64 = 1e-9;
const RATIO_TIE: f64 = 1e-12;

pub fn solve(lp: &DenseLp) -> Result<LpSolution, SimplexError> {
    let m = lp.num_rows();
    let n = lp.num_cols;
    let width = n + m;
    for (row, &b) in lp.rhs.iter().enumerate() {
        if b < 0.0 {
            return Err(SimplexError::NegativeRhs { row, value: b });
        }
    }

    // Scale costs so the reduced-cost tolerance is relative.
    let scale = lp.cost.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1e-300);
    let cost_tol = 1e-11;

    let mut tab = vec![0.0; m * width];
    for i in 0..m {
        tab[i * width..i * width + n].copy_from_slice(&lp.rows[i]);
        tab[i * width + n + i] = 1.0;
    }
    let mut beta = lp.rhs.clone();
    let mut basis: Vec<usize> = (n..width).collect();
    let mut status = vec![Status::Lower; width];
    for s in status.iter_mut().skip(n) {
        *s = Status::Basic;
    }
    let upper = |j: usize| if j < n { lp.upper[j] } else { f64::INFINITY };
    let mut reduced: Vec<f64> = (0..width)
        .map(|j| if j < n { lp.cost[j] / scale } else { 0.0 })
        .collect();

    // Columns with a zero upper bound are fixed at zero.
    let fixed_zero: Vec<bool> = (0..width).map(|j| j < n && lp.upper[j] <= 0.0).collect();

    let max_iter = 50 * (width + m) + 1000;
    let mut iterations = 0;
    loop {
        if iterations >= max_iter {
            return Err(SimplexError::IterationLimit);
        }
        let entering = (0..width).find(|&j| {
            !fixed_zero[j]
                && match status[j] {
                    Status::Lower => reduced[j] > cost_tol,
                    Status::Upper => reduced[j] < -cost_tol,
                    Status::Basic => false,
                }
        });
        let Some(j) = entering else { break };
        iterations += 1;
        let dir = if status[j] == Status::Lower { 1.0 } else { -1.0 };

        // Ratio test over basic rows; Bland ties resolved on basis index.
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            let a = tab[i * width + j] * dir;
            let limit = if a > PIVOT_TOL {
                beta[i].max(0.0) / a
            } else if a < -PIVOT_TOL {
                let ub = upper(basis[i]);
                if ub.is_infinite() {
                    continue;
                }
                (ub - beta[i]).max(0.0) / -a
            } else {
                continue;
            };
            best = match best {
                None => Some((i, limit)),
                Some((bi, bl)) => {
                    if limit < bl - RATIO_TIE
                        || (limit <= bl + RATIO_TIE && basis[i] < basis[bi])
                    {
                        Some((i, limit))
                    } else {
                        Some((bi, bl))
                    }
                }
            };
        }
        let flip = upper(j);
        let (theta, pivot_row) = match best {
            Some((_, limit)) if flip <= limit + RATIO_TIE => (flip, None),
            Some((row, limit)) => (limit, Some(row)),
            None if flip.is_finite() => (flip, None),
            None => return Err(SimplexError::Unbounded),
        };

        for i in 0..m {
            beta[i] -= dir * theta * tab[i * width + j];
        }
        let Some(r) = pivot_row else {
            status[j] = if dir > 0.0 { Status::Upper } else { Status::Lower };
            continue;
        };

        let leaving = basis[r];
        let a_rj = tab[r * width + j];
        status[leaving] = if a_rj * dir > 0.0 {
            Status::Lower
        } else {
            Status::Upper
        };
        beta[r] = if dir > 0.0 { theta } else { upper(j) - theta };

        let inv = 1.0 / a_rj;
        for k in 0..width {
            tab[r * width + k] *= inv;
        }
        tab[r * width + j] = 1.0;
        let (before, rest) = tab.split_at_mut(r * width);
        let (pivot, after) = rest.split_at_mut(width);
        for row in before.chunks_exact_mut(width).chain(after.chunks_exact_mut(width)) {
            let f = row[j];
            if f != 0.0 {
                for k in 0..width {
                    row[k] -= f * pivot[k];
                }
                row[j] = 0.0;
            }
        }
        let f = reduced[j];
        for k in 0..width {
            reduced[k] -= f * pivot[k];
        }
        reduced[j] = 0.0;
        basis[r] = j;
        status[j] = Status::Basic;
    }

    let mut values = vec![0.0; width];
    for j in 0..width {
        values[j] = match status[j] {
            Status::Lower | Status::Basic => 0.0,
            Status::Upper => upper(j),
        };
    }
    for (i, &b) in basis.iter().enumerate() {
        values[b] = beta[i];
    }
    let x: Vec<f64> = values[..n]
        .iter()
        .zip(&lp.upper)
        .map(|(&v, &u)| v.clamp(0.0, u.max(0.0)))
        .collect();
    let duals = (0..m).map(|i| (-reduced[n + i] * scale).max(0.0)).collect();
    Ok(LpSolution {
        objective: lp.objective(&x),
        x,
        duals,
        iterations,
    })
}
