//! Dense two-phase simplex for small LPs in standard form: minimise `c·x`
//! subject to `A x = b`, `x ≥ 0`. Dantzig pricing, with Bland's rule after a
//! run of degenerate pivots.

use crate::error::{Error, Result};

/// Feasibility and dual-feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-7;
const PIVOT_TOL: f64 = 1e-11;
const MAX_PIVOTS: usize = 200_000;
const STALL_LIMIT: usize = 50;

#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// `y` with `yᵀA ≤ c` at optimality.
    pub duals: Vec<f64>,
    /// `c - Aᵀy`, nonnegative (within tolerance) at optimality.
    pub reduced_costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    Infeasible,
    Unbounded,
}

struct Tableau {
    rows: usize,
    width: usize,
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.width - 1)
    }

    fn pivot(&mut self, r: usize, col: usize, obj: &mut [f64]) {
        let w = self.width;
        let p = self.at(r, col);
        for v in &mut self.data[r * w..(r + 1) * w] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.data[r * w..(r + 1) * w].to_vec();
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.at(i, col);
            if f != 0.0 {
                for (v, pr) in self.data[i * w..(i + 1) * w].iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                self.data[i * w + col] = 0.0;
            }
        }
        let f = obj[col];
        if f != 0.0 {
            for (v, pr) in obj.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            obj[col] = 0.0;
        }
        self.basis[r] = col;
    }

    /// Minimise over the reduced-cost row `obj` (last entry is -objective),
    /// entering only columns below `allowed`. Uses the most negative reduced
    /// cost, and Bland's rule while pivots stay degenerate.
    fn optimise(&mut self, obj: &mut [f64], allowed: usize) -> Result<bool> {
        let mut stalled = 0usize;
        for _ in 0..MAX_PIVOTS {
            let col = if stalled < STALL_LIMIT {
                (0..allowed)
                    .filter(|&j| obj[j] < -1e-10)
                    .min_by(|&a, &b| obj[a].total_cmp(&obj[b]).then(a.cmp(&b)))
            } else {
                (0..allowed).find(|&j| obj[j] < -1e-10)
            };
            let Some(col) = col else {
                return Ok(true);
            };
            let before = obj[self.width - 1];
            let mut best: Option<(f64, usize)> = None;
            for i in 0..self.rows {
                let a = self.at(i, col);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    let better = match best {
                        None => true,
                        Some((br, bi)) => {
                            ratio < br - 1e-14
                                || (ratio <= br + 1e-14 && self.basis[i] < self.basis[bi])
                        }
                    };
                    if better {
                        best = Some((ratio, i));
                    }
                }
            }
            match best {
                None => return Ok(false),
                Some((_, r)) => self.pivot(r, col, obj),
            }
            // the stored value is -objective, so it rises as we improve
            if obj[self.width - 1] > before + 1e-13 {
                stalled = 0;
            } else {
                stalled += 1;
            }
        }
        Err(Error::SolverFailure("pivot limit reached".into()))
    }
}

pub fn solve(lp: &LinearProgram) -> Result<LpOutcome> {
    let m = lp.b.len();
    let n = lp.c.len();
    if lp.a.len() != m || lp.a.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("LP matrix shape".into()));
    }
    let width = n + m + 1;
    let mut data = vec![0.0; m * width];
    let mut sign = vec![1.0; m];
    for i in 0..m {
        if lp.b[i] < 0.0 {
            sign[i] = -1.0;
        }
        for j in 0..n {
            data[i * width + j] = sign[i] * lp.a[i][j];
        }
        data[i * width + n + i] = 1.0;
        data[i * width + width - 1] = sign[i] * lp.b[i];
    }
    let mut t = Tableau {
        rows: m,
        width,
        data,
        basis: (n..n + m).collect(),
    };

    // phase 1: minimise the sum of artificials
    let mut obj = vec![0.0; width];
    for i in 0..m {
        for j in 0..width {
            if j < n || j == width - 1 {
                obj[j] -= t.at(i, j);
            }
        }
    }
    if !t.optimise(&mut obj, n + m)? {
        return Err(Error::SolverFailure("phase 1 unbounded".into()));
    }
    let scale = 1.0 + lp.b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if -obj[width - 1] > FEAS_TOL * scale {
        return Ok(LpOutcome::Infeasible);
    }
    // drive artificials out of the basis where possible
    for i in 0..m {
        if t.basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t.at(i, j).abs() > 1e-9) {
                let mut dummy = vec![0.0; width];
                t.pivot(i, j, &mut dummy);
            }
        }
    }

    // phase 2
    let mut obj = vec![0.0; width];
    obj[..n].copy_from_slice(&lp.c);
    for i in 0..m {
        let cb = if t.basis[i] < n {
            lp.c[t.basis[i]]
        } else {
            0.0
        };
        if cb != 0.0 {
            for j in 0..width {
                obj[j] -= cb * t.at(i, j);
            }
        }
    }
    if !t.optimise(&mut obj, n)? {
        return Ok(LpOutcome::Unbounded);
    }

    let mut x = vec![0.0; n];
    for i in 0..m {
        if t.basis[i] < n {
            x[t.basis[i]] = t.rhs(i).max(0.0);
        }
    }
    // y = c_B B^{-1}; B^{-1} sits in the artificial columns
    let duals: Vec<f64> = (0..m)
        .map(|k| {
            let v: f64 = (0..m)
                .filter(|&i| t.basis[i] < n)
                .map(|i| lp.c[t.basis[i]] * t.at(i, n + k))
                .sum();
            v * sign[k]
        })
        .collect();
    let reduced_costs: Vec<f64> = (0..n)
        .map(|j| lp.c[j] - (0..m).map(|i| duals[i] * lp.a[i][j]).sum::<f64>())
        .collect();
    let objective = x.iter().zip(&lp.c).map(|(a, b)| a * b).sum();
    Ok(LpOutcome::Optimal(LpSolution {
        x,
        objective,
        duals,
        reduced_costs,
    }))
}
