//! Loss functions, the uncertainty `Y_ℓ`, and expected posterior loss for
//! discrete, hybrid and continuous settings.

use std::path::Path;

use crate::error::{Error, Result};
use crate::measure::HybridMeasure;
use crate::num::pairwise_sum;
use crate::pixelate::{cell_index, floor_index, ContinuousMechanism, PiecewisePrior};
use crate::prob::{hyper_of, push_joint, same_support, Channel, DiscreteDist, Grid};
use crate::quad::{integrate_adaptive, GaussLegendre};

/// Absolute error target for the quadrature path.
pub const QUAD_TOL: f64 = 1e-8;
const TIE_TOL: f64 = 1e-12;
const MAX_SEGMENTS: usize = 400_000;

/// How `ℓ(w, x)` is computed from the guess index `w`, its position
/// `θ(w)` and the secret `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Len,
    Len2,
    BayesRisk,
    /// `values[w][i]` at the grid point `i/n`; off-grid inputs use `⌊x⌋_n`.
    Table {
        n: usize,
        values: Vec<Vec<f64>>,
    },
    /// `inner(w, ⌊x⌋_n)`.
    Step {
        n: usize,
        inner: Box<Kernel>,
    },
    Scaled {
        factor: f64,
        inner: Box<Kernel>,
    },
    /// `weights[⌊x⌋_n] * inner(w, x)`.
    Weighted {
        n: usize,
        weights: Vec<f64>,
        inner: Box<Kernel>,
    },
}

impl Kernel {
    fn eval(&self, w: usize, theta: f64, x: f64) -> f64 {
        match self {
            Kernel::Len => (x - theta).abs(),
            Kernel::Len2 => (x - theta) * (x - theta),
            Kernel::BayesRisk => {
                if (x - theta).abs() <= 1e-12 {
                    0.0
                } else {
                    1.0
                }
            }
            Kernel::Table { n, values } => values[w][floor_index(x.clamp(0.0, 1.0), *n)],
            Kernel::Step { n, inner } => {
                let xf = floor_index(x.clamp(0.0, 1.0), *n) as f64 / *n as f64;
                inner.eval(w, theta, xf)
            }
            Kernel::Scaled { factor, inner } => factor * inner.eval(w, theta, x),
            Kernel::Weighted { n, weights, inner } => {
                weights[floor_index(x.clamp(0.0, 1.0), *n)] * inner.eval(w, theta, x)
            }
        }
    }

    /// Constant in x between consecutive `x_breaks`.
    fn piecewise_constant(&self) -> bool {
        match self {
            Kernel::Len | Kernel::Len2 => false,
            Kernel::BayesRisk | Kernel::Table { .. } | Kernel::Step { .. } => true,
            Kernel::Scaled { inner, .. } | Kernel::Weighted { inner, .. } => {
                inner.piecewise_constant()
            }
        }
    }

    fn x_breaks(&self, guesses: &[f64], out: &mut Vec<f64>) {
        let grid = |n: usize, out: &mut Vec<f64>| {
            out.extend((0..=n).map(|k| k as f64 / n as f64));
        };
        match self {
            Kernel::Len | Kernel::Len2 | Kernel::BayesRisk => out.extend_from_slice(guesses),
            Kernel::Table { n, .. } | Kernel::Step { n, .. } => grid(*n, out),
            Kernel::Scaled { inner, .. } => inner.x_breaks(guesses, out),
            Kernel::Weighted { n, inner, .. } => {
                grid(*n, out);
                inner.x_breaks(guesses, out);
            }
        }
    }

    fn monotone_form(&self) -> Option<(f64, fn(f64) -> f64)> {
        match self {
            Kernel::Len => Some((1.0, |d| d)),
            Kernel::Len2 => Some((1.0, |d| d * d)),
            Kernel::BayesRisk => Some((1.0, |d| if d <= 1e-12 { 0.0 } else { 1.0 })),
            Kernel::Scaled { factor, inner } => inner.monotone_form().map(|(f, m)| (f * factor, m)),
            _ => None,
        }
    }
}

/// A loss `ℓ(w, x) ≥ 0` over a finite guess set.
#[derive(Debug, Clone, PartialEq)]
pub struct LossFunction {
    label: String,
    guesses: Vec<f64>,
    kernel: Kernel,
    kappa: Option<f64>,
}

impl LossFunction {
    pub fn new(
        label: impl Into<String>,
        guesses: Vec<f64>,
        kernel: Kernel,
        kappa: Option<f64>,
    ) -> Result<Self> {
        if guesses.is_empty() {
            return Err(Error::EmptyGuessSet);
        }
        if let Some(&g) = guesses.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::OutOfRange(g));
        }
        if let Kernel::Table { values, .. } = &kernel {
            if values.len() != guesses.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} table rows for {} guesses",
                    values.len(),
                    guesses.len()
                )));
            }
        }
        Ok(Self {
            label: label.into(),
            guesses,
            kernel,
            kappa,
        })
    }

    /// `|x - w|`, 1-Lipschitz.
    pub fn len(guesses: Vec<f64>) -> Result<Self> {
        Self::new("len", guesses, Kernel::Len, Some(1.0))
    }

    /// `(x - w)^2`, 2-Lipschitz on [0, 1].
    pub fn len2(guesses: Vec<f64>) -> Result<Self> {
        Self::new("len2", guesses, Kernel::Len2, Some(2.0))
    }

    /// `[x ≠ w]` with the guesses equal to the secret support.
    pub fn bayes_risk(support: Vec<f64>) -> Result<Self> {
        Self::new("bayes_risk", support, Kernel::BayesRisk, None)
    }

    pub fn builtin_len(grid: Grid) -> Self {
        Self::len(grid.points()).expect("grid points are valid guesses")
    }

    pub fn builtin_len2(grid: Grid) -> Self {
        Self::len2(grid.points()).expect("grid points are valid guesses")
    }

    pub fn builtin_bayes_risk(grid: Grid) -> Self {
        Self::bayes_risk(grid.points()).expect("grid points are valid guesses")
    }

    /// A step loss given by a table `values[w][i]` on the grid `U_n`, where
    /// `n + 1` is the row length. Guesses sit on `U_m` with `m + 1` rows.
    /// κ is the largest slope between neighbouring grid columns.
    pub fn table(values: Vec<Vec<f64>>) -> Result<Self> {
        let cols = values.first().map_or(0, Vec::len);
        if values.is_empty() || cols < 2 {
            return Err(Error::InvalidLoss(
                "table needs at least one row and two columns".into(),
            ));
        }
        if values.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidLoss("table rows differ in length".into()));
        }
        if values
            .iter()
            .flatten()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidLoss(
                "table entries must be nonnegative".into(),
            ));
        }
        let n = cols - 1;
        let m = values.len() - 1;
        let guesses = if m == 0 {
            vec![0.0]
        } else {
            Grid::new(m)?.points()
        };
        let kappa = values
            .iter()
            .flat_map(|r| r.windows(2).map(|p| (p[1] - p[0]).abs() * n as f64))
            .fold(0.0, f64::max);
        Self::new("table", guesses, Kernel::Table { n, values }, Some(kappa))
    }

    pub fn table_from_json(text: &str) -> Result<Self> {
        Self::table(serde_json::from_str(text)?)
    }

    /// Resolve a loss name with guesses on `U_n`: `len`, `len2`,
    /// `bayes_risk` or `table:<file>`.
    pub fn by_name(name: &str, n: usize) -> Result<Self> {
        let grid = Grid::new(n)?;
        match name {
            "len" => Ok(Self::builtin_len(grid)),
            "len2" => Ok(Self::builtin_len2(grid)),
            "bayes_risk" => Ok(Self::builtin_bayes_risk(grid)),
            _ => match name.strip_prefix("table:") {
                Some(path) => Self::table_from_json(&std::fs::read_to_string(Path::new(path))?),
                None => Err(Error::InvalidLoss(format!("unknown loss {name:?}"))),
            },
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn guesses(&self) -> &[f64] {
        &self.guesses
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    pub fn eval(&self, w: usize, x: f64) -> f64 {
        self.kernel.eval(w, self.guesses[w], x)
    }

    /// `ℓ(w, x)` for every guess (rows) and every `x` in `xs` (columns).
    pub fn matrix(&self, xs: &[f64]) -> Vec<Vec<f64>> {
        (0..self.guesses.len())
            .map(|w| xs.iter().map(|&x| self.eval(w, x)).collect())
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::InvalidLoss(format!("scale factor {factor}")));
        }
        Ok(Self {
            label: format!("{factor}*{}", self.label),
            guesses: self.guesses.clone(),
            kernel: Kernel::Scaled {
                factor,
                inner: Box::new(self.kernel.clone()),
            },
            kappa: self.kappa.map(|k| k * factor),
        })
    }

    /// `ℓ_N(w, x) = ℓ(w, ⌊x⌋_N)`. Keeps the κ of ℓ: the step version is
    /// only compared on grid inputs, where the two agree.
    pub fn stepped(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidN);
        }
        Ok(Self {
            label: format!("{}_{n}", self.label),
            guesses: self.guesses.clone(),
            kernel: Kernel::Step {
                n,
                inner: Box::new(self.kernel.clone()),
            },
            kappa: self.kappa,
        })
    }

    pub fn with_guesses(&self, guesses: Vec<f64>) -> Result<Self> {
        if matches!(self.kernel, Kernel::Table { .. }) {
            return Err(Error::InvalidLoss("table losses fix their guesses".into()));
        }
        Self::new(self.label.clone(), guesses, self.kernel.clone(), self.kappa)
    }

    /// `m` with `ℓ(w, x) = m(|θ(w) - x|, x)` when the form is known.
    pub fn monotone_witness(&self) -> Option<impl Fn(f64, f64) -> f64> {
        self.kernel
            .monotone_form()
            .map(|(factor, m)| move |d: f64, _x: f64| factor * m(d))
    }

    /// Checks on the given inputs that `ℓ(w, x)` depends on `w` only through
    /// `|θ(w) - x|` and does not decrease with it.
    pub fn check_monotone(&self, xs: &[f64]) -> bool {
        for &x in xs {
            let mut pairs: Vec<(f64, f64)> = (0..self.guesses.len())
                .map(|w| ((self.guesses[w] - x).abs(), self.eval(w, x)))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for p in pairs.windows(2) {
                let same_distance = (p[1].0 - p[0].0).abs() <= 1e-12;
                if same_distance && (p[1].1 - p[0].1).abs() > 1e-12 {
                    return false;
                }
                if !same_distance && p[1].1 < p[0].1 - 1e-12 {
                    return false;
                }
            }
        }
        true
    }

    /// Checks `|ℓ(w,x) - ℓ(w,x')| ≤ κ|x - x'|` on all pairs from `xs`.
    pub fn check_lipschitz(&self, xs: &[f64]) -> bool {
        let Some(kappa) = self.kappa else {
            return false;
        };
        (0..self.guesses.len()).all(|w| {
            xs.iter().all(|&x| {
                xs.iter().all(|&y| {
                    (self.eval(w, x) - self.eval(w, y)).abs() <= kappa * (x - y).abs() + 1e-12
                })
            })
        })
    }

    pub fn sup_on(&self, xs: &[f64]) -> f64 {
        self.matrix(xs).into_iter().flatten().fold(0.0, f64::max)
    }

    fn x_breaks(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.kernel.x_breaks(&self.guesses, &mut out);
        out
    }
}

/// Minimum and lowest-index minimiser (ties within 1e-12).
fn argmin(values: &[f64]) -> (f64, usize) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let idx = values
        .iter()
        .position(|&v| v <= min + TIE_TOL)
        .expect("nonempty");
    (min, idx)
}

/// `Y_ℓ(δ) = min_w E_δ[ℓ(w, ·)]`, with the lowest-index minimising guess.
pub fn uncertainty(loss: &LossFunction, delta: &DiscreteDist) -> Result<(f64, usize)> {
    if loss.guesses.is_empty() {
        return Err(Error::EmptyGuessSet);
    }
    let values: Vec<f64> = (0..loss.guesses.len())
        .map(|w| delta.expect(|x| loss.eval(w, x)))
        .collect();
    Ok(argmin(&values))
}

/// `Σ_y min_w Σ_x ℓ(w,x) π(x) C(x,y)`.
pub fn expected_loss_discrete(
    prior: &DiscreteDist,
    channel: &Channel,
    loss: &LossFunction,
) -> Result<f64> {
    if !same_support(prior.support(), channel.input_support()) {
        return Err(Error::SupportMismatch(
            "prior support differs from channel input support".into(),
        ));
    }
    let lm = loss.matrix(prior.support());
    let pi = prior.probs();
    let terms: Vec<f64> = (0..channel.n_outputs())
        .map(|y| {
            let col: Vec<f64> = (0..pi.len()).map(|x| pi[x] * channel.row(x)[y]).collect();
            let values: Vec<f64> = lm
                .iter()
                .map(|row| row.iter().zip(&col).map(|(l, c)| l * c).sum())
                .collect();
            argmin(&values).0
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// The same loss computed as the hyper expectation of `Y_ℓ`.
pub fn expected_loss_via_hyper(
    prior: &DiscreteDist,
    channel: &Channel,
    loss: &LossFunction,
) -> Result<f64> {
    let hyper = hyper_of(&push_joint(prior, channel)?);
    let values = hyper
        .inners()
        .iter()
        .map(|d| uncertainty(loss, d).map(|(v, _)| v))
        .collect::<Result<Vec<f64>>>()?;
    let terms: Vec<f64> = hyper
        .outers()
        .iter()
        .zip(&values)
        .map(|(o, v)| o * v)
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Expected loss for a discrete prior whose inputs produce hybrid outputs,
/// `rows[i]` being the output for `prior.support()[i]`.
pub fn expected_loss_hybrid(
    prior: &DiscreteDist,
    rows: &[HybridMeasure],
    loss: &LossFunction,
) -> Result<f64> {
    if rows.len() != prior.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} outputs for {} inputs",
            rows.len(),
            prior.len()
        )));
    }
    let lm = loss.matrix(prior.support());
    let coef: Vec<Vec<f64>> = lm
        .into_iter()
        .map(|row| row.iter().zip(prior.probs()).map(|(l, p)| l * p).collect())
        .collect();
    envelope_loss(&coef, rows)
}

/// `∫ min_w Σ_i coef[w][i] rows[i](dy)` over atoms and density.
///
/// Where every active density piece shares one rate r, each candidate is
/// `P e^{rt} + Q e^{-rt}`; after `u = e^{2rt}` the candidates are lines in u,
/// so the lower envelope is found by walking crossings and each stretch is
/// integrated in closed form. Other intervals fall back to quadrature.
pub fn envelope_loss(coef: &[Vec<f64>], rows: &[HybridMeasure]) -> Result<f64> {
    let nw = coef.len();
    if nw == 0 {
        return Err(Error::EmptyGuessSet);
    }
    if coef.iter().any(|c| c.len() != rows.len()) {
        return Err(Error::DimensionMismatch(
            "coefficient rows must match the outputs".into(),
        ));
    }
    let mut terms = Vec::new();

    let mut locs: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.atoms().iter().map(|(l, _)| *l))
        .collect();
    locs.sort_by(f64::total_cmp);
    locs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    let mut atom_mass = vec![vec![0.0; rows.len()]; locs.len()];
    for (i, row) in rows.iter().enumerate() {
        for &(l, m) in row.atoms() {
            let j = locs
                .iter()
                .position(|&x| (x - l).abs() <= 1e-12)
                .expect("location collected above");
            atom_mass[j][i] += m;
        }
    }
    for masses in &atom_mass {
        let values: Vec<f64> = coef
            .iter()
            .map(|c| c.iter().zip(masses).map(|(a, b)| a * b).sum())
            .collect();
        terms.push(argmin(&values).0);
    }

    let mut pts: Vec<f64> = rows.iter().flat_map(HybridMeasure::breakpoints).collect();
    if pts.is_empty() {
        return Ok(pairwise_sum(&terms));
    }
    pts.extend([0.0, 1.0]);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
    let n_intervals = pts.len() - 1;
    for win in pts.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        if hi - lo <= 1e-15 {
            continue;
        }
        let active: Vec<Vec<_>> = rows
            .iter()
            .map(|r| {
                r.pieces()
                    .iter()
                    .filter(|p| {
                        let (a, b) = p.bounds();
                        a <= lo + 1e-14 && hi <= b + 1e-14 && p.scale() > 0.0
                    })
                    .copied()
                    .collect()
            })
            .collect();
        let rates: Vec<f64> = active.iter().flatten().map(|p| p.rate()).collect();
        let Some(&r) = rates.first() else { continue };
        let same_rate = rates.iter().all(|&q| (q - r).abs() <= 1e-15 * r.max(1.0));
        let center_inside = active
            .iter()
            .flatten()
            .any(|p| p.center() > lo + 1e-14 && p.center() < hi - 1e-14);
        let h = hi - lo;
        if same_rate && r == 0.0 {
            let c: Vec<f64> = active
                .iter()
                .map(|ps| ps.iter().map(|p| p.scale()).sum())
                .collect();
            let values: Vec<f64> = coef
                .iter()
                .map(|cw| cw.iter().zip(&c).map(|(a, b)| a * b).sum())
                .collect();
            terms.push(argmin(&values).0 * h);
        } else if same_rate && !center_inside {
            let mut pq = vec![(0.0, 0.0); rows.len()];
            for (i, ps) in active.iter().enumerate() {
                for p in ps {
                    if p.center() <= lo + 1e-14 {
                        pq[i].1 += p.scale() * (-r * (lo - p.center()).max(0.0)).exp();
                    } else {
                        pq[i].0 += p.scale() * (-r * (p.center() - lo)).exp();
                    }
                }
            }
            let (p, q): (Vec<f64>, Vec<f64>) = coef
                .iter()
                .map(|cw| {
                    cw.iter()
                        .zip(&pq)
                        .fold((0.0, 0.0), |(sp, sq), (c, (a, b))| (sp + c * a, sq + c * b))
                })
                .unzip();
            terms.push(envelope_integral(&p, &q, r, h));
        } else {
            let v = integrate_adaptive(
                &[lo, hi],
                QUAD_TOL / n_intervals as f64,
                MAX_SEGMENTS,
                |y| {
                    let dens: Vec<f64> = active
                        .iter()
                        .map(|ps| ps.iter().map(|p| p.eval_unbounded(y)).sum())
                        .collect();
                    let values: Vec<f64> = coef
                        .iter()
                        .map(|cw| cw.iter().zip(&dens).map(|(a, b)| a * b).sum())
                        .collect();
                    argmin(&values).0
                },
            )?;
            terms.push(v);
        }
    }
    Ok(pairwise_sum(&terms))
}

/// `∫_0^h min_w (p_w e^{rt} + q_w e^{-rt}) dt` for r > 0.
fn envelope_integral(p: &[f64], q: &[f64], r: f64, h: f64) -> f64 {
    let u_end = (2.0 * r * h).exp();
    let start: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + b).collect();
    let min = start.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-14 * (1.0 + min.abs());
    // among ties at u = 1 take the line that stays lowest to the right
    let mut cur = (0..p.len())
        .filter(|&w| start[w] <= min + tol)
        .min_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)))
        .expect("nonempty");
    let piece = |w: usize, t0: f64, t1: f64| -> f64 {
        let d = t1 - t0;
        p[w] * (r * t0).exp() * (r * d).exp_m1() / r
            + q[w] * (-r * t0).exp() * -(-r * d).exp_m1() / r
    };
    let mut parts = Vec::new();
    let (mut t0, mut u0) = (0.0, 1.0);
    loop {
        let mut next: Option<(f64, usize)> = None;
        for v in 0..p.len() {
            if p[v] < p[cur] {
                let u = ((q[v] - q[cur]) / (p[cur] - p[v])).max(u0);
                let better = match next {
                    None => true,
                    Some((un, vn)) => u < un || (u == un && p[v] < p[vn]),
                };
                if u < u_end && better {
                    next = Some((u, v));
                }
            }
        }
        match next {
            None => {
                parts.push(piece(cur, t0, h));
                break;
            }
            Some((u, v)) => {
                let t1 = (u.ln() / (2.0 * r)).clamp(t0, h);
                parts.push(piece(cur, t0, t1));
                t0 = t1;
                u0 = u;
                cur = v;
            }
        }
    }
    pairwise_sum(&parts)
}

/// One slice of the x-integral: quadrature nodes with weights `w·π(x)`,
/// the exact prior mass of the slice, and `ℓ(w, ·)` on it.
struct XColumn {
    nodes: Vec<(f64, f64)>,
    mass: f64,
    losses: Vec<f64>,
}

struct XLayout<'a> {
    prior: &'a PiecewisePrior,
    loss: &'a LossFunction,
    gl: GaussLegendre,
    constant: bool,
}

impl<'a> XLayout<'a> {
    fn new(prior: &'a PiecewisePrior, loss: &'a LossFunction) -> Self {
        Self {
            prior,
            loss,
            gl: GaussLegendre::new(12 + prior.max_degree() / 2),
            constant: loss.kernel.piecewise_constant(),
        }
    }

    fn losses_at(&self, x: f64) -> Vec<f64> {
        (0..self.loss.guesses.len())
            .map(|w| self.loss.eval(w, x))
            .collect()
    }

    fn segment_columns(&self, a: f64, b: f64, out: &mut Vec<XColumn>) {
        if b <= a {
            return;
        }
        let nodes: Vec<(f64, f64)> = self
            .gl
            .mapped(a, b)
            .map(|(x, w)| (x, w * self.prior.density(x)))
            .collect();
        if self.constant {
            out.push(XColumn {
                losses: self.losses_at(0.5 * (a + b)),
                mass: self.prior.density_mass(a, b),
                nodes,
            });
        } else {
            for (x, wt) in nodes {
                out.push(XColumn {
                    nodes: vec![(x, wt)],
                    mass: wt,
                    losses: self.losses_at(x),
                });
            }
        }
    }

    fn atom_columns(&self) -> Vec<XColumn> {
        self.prior
            .atoms()
            .iter()
            .filter(|(_, m)| *m > 0.0)
            .map(|&(loc, m)| XColumn {
                nodes: vec![(loc, m)],
                mass: m,
                losses: self.losses_at(loc),
            })
            .collect()
    }
}

fn sorted_breaks(mut pts: Vec<f64>) -> Vec<f64> {
    pts.retain(|x| (0.0..=1.0).contains(x));
    pts.extend([0.0, 1.0]);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
    pts
}

fn x_breaks(
    prior: &PiecewisePrior,
    mech: &dyn ContinuousMechanism,
    loss: &LossFunction,
) -> Vec<f64> {
    let mut pts = prior.breakpoints();
    pts.extend(loss.x_breaks());
    pts.extend(mech.x_breaks());
    sorted_breaks(pts)
}

/// `∫ min_w ∫ ℓ(w,x) π(x) K(x)(dy) dx` over atoms and density of the outputs.
///
/// N-step mechanisms reduce to finite sums over cells followed by the exact
/// envelope integral; everything else goes through
/// [`expected_loss_quadrature`].
pub fn expected_loss_continuous(
    prior: &PiecewisePrior,
    mech: &dyn ContinuousMechanism,
    loss: &LossFunction,
) -> Result<f64> {
    let Some(cells) = mech.step_cells() else {
        return expected_loss_quadrature(prior, mech, loss);
    };
    let n = cells.len();
    let layout = XLayout::new(prior, loss);
    let nw = loss.guesses.len();
    let mut coef = vec![vec![0.0; n]; nw];
    let mut cols = Vec::new();
    for win in x_breaks(prior, mech, loss).windows(2) {
        let start = cols.len();
        layout.segment_columns(win[0], win[1], &mut cols);
        let k = cell_index(0.5 * (win[0] + win[1]), n);
        for col in &cols[start..] {
            for w in 0..nw {
                coef[w][k] += col.losses[w] * col.mass;
            }
        }
    }
    for (col, &(loc, _)) in layout
        .atom_columns()
        .iter()
        .zip(prior.atoms().iter().filter(|(_, m)| *m > 0.0))
    {
        let k = cell_index(loc, n);
        for w in 0..nw {
            coef[w][k] += col.losses[w] * col.mass;
        }
    }
    envelope_loss(&coef, cells)
}

/// The continuous expected loss by nested quadrature: Gauss-Legendre in x on
/// a fixed subdivision (re-split at the mechanism's kinks for each y) and
/// adaptive Gauss-Kronrod in y to absolute error [`QUAD_TOL`].
pub fn expected_loss_quadrature(
    prior: &PiecewisePrior,
    mech: &dyn ContinuousMechanism,
    loss: &LossFunction,
) -> Result<f64> {
    let layout = XLayout::new(prior, loss);
    let nw = loss.guesses.len();
    let breaks = x_breaks(prior, mech, loss);
    let mut cols = Vec::new();
    let mut segs = Vec::new();
    for win in breaks.windows(2) {
        let start = cols.len();
        layout.segment_columns(win[0], win[1], &mut cols);
        segs.push((win[0], win[1], start..cols.len()));
    }
    let atom_cols = layout.atom_columns();

    let mut terms = Vec::new();
    let n_locs = mech.atom_locations().len();
    if n_locs > 0 {
        let mut acc = vec![vec![0.0; nw]; n_locs];
        for col in cols.iter().chain(&atom_cols) {
            let mut aw = vec![0.0; n_locs];
            for &(x, wt) in &col.nodes {
                for (a, v) in aw.iter_mut().zip(mech.atom_weights(x)) {
                    *a += wt * v;
                }
            }
            for (j, a) in aw.iter().enumerate() {
                for w in 0..nw {
                    acc[j][w] += col.losses[w] * a;
                }
            }
        }
        terms.extend(acc.iter().map(|values| argmin(values).0));
    }

    if mech.has_density() {
        let add = |col: &XColumn, y: f64, acc: &mut [f64]| {
            let v: f64 = col
                .nodes
                .iter()
                .map(|&(x, wt)| wt * mech.density(x, y))
                .sum();
            if v != 0.0 {
                for (a, l) in acc.iter_mut().zip(&col.losses) {
                    *a += l * v;
                }
            }
        };
        let integrand = |y: f64| {
            let mut acc = vec![0.0; nw];
            let kinks = mech.x_kinks(y);
            let mut tmp = Vec::new();
            for (a, b, range) in &segs {
                let mut inside: Vec<f64> = kinks
                    .iter()
                    .copied()
                    .filter(|k| *a < *k && *k < *b)
                    .collect();
                if inside.is_empty() {
                    for col in &cols[range.clone()] {
                        add(col, y, &mut acc);
                    }
                } else {
                    inside.sort_by(f64::total_cmp);
                    let mut pts = vec![*a];
                    pts.extend(inside);
                    pts.push(*b);
                    tmp.clear();
                    for w in pts.windows(2) {
                        layout.segment_columns(w[0], w[1], &mut tmp);
                    }
                    for col in &tmp {
                        add(col, y, &mut acc);
                    }
                }
            }
            for col in &atom_cols {
                add(col, y, &mut acc);
            }
            argmin(&acc).0
        };
        let mut ybreaks = breaks.clone();
        ybreaks.extend(mech.y_breaks());
        let ybreaks = sorted_breaks(ybreaks);
        terms.push(integrate_adaptive(
            &ybreaks,
            QUAD_TOL,
            MAX_SEGMENTS,
            integrand,
        )?);
    }
    Ok(pairwise_sum(&terms))
}

/// `ℓ*(w, x) = ℓ(w, x) π_N(x) / 𝓊(x)` together with the reference prior 𝓊,
/// so that `Loss(𝓊, M, ℓ*) = Loss(π_N, M, ℓ)`.
#[derive(Debug, Clone)]
pub struct WeightedLoss {
    pub loss: LossFunction,
    pub reference: DiscreteDist,
    /// κ of the original loss.
    pub kappa_of_loss: Option<f64>,
    /// Product-rule bound on the grid Lipschitz constant of ℓ*.
    pub kappa_product_bound: Option<f64>,
}

/// Weight a loss by a pixelated prior. 𝓊 is uniform on the N cells
/// `0..N-1` when `π_N(1) = 0` (then the weight is `π_N(x)·N`), and uniform
/// on all of U_N otherwise.
pub fn weight_loss_for_prior(
    loss: &LossFunction,
    prior_n: &DiscreteDist,
    n: usize,
) -> Result<WeightedLoss> {
    let grid = Grid::new(n)?;
    let pts = grid.points();
    if !same_support(prior_n.support(), &pts) {
        return Err(Error::SupportMismatch(format!("prior is not on U_{n}")));
    }
    let pi = prior_n.probs();
    let live = if pi[n] == 0.0 { n } else { n + 1 };
    let mut reference = vec![1.0 / live as f64; live];
    reference.resize(n + 1, 0.0);
    let weights: Vec<f64> = pi.iter().map(|p| p * live as f64).collect();
    let sup = loss.sup_on(&pts);
    let max_pi = pi.iter().copied().fold(0.0, f64::max);
    let lip_pi = pi
        .windows(2)
        .map(|w| (w[1] - w[0]).abs() * n as f64)
        .fold(0.0, f64::max);
    let kappa_product_bound = loss
        .kappa
        .map(|k| k * live as f64 * max_pi + sup * live as f64 * lip_pi);
    let weighted = LossFunction {
        label: format!("{}*", loss.label),
        guesses: loss.guesses.clone(),
        kernel: Kernel::Weighted {
            n,
            weights,
            inner: Box::new(loss.kernel.clone()),
        },
        kappa: kappa_product_bound,
    };
    Ok(WeightedLoss {
        loss: weighted,
        reference: DiscreteDist::new(pts, reference)?,
        kappa_of_loss: loss.kappa,
        kappa_product_bound,
    })
}
