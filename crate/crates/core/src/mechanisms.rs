//! The concrete mechanisms: truncated Geometric on a grid, truncated Laplace
//! on [0, 1], its output-pixelated channel, and privacy checks.

use crate::error::{Error, Result};
use crate::measure::{hybrid_max_divergence, DensityPiece, HybridMeasure};
use crate::prob::{make_channel, max_divergence_probs, Channel, Grid};

/// Relative slack on the DP inequality.
pub const TOL_DP: f64 = 1e-9;

/// Privacy parameter ε > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonParams {
    epsilon: f64,
}

impl EpsilonParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidEpsilon(epsilon));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// α = e^{-ε}.
    pub fn alpha(&self) -> f64 {
        (-self.epsilon).exp()
    }
}

/// Truncated Geometric mechanism restricted to the grid U_N.
///
/// Grid steps use α' = e^{-ε/N}. Interior outputs get
/// `(1-α')/(1+α') α'^{|k|}`; the tails beyond 0 and 1 are folded onto the
/// boundary outputs, which sum in closed form to `α'^d / (1+α')`.
pub fn geometric_channel(eps: EpsilonParams, n: usize) -> Result<Channel> {
    let grid = Grid::new(n)?;
    let a = (-eps.epsilon() / n as f64).exp();
    let interior = (1.0 - a) / (1.0 + a);
    let pow = |k: usize| a.powi(k as i32);
    let rows = (0..=n)
        .map(|i| {
            (0..=n)
                .map(|j| {
                    if j == 0 {
                        pow(i) / (1.0 + a)
                    } else if j == n {
                        pow(n - i) / (1.0 + a)
                    } else {
                        interior * pow(i.abs_diff(j))
                    }
                })
                .collect()
        })
        .collect();
    make_channel(grid.points(), grid.points(), rows)
}

/// Laplace density `(ε/2) e^{-ε|y-x|}`.
pub fn laplace_density(eps: EpsilonParams, x: f64, y: f64) -> f64 {
    0.5 * eps.epsilon() * (-eps.epsilon() * (y - x).abs()).exp()
}

/// Laplace output at `x` with the mass outside [0, 1] moved onto atoms at
/// 0 and 1 (weights `e^{-εx}/2` and `e^{-ε(1-x)}/2`).
pub fn truncated_laplace(eps: EpsilonParams, x: f64) -> Result<HybridMeasure> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfRange(x));
    }
    let e = eps.epsilon();
    let atoms = vec![
        (0.0, 0.5 * (-e * x).exp()),
        (1.0, 0.5 * (-e * (1.0 - x)).exp()),
    ];
    let mut pieces = Vec::with_capacity(2);
    if x > 0.0 {
        pieces.push(DensityPiece::exp(0.0, x, 0.5 * e, e, x));
    }
    if x < 1.0 {
        pieces.push(DensityPiece::exp(x, 1.0, 0.5 * e, e, x));
    }
    HybridMeasure::new(atoms, pieces)
}

/// Truncated Laplace on inputs U_N with outputs batched into T cells:
/// output `k/T` collects `[k/T, (k+1)/T)`, the last one `[1-1/T, 1]`.
pub fn t_pixelated_laplace(eps: EpsilonParams, n: usize, t: usize) -> Result<Channel> {
    let inputs = Grid::new(n)?;
    if t == 0 {
        return Err(Error::InvalidT);
    }
    let outputs = Grid::new(t)?;
    let rows = inputs
        .points()
        .into_iter()
        .map(|x| {
            let m = truncated_laplace(eps, x)?;
            Ok(pixelate_output(&m, t))
        })
        .collect::<Result<Vec<_>>>()?;
    make_channel(inputs.points(), outputs.points(), rows)
}

/// Batch a measure on [0, 1] into T cells, left points labelling them.
pub fn pixelate_output(m: &HybridMeasure, t: usize) -> Vec<f64> {
    (0..t)
        .map(|k| {
            let lo = k as f64 / t as f64;
            let hi = (k + 1) as f64 / t as f64;
            m.mass(lo, hi, k + 1 == t)
        })
        .chain(std::iter::once(0.0))
        .collect()
}

/// Outcome of a DP check on a channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpReport {
    pub holds: bool,
    /// Largest divergence per unit of input distance over all input pairs.
    pub tightness: f64,
}

/// Check `D(M(x1), M(x2)) <= ε |x1 - x2|` for every pair of inputs.
pub fn verify_dp(channel: &Channel, eps: EpsilonParams) -> DpReport {
    let xs = channel.input_support();
    let tightness = pairwise_tightness(xs, |i, j| {
        max_divergence_probs(channel.row(i), channel.row(j))
    });
    DpReport {
        holds: tightness <= eps.epsilon() * (1.0 + TOL_DP),
        tightness,
    }
}

/// The same check for rows given as hybrid measures.
pub fn verify_dp_hybrid(inputs: &[f64], rows: &[HybridMeasure], eps: EpsilonParams) -> DpReport {
    let tightness = pairwise_tightness(inputs, |i, j| hybrid_max_divergence(&rows[i], &rows[j]));
    DpReport {
        holds: tightness <= eps.epsilon() * (1.0 + TOL_DP),
        tightness,
    }
}

fn pairwise_tightness(xs: &[f64], mut div: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let d = div(i, j);
            let dist = (xs[i] - xs[j]).abs();
            let ratio = if d == 0.0 {
                0.0
            } else if dist == 0.0 {
                f64::INFINITY
            } else {
                d / dist
            };
            worst = worst.max(ratio);
        }
    }
    worst
}

/// Sampled DP tightness of the continuous truncated Laplace.
///
/// Evaluates density and atom log-ratios over 2001 input pairs and 2001
/// output points and returns the largest ratio per unit input distance.
pub fn continuous_dp_tightness(eps: EpsilonParams) -> f64 {
    const POINTS: usize = 2001;
    let step = 1.0 / (POINTS - 1) as f64;
    let e = eps.epsilon();
    // pairs (t, 1-t) cover every distance; adjacent pairs probe the local slope
    let mut pairs: Vec<(f64, f64)> = (0..POINTS)
        .map(|i| (i as f64 * step, 1.0 - i as f64 * step))
        .filter(|(a, b)| a != b)
        .collect();
    pairs.extend((0..POINTS - 1).map(|i| (i as f64 * step, (i + 1) as f64 * step)));
    let ys: Vec<f64> = (0..POINTS).map(|i| i as f64 * step).collect();
    let mut worst: f64 = 0.0;
    for (x1, x2) in pairs {
        let dist = (x1 - x2).abs();
        let mut d: f64 = 0.0;
        // atoms at 0 and 1
        d = d.max((e * (x2 - x1)).abs());
        d = d.max((e * ((1.0 - x2) - (1.0 - x1))).abs());
        for &y in &ys {
            let r = (laplace_density(eps, x1, y) / laplace_density(eps, x2, y)).ln();
            d = d.max(r.abs());
        }
        worst = worst.max(d / dist);
    }
    worst
}
