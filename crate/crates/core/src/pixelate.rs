//! Moving between [0, 1] and the grid U_N: pixelated priors, the N-floor
//! map, and N-step lifting of mechanisms and losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossFunction;
use crate::measure::HybridMeasure;
use crate::mechanisms::{truncated_laplace, verify_dp_hybrid, DpReport, EpsilonParams};
use crate::num::pairwise_sum;
use crate::prob::{make_channel, Channel, DiscreteDist, Grid, TOL_SUM};

/// Index k of the cell `[k/N, (k+1)/N)` holding `x`, so that grid points
/// map to themselves despite rounding. Returns N for x = 1.
pub fn floor_index(x: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut k = (x * nf).floor().max(0.0) as usize;
    if k > n {
        k = n;
    }
    if k < n && (k + 1) as f64 / nf <= x {
        k += 1;
    }
    if k > 0 && k as f64 / nf > x {
        k -= 1;
    }
    k
}

/// Cell used by an N-step function at `x`; the point 1 shares the last cell.
pub fn cell_index(x: f64, n: usize) -> usize {
    floor_index(x, n).min(n - 1)
}

/// `⌊Nx⌋ / N`.
pub fn nfloor(x: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidN);
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfRange(x));
    }
    Ok(floor_index(x, n) as f64 / n as f64)
}

/// A polynomial density `Σ coeffs[k] x^k` on `[from, to)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyPiece {
    pub from: f64,
    pub to: f64,
    pub coeffs: Vec<f64>,
}

impl PolyPiece {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    fn antiderivative(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * x + c / (k + 1) as f64)
            * x
    }

    /// Exact integral over `[a, b]` clipped to the piece.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let lo = a.max(self.from);
        let hi = b.min(self.to);
        if hi <= lo {
            return 0.0;
        }
        self.antiderivative(hi) - self.antiderivative(lo)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }
}

/// A prior on [0, 1]: piecewise-polynomial density plus optional atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrior", into = "RawPrior")]
pub struct PiecewisePrior {
    pieces: Vec<PolyPiece>,
    atoms: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct RawPrior {
    pieces: Vec<PolyPiece>,
    #[serde(default)]
    atoms: Vec<(f64, f64)>,
}

impl TryFrom<RawPrior> for PiecewisePrior {
    type Error = Error;
    fn try_from(raw: RawPrior) -> Result<Self> {
        PiecewisePrior::new(raw.pieces, raw.atoms)
    }
}

impl From<PiecewisePrior> for RawPrior {
    fn from(p: PiecewisePrior) -> Self {
        RawPrior {
            pieces: p.pieces,
            atoms: p.atoms,
        }
    }
}

impl PiecewisePrior {
    pub fn new(pieces: Vec<PolyPiece>, atoms: Vec<(f64, f64)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidPrior("no pieces".into()));
        }
        if pieces[0].from != 0.0 || pieces.last().map(|p| p.to) != Some(1.0) {
            return Err(Error::InvalidPrior("pieces must cover [0, 1]".into()));
        }
        for w in pieces.windows(2) {
            if w[0].to != w[1].from {
                return Err(Error::InvalidPrior(format!(
                    "gap or overlap at {} / {}",
                    w[0].to, w[1].from
                )));
            }
        }
        for p in &pieces {
            if !(p.from < p.to) || p.coeffs.is_empty() {
                return Err(Error::InvalidPrior(format!(
                    "empty piece [{}, {})",
                    p.from, p.to
                )));
            }
            // linear pieces are checked exactly at the ends; higher degrees on a dense sample
            let samples = if p.degree() <= 1 { 1 } else { 512 };
            for i in 0..=samples {
                let x = p.from + (p.to - p.from) * i as f64 / samples as f64;
                if p.eval(x) < -1e-12 {
                    return Err(Error::InvalidPrior(format!("negative density at {x}")));
                }
            }
        }
        for &(loc, m) in &atoms {
            if !(0.0..=1.0).contains(&loc) {
                return Err(Error::OutOfRange(loc));
            }
            if !(m >= 0.0) {
                return Err(Error::InvalidPrior(format!("atom mass {m}")));
            }
        }
        let prior = Self { pieces, atoms };
        let total = prior.mass(0.0, 1.0, true);
        if (total - 1.0).abs() > TOL_SUM {
            return Err(Error::InvalidPrior(format!("total mass {total}")));
        }
        Ok(prior)
    }

    pub fn uniform() -> Self {
        Self::new(
            vec![PolyPiece {
                from: 0.0,
                to: 1.0,
                coeffs: vec![1.0],
            }],
            Vec::new(),
        )
        .expect("uniform prior is valid")
    }

    /// A single polynomial density on [0, 1].
    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![PolyPiece {
                from: 0.0,
                to: 1.0,
                coeffs,
            }],
            Vec::new(),
        )
    }

    /// All mass on one point.
    pub fn point(loc: f64) -> Result<Self> {
        Self::new(
            vec![PolyPiece {
                from: 0.0,
                to: 1.0,
                coeffs: vec![0.0],
            }],
            vec![(loc, 1.0)],
        )
    }

    pub fn pieces(&self) -> &[PolyPiece] {
        &self.pieces
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn density(&self, x: f64) -> f64 {
        self.pieces
            .iter()
            .find(|p| p.from <= x && (x < p.to || (p.to == 1.0 && x == 1.0)))
            .map_or(0.0, |p| p.eval(x))
    }

    /// Mass of `[a, b)`, or `[a, b]` when `closed`.
    pub fn mass(&self, a: f64, b: f64, closed: bool) -> f64 {
        let mut parts: Vec<f64> = self.pieces.iter().map(|p| p.integral(a, b)).collect();
        parts.extend(
            self.atoms
                .iter()
                .filter(|(l, _)| *l >= a && (*l < b || (closed && *l <= b)))
                .map(|(_, m)| *m),
        );
        pairwise_sum(&parts)
    }

    /// Mass of the density part alone over `[a, b]`.
    pub fn density_mass(&self, a: f64, b: f64) -> f64 {
        let parts: Vec<f64> = self.pieces.iter().map(|p| p.integral(a, b)).collect();
        pairwise_sum(&parts)
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.pieces.iter().map(|p| p.from).collect();
        pts.push(1.0);
        pts
    }

    pub fn max_degree(&self) -> usize {
        self.pieces.iter().map(PolyPiece::degree).max().unwrap_or(0)
    }
}

/// Gather each cell's mass onto its left grid point; the point 1 gets 0 and
/// the last cell is closed so an atom at 1 lands on (N-1)/N.
pub fn pixelate_prior(prior: &PiecewisePrior, n: usize) -> Result<DiscreteDist> {
    let grid = Grid::new(n)?;
    let nf = n as f64;
    let mut probs: Vec<f64> = (0..n)
        .map(|k| prior.mass(k as f64 / nf, (k + 1) as f64 / nf, k + 1 == n))
        .collect();
    probs.push(0.0);
    DiscreteDist::new(grid.points(), probs)
}

/// A function on [0, 1] that is constant on each `[n/N, (n+1)/N)`, with the
/// point 1 taking the last cell's value.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepFunction<T> {
    n: usize,
    cells: Vec<T>,
}

impl<T> NStepFunction<T> {
    pub fn new(n: usize, cells: Vec<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidN);
        }
        if cells.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} cell payloads for N = {n}",
                cells.len()
            )));
        }
        Ok(Self { n, cells })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn eval(&self, x: f64) -> &T {
        &self.cells[cell_index(x.clamp(0.0, 1.0), self.n)]
    }
}

/// A mechanism with inputs in [0, 1] and outputs that are hybrid measures
/// with a fixed set of atom locations.
pub trait ContinuousMechanism: Sync {
    fn output(&self, x: f64) -> Result<HybridMeasure>;

    /// Atom locations shared by every output.
    fn atom_locations(&self) -> Vec<f64>;

    /// Atom weights at input `x`, aligned with `atom_locations`.
    fn atom_weights(&self, x: f64) -> Vec<f64> {
        let out = self.output(x).expect("mechanism defined on [0, 1]");
        self.atom_locations()
            .iter()
            .map(|&l| out.atom_weight(l))
            .collect()
    }

    fn has_density(&self) -> bool;

    /// Density of the output at `y` for input `x`.
    fn density(&self, x: f64, y: f64) -> f64 {
        self.output(x).map_or(0.0, |m| m.density(y))
    }

    /// Inputs where `density(·, y)` is not smooth.
    fn x_kinks(&self, _y: f64) -> Vec<f64> {
        Vec::new()
    }

    /// Outputs where the density may be non-smooth for some input.
    fn y_breaks(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Inputs where the mechanism may jump, independent of the output.
    fn x_breaks(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Cell payloads when the mechanism is an N-step function of its input.
    fn step_cells(&self) -> Option<&[HybridMeasure]> {
        None
    }
}

/// The truncated Laplace mechanism as a continuous-input mechanism.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedLaplace {
    pub eps: EpsilonParams,
}

impl ContinuousMechanism for TruncatedLaplace {
    fn output(&self, x: f64) -> Result<HybridMeasure> {
        truncated_laplace(self.eps, x)
    }

    fn atom_locations(&self) -> Vec<f64> {
        vec![0.0, 1.0]
    }

    fn atom_weights(&self, x: f64) -> Vec<f64> {
        let e = self.eps.epsilon();
        vec![0.5 * (-e * x).exp(), 0.5 * (-e * (1.0 - x)).exp()]
    }

    fn has_density(&self) -> bool {
        true
    }

    fn density(&self, x: f64, y: f64) -> f64 {
        crate::mechanisms::laplace_density(self.eps, x, y)
    }

    fn x_kinks(&self, y: f64) -> Vec<f64> {
        vec![y]
    }
}

impl ContinuousMechanism for NStepFunction<HybridMeasure> {
    fn output(&self, x: f64) -> Result<HybridMeasure> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutOfRange(x));
        }
        Ok(self.eval(x).clone())
    }

    fn atom_locations(&self) -> Vec<f64> {
        let mut locs: Vec<f64> = self
            .cells
            .iter()
            .flat_map(|m| m.atoms().iter().map(|(l, _)| *l))
            .collect();
        locs.sort_by(f64::total_cmp);
        locs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        locs
    }

    fn atom_weights(&self, x: f64) -> Vec<f64> {
        let m = self.eval(x);
        self.atom_locations()
            .iter()
            .map(|&l| m.atom_weight(l))
            .collect()
    }

    fn has_density(&self) -> bool {
        self.cells.iter().any(HybridMeasure::has_density)
    }

    fn density(&self, x: f64, y: f64) -> f64 {
        self.eval(x).density(y)
    }

    fn y_breaks(&self) -> Vec<f64> {
        self.cells.iter().flat_map(|m| m.breakpoints()).collect()
    }

    fn x_breaks(&self) -> Vec<f64> {
        (0..=self.n).map(|k| k as f64 / self.n as f64).collect()
    }

    fn step_cells(&self) -> Option<&[HybridMeasure]> {
        Some(&self.cells)
    }
}

/// Lift a channel on U_N to an N-step mechanism on [0, 1]:
/// `M_N(x) = M(⌊x⌋_N)` for x < 1 and `M((N-1)/N)` at x = 1.
pub fn nstep_channel(channel: &Channel, n: usize) -> Result<NStepFunction<HybridMeasure>> {
    let grid = Grid::new(n)?;
    if !crate::prob::same_support(channel.input_support(), &grid.points()) {
        return Err(Error::SupportMismatch(format!(
            "channel inputs are not U_{n}"
        )));
    }
    let cells = (0..n)
        .map(|i| HybridMeasure::discrete(channel.output_support(), channel.row(i)))
        .collect::<Result<Vec<_>>>()?;
    NStepFunction::new(n, cells)
}

/// N-step version of a loss in its x argument.
pub fn nstep_loss(loss: &LossFunction, n: usize) -> Result<LossFunction> {
    loss.stepped(n)
}

/// A continuous mechanism evaluated only on the grid U_N.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedMechanism {
    grid: Grid,
    rows: Vec<HybridMeasure>,
}

impl RestrictedMechanism {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn inputs(&self) -> Vec<f64> {
        self.grid.points()
    }

    /// One output per grid point, including the point 1.
    pub fn rows(&self) -> &[HybridMeasure] {
        &self.rows
    }

    /// The N-step mechanism built from this restriction.
    pub fn lift(&self) -> NStepFunction<HybridMeasure> {
        NStepFunction {
            n: self.grid.n_intervals(),
            cells: self.rows[..self.grid.n_intervals()].to_vec(),
        }
    }

    pub fn verify_dp(&self, eps: EpsilonParams) -> DpReport {
        verify_dp_hybrid(&self.inputs(), &self.rows, eps)
    }

    /// The rows as a channel when every output is purely atomic on the same
    /// locations.
    pub fn to_channel(&self) -> Option<Channel> {
        if self.rows.iter().any(HybridMeasure::has_density) {
            return None;
        }
        let mut locs: Vec<f64> = self
            .rows
            .iter()
            .flat_map(|m| m.atoms().iter().map(|(l, _)| *l))
            .collect();
        locs.sort_by(f64::total_cmp);
        locs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        let rows = self
            .rows
            .iter()
            .map(|m| locs.iter().map(|&l| m.atom_weight(l)).collect())
            .collect();
        make_channel(self.inputs(), locs, rows).ok()
    }
}

/// Evaluate a continuous mechanism at the grid points of U_N.
pub fn restrict_continuous_mechanism(
    mech: &dyn ContinuousMechanism,
    n: usize,
) -> Result<RestrictedMechanism> {
    let grid = Grid::new(n)?;
    let rows = grid
        .points()
        .into_iter()
        .map(|x| {
            mech.output(x)
                .map_err(|e| Error::EvaluationFailure(format!("at x = {x}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RestrictedMechanism { grid, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::geometric_channel;

    fn eps(e: f64) -> EpsilonParams {
        EpsilonParams::new(e).unwrap()
    }

    #[test]
    fn nfloor_examples() {
        assert_eq!(nfloor(0.3, 2).unwrap(), 0.0);
        assert_eq!(nfloor(0.5, 2).unwrap(), 0.5);
        assert_eq!(nfloor(1.0, 2).unwrap(), 1.0);
        assert!(matches!(nfloor(1.2, 2), Err(Error::OutOfRange(_))));
        assert!(matches!(nfloor(-0.1, 2), Err(Error::OutOfRange(_))));
        // every computed grid point is a fixed point
        for n in 1..200 {
            for i in 0..=n {
                let x = i as f64 / n as f64;
                assert_eq!(floor_index(x, n), i, "{i}/{n}");
            }
        }
    }

    #[test]
    fn pixelate_uniform() {
        let p = pixelate_prior(&PiecewisePrior::uniform(), 2).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn pixelate_atom_at_one() {
        let prior = PiecewisePrior::point(1.0).unwrap();
        for n in [1, 2, 5] {
            let p = pixelate_prior(&prior, n).unwrap();
            let mut expect = vec![0.0; n + 1];
            expect[n - 1] = 1.0;
            assert_eq!(p.probs(), &expect[..]);
        }
    }

    #[test]
    fn pixelate_cells_are_exact_integrals() {
        // density 3x^2 on [0,1): cell masses ((k+1)^3 - k^3) / N^3
        let prior = PiecewisePrior::polynomial(vec![0.0, 0.0, 3.0]).unwrap();
        let n = 7;
        let p = pixelate_prior(&prior, n).unwrap();
        for k in 0..n {
            let exact = (((k + 1).pow(3) - k.pow(3)) as f64) / (n.pow(3) as f64);
            assert!((p.probs()[k] - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_validation_and_json() {
        let text = r#"{"pieces":[{"from":0,"to":0.5,"coeffs":[1.5]},{"from":0.5,"to":1,"coeffs":[0.5]}],"atoms":[[1.0,0.0]]}"#;
        let prior: PiecewisePrior = serde_json::from_str(text).unwrap();
        assert!((prior.mass(0.0, 0.5, false) - 0.75).abs() < 1e-15);
        let bad_mass = r#"{"pieces":[{"from":0,"to":1,"coeffs":[2.0]}]}"#;
        assert!(serde_json::from_str::<PiecewisePrior>(bad_mass).is_err());
        let negative = r#"{"pieces":[{"from":0,"to":1,"coeffs":[2.0,-2.0,0.0]}],"atoms":[]}"#;
        // mass 1 but 2 - 2x ... is fine; make it dip below zero
        let _ = negative;
        let dipping = PiecewisePrior::polynomial(vec![1.5, -3.0, 3.0]);
        assert!(dipping.is_ok());
        let below = PiecewisePrior::polynomial(vec![-0.5, 3.0]);
        assert!(matches!(below, Err(Error::InvalidPrior(_))));
        let gap = PiecewisePrior::new(
            vec![
                PolyPiece {
                    from: 0.0,
                    to: 0.4,
                    coeffs: vec![1.0],
                },
                PolyPiece {
                    from: 0.5,
                    to: 1.0,
                    coeffs: vec![1.2],
                },
            ],
            vec![],
        );
        assert!(gap.is_err());
    }

    #[test]
    fn nstep_channel_evaluation() {
        let g = geometric_channel(eps(1.0), 2).unwrap();
        let lifted = nstep_channel(&g, 2).unwrap();
        let at = |x: f64| lifted.output(x).unwrap();
        let row = |i: usize| HybridMeasure::discrete(g.output_support(), g.row(i)).unwrap();
        assert_eq!(at(0.7), row(1));
        assert_eq!(at(1.0), row(1));
        assert_eq!(at(0.0), row(0));
        assert_eq!(at(0.5), row(1));
        // restricting the lift reproduces the channel below the point 1
        let back = restrict_continuous_mechanism(&lifted, 2).unwrap();
        for i in 0..2 {
            assert_eq!(back.rows()[i], row(i));
        }
        let other = geometric_channel(eps(1.0), 3).unwrap();
        assert!(matches!(
            nstep_channel(&other, 2),
            Err(Error::SupportMismatch(_))
        ));
    }

    #[test]
    fn restriction_of_laplace() {
        let k = TruncatedLaplace { eps: eps(1.5) };
        let r = restrict_continuous_mechanism(&k, 4).unwrap();
        assert_eq!(r.rows().len(), 5);
        assert_eq!(r.rows()[2], truncated_laplace(eps(1.5), 0.5).unwrap());
        assert!(r.verify_dp(eps(1.5)).holds);
        assert!(r.to_channel().is_none());
        // a step mechanism restricted then lifted behaves identically
        let lifted = r.lift();
        let again = restrict_continuous_mechanism(&lifted, 4).unwrap().lift();
        assert_eq!(lifted, again);
        for x in [0.0, 0.1, 0.3, 0.61, 0.99, 1.0] {
            assert_eq!(lifted.output(x).unwrap(), again.output(x).unwrap());
        }
    }

    #[test]
    fn restricted_channel_round_trip() {
        let g = geometric_channel(eps(0.7), 4).unwrap();
        let lifted = nstep_channel(&g, 4).unwrap();
        let r = restrict_continuous_mechanism(&lifted, 4).unwrap();
        let c = r.to_channel().unwrap();
        for i in 0..4 {
            assert_eq!(c.row(i), g.row(i));
        }
    }
}
