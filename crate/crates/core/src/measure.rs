//! Measures on [0, 1] made of point masses plus a piecewise exponential density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::pairwise_sum;
use crate::prob::TOL_SUM;

/// One piece of a density: `scale * exp(-rate * |y - center|)` on `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DensityPiece {
    Exp {
        from: f64,
        to: f64,
        scale: f64,
        rate: f64,
        center: f64,
    },
}

impl DensityPiece {
    pub fn exp(from: f64, to: f64, scale: f64, rate: f64, center: f64) -> Self {
        DensityPiece::Exp {
            from,
            to,
            scale,
            rate,
            center,
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            DensityPiece::Exp { from, to, .. } => (from, to),
        }
    }

    pub fn rate(&self) -> f64 {
        match *self {
            DensityPiece::Exp { rate, .. } => rate,
        }
    }

    pub fn center(&self) -> f64 {
        match *self {
            DensityPiece::Exp { center, .. } => center,
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            DensityPiece::Exp { scale, .. } => scale,
        }
    }

    /// Density value at `y`, ignoring the piece bounds.
    pub fn eval_unbounded(&self, y: f64) -> f64 {
        match *self {
            DensityPiece::Exp {
                scale,
                rate,
                center,
                ..
            } => scale * (-rate * (y - center).abs()).exp(),
        }
    }

    /// Integral over `[a, b]` intersected with the piece's support.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let (from, to) = self.bounds();
        let lo = a.max(from);
        let hi = b.min(to);
        if hi <= lo {
            return 0.0;
        }
        let DensityPiece::Exp {
            scale,
            rate,
            center,
            ..
        } = *self;
        if rate == 0.0 {
            return scale * (hi - lo);
        }
        // split at the mode so each part is a monotone exponential
        let mut total = 0.0;
        if lo < center {
            let h = hi.min(center);
            // ∫_lo^h e^{-r(c-y)} dy = e^{-r(c-h)} (1 - e^{-r(h-lo)}) / r
            total += (-rate * (center - h)).exp() * -(-rate * (h - lo)).exp_m1() / rate;
        }
        if hi > center {
            let l = lo.max(center);
            total += (-rate * (l - center)).exp() * -(-rate * (hi - l)).exp_m1() / rate;
        }
        scale * total
    }
}

/// A probability measure on [0, 1]: atoms plus a piecewise density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHybrid")]
pub struct HybridMeasure {
    atoms: Vec<(f64, f64)>,
    pieces: Vec<DensityPiece>,
}

#[derive(Deserialize)]
struct RawHybrid {
    atoms: Vec<(f64, f64)>,
    pieces: Vec<DensityPiece>,
}

impl TryFrom<RawHybrid> for HybridMeasure {
    type Error = Error;
    fn try_from(raw: RawHybrid) -> Result<Self> {
        HybridMeasure::new(raw.atoms, raw.pieces)
    }
}

impl HybridMeasure {
    pub fn new(atoms: Vec<(f64, f64)>, pieces: Vec<DensityPiece>) -> Result<Self> {
        for &(loc, w) in &atoms {
            if !(0.0..=1.0).contains(&loc) {
                return Err(Error::OutOfRange(loc));
            }
            if !(w >= 0.0) {
                return Err(Error::InvalidDistribution(format!("atom weight {w}")));
            }
        }
        for p in &pieces {
            let (a, b) = p.bounds();
            if !(0.0 <= a && a <= b && b <= 1.0) || !(p.scale() >= 0.0) || !(p.rate() >= 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "bad density piece {p:?}"
                )));
            }
        }
        let m = Self { atoms, pieces };
        let total = m.total_mass();
        if (total - 1.0).abs() > TOL_SUM {
            return Err(Error::InvalidDistribution(format!(
                "hybrid measure has total mass {total}"
            )));
        }
        Ok(m)
    }

    /// A purely atomic measure.
    pub fn discrete(locations: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(
            locations
                .iter()
                .copied()
                .zip(weights.iter().copied())
                .collect(),
            Vec::new(),
        )
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn pieces(&self) -> &[DensityPiece] {
        &self.pieces
    }

    pub fn has_density(&self) -> bool {
        !self.pieces.is_empty()
    }

    pub fn atom_weight(&self, loc: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|(l, _)| (*l - loc).abs() <= 1e-12)
            .map(|(_, w)| *w)
            .sum()
    }

    pub fn density(&self, y: f64) -> f64 {
        self.pieces
            .iter()
            .filter(|p| {
                let (a, b) = p.bounds();
                a <= y && (y < b || (b == 1.0 && y == 1.0))
            })
            .map(|p| p.eval_unbounded(y))
            .sum()
    }

    pub fn density_mass(&self, a: f64, b: f64) -> f64 {
        let parts: Vec<f64> = self.pieces.iter().map(|p| p.integral(a, b)).collect();
        pairwise_sum(&parts)
    }

    /// Mass of `[a, b)`, or of `[a, b]` when `closed` is set.
    pub fn mass(&self, a: f64, b: f64, closed: bool) -> f64 {
        let atom_mass: f64 = self
            .atoms
            .iter()
            .filter(|(l, _)| *l >= a && (*l < b || (closed && *l <= b)))
            .map(|(_, w)| *w)
            .sum();
        atom_mass + self.density_mass(a, b)
    }

    pub fn total_mass(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|(_, w)| w).sum();
        atoms + self.density_mass(0.0, 1.0)
    }

    /// Points where the density changes form: piece ends and modes.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts = Vec::new();
        for p in &self.pieces {
            let (a, b) = p.bounds();
            pts.extend([a, b, p.center().clamp(0.0, 1.0)]);
        }
        pts
    }
}

/// Max divergence between two hybrid measures.
///
/// Atoms are compared by location. On every interval between breakpoints
/// both densities are single exponentials, so their log-ratio is linear and
/// its extremes sit at the interval ends.
pub fn hybrid_max_divergence(a: &HybridMeasure, b: &HybridMeasure) -> f64 {
    let mut worst: f64 = 0.0;
    let mut locs: Vec<f64> = a.atoms.iter().chain(&b.atoms).map(|(l, _)| *l).collect();
    locs.sort_by(f64::total_cmp);
    locs.dedup_by(|x, y| (*x - *y).abs() <= 1e-12);
    for loc in locs {
        let (p, q) = (a.atom_weight(loc), b.atom_weight(loc));
        match (p > 0.0, q > 0.0) {
            (false, false) => {}
            (true, true) => worst = worst.max((p / q).ln().abs()),
            _ => return f64::INFINITY,
        }
    }
    let mut pts: Vec<f64> = a.breakpoints();
    pts.extend(b.breakpoints());
    pts.extend([0.0, 1.0]);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|x, y| (*x - *y).abs() <= 1e-15);
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 1e-15 {
            continue;
        }
        let inside = |m: &HybridMeasure, y: f64| -> f64 {
            // evaluate the piece covering the open interval (lo, hi) at y
            m.pieces
                .iter()
                .filter(|p| {
                    let (pa, pb) = p.bounds();
                    pa <= lo && hi <= pb
                })
                .map(|p| p.eval_unbounded(y))
                .sum()
        };
        for y in [lo, hi] {
            let (p, q) = (inside(a, y), inside(b, y));
            match (p > 0.0, q > 0.0) {
                (false, false) => {}
                (true, true) => worst = worst.max((p / q).ln().abs()),
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}
