//! Discrete probability on finite subsets of [0, 1]: distributions, channels,
//! joints, posteriors and hyper-distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{pairwise_sum, total_variation};

/// Tolerance on row/total sums for stochasticity checks.
pub const TOL_SUM: f64 = 1e-9;
/// Total-variation distance under which two posteriors are merged.
pub const TOL_DIST: f64 = 1e-9;
/// Tolerance used when comparing support points.
pub const TOL_SUPPORT: f64 = 1e-12;

/// The evenly spaced grid {0, 1/N, ..., 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidN);
        }
        Ok(Self { n })
    }

    /// Number of intervals N.
    pub fn n_intervals(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.point(i)).collect()
    }
}

pub(crate) fn same_support(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOL_SUPPORT)
}

fn check_support(support: &[f64]) -> Result<()> {
    for &s in support {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::OutOfRange(s));
        }
    }
    Ok(())
}

/// A probability distribution on a finite list of points in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDist", into = "RawDist")]
pub struct DiscreteDist {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDist {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<RawDist> for DiscreteDist {
    type Error = Error;
    fn try_from(raw: RawDist) -> Result<Self> {
        DiscreteDist::new(raw.support, raw.probs)
    }
}

impl From<DiscreteDist> for RawDist {
    fn from(d: DiscreteDist) -> Self {
        RawDist {
            support: d.support,
            probs: d.probs,
        }
    }
}

impl DiscreteDist {
    /// Validates nonnegativity and a unit total (within `TOL_SUM`), then
    /// renormalises.
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} support points but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        check_support(&support)?;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::NegativeEntry {
                    row: 0,
                    col: i,
                    value: p,
                });
            }
        }
        let total = pairwise_sum(&probs);
        if (total - 1.0).abs() > TOL_SUM {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        let probs = probs.into_iter().map(|p| p / total).collect();
        Ok(Self { support, probs })
    }

    pub fn uniform_on(support: Vec<f64>) -> Result<Self> {
        let k = support.len();
        Self::new(support, vec![1.0 / k as f64; k])
    }

    /// Uniform distribution on all N+1 points of the grid.
    pub fn uniform(grid: Grid) -> Self {
        Self::uniform_on(grid.points()).expect("grid support is valid")
    }

    pub fn point_mass(support: Vec<f64>, index: usize) -> Result<Self> {
        let mut probs = vec![0.0; support.len()];
        *probs
            .get_mut(index)
            .ok_or_else(|| Error::InvalidDistribution(format!("index {index} out of range")))? =
            1.0;
        Self::new(support, probs)
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Expected value of `f` evaluated at the support points.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .support
            .iter()
            .zip(&self.probs)
            .map(|(&x, &p)| if p == 0.0 { 0.0 } else { p * f(x) })
            .collect();
        pairwise_sum(&terms)
    }
}

/// Largest absolute log-ratio between two distributions on a common support.
///
/// For finite supports the maximum over subsets is attained at a single
/// point, so the pointwise maximum is returned. Points where both
/// distributions vanish are skipped; a point charged by only one of them
/// gives `+inf`.
pub fn max_divergence(d1: &DiscreteDist, d2: &DiscreteDist) -> Result<f64> {
    if !same_support(&d1.support, &d2.support) {
        return Err(Error::SupportMismatch(
            "max divergence needs a common support".into(),
        ));
    }
    Ok(max_divergence_probs(&d1.probs, &d2.probs))
}

pub(crate) fn max_divergence_probs(a: &[f64], b: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (&p, &q) in a.iter().zip(b) {
        match (p > 0.0, q > 0.0) {
            (false, false) => {}
            (true, true) => worst = worst.max((p / q).ln().abs()),
            _ => return f64::INFINITY,
        }
    }
    worst
}

/// A stochastic matrix from `input_support` to `output_support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChannel", into = "RawChannel")]
pub struct Channel {
    input_support: Vec<f64>,
    output_support: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawChannel {
    input_support: Vec<f64>,
    output_support: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<RawChannel> for Channel {
    type Error = Error;
    fn try_from(raw: RawChannel) -> Result<Self> {
        make_channel(raw.input_support, raw.output_support, raw.rows)
    }
}

impl From<Channel> for RawChannel {
    fn from(c: Channel) -> Self {
        RawChannel {
            input_support: c.input_support,
            output_support: c.output_support,
            rows: c.rows,
        }
    }
}

/// Validate and build a channel. Rows within `TOL_SUM` of 1 are
/// renormalised; others are rejected.
pub fn make_channel(
    input_support: Vec<f64>,
    output_support: Vec<f64>,
    rows: Vec<Vec<f64>>,
) -> Result<Channel> {
    if rows.len() != input_support.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows for {} inputs",
            rows.len(),
            input_support.len()
        )));
    }
    if input_support.is_empty() || output_support.is_empty() {
        return Err(Error::DimensionMismatch("empty support".into()));
    }
    check_support(&input_support)?;
    check_support(&output_support)?;
    let mut normalized = Vec::with_capacity(rows.len());
    for (r, row) in rows.into_iter().enumerate() {
        if row.len() != output_support.len() {
            return Err(Error::DimensionMismatch(format!(
                "row {r} has {} entries for {} outputs",
                row.len(),
                output_support.len()
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NegativeEntry {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
        let sum = pairwise_sum(&row);
        if (sum - 1.0).abs() > TOL_SUM {
            return Err(Error::NonStochasticRow { row: r, sum });
        }
        normalized.push(row.into_iter().map(|v| v / sum).collect());
    }
    Ok(Channel {
        input_support,
        output_support,
        rows: normalized,
    })
}

impl Channel {
    pub fn input_support(&self) -> &[f64] {
        &self.input_support
    }

    pub fn output_support(&self) -> &[f64] {
        &self.output_support
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn n_inputs(&self) -> usize {
        self.input_support.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_support.len()
    }

    pub fn row_dist(&self, i: usize) -> DiscreteDist {
        DiscreteDist {
            support: self.output_support.clone(),
            probs: self.rows[i].clone(),
        }
    }

    /// The identity channel on `support`.
    pub fn identity(support: Vec<f64>) -> Result<Self> {
        let k = support.len();
        let rows = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        make_channel(support.clone(), support, rows)
    }

    /// Every input yields the uniform distribution on the outputs.
    pub fn constant(input_support: Vec<f64>, output_support: Vec<f64>) -> Result<Self> {
        let k = output_support.len();
        let rows = vec![vec![1.0 / k as f64; k]; input_support.len()];
        make_channel(input_support, output_support, rows)
    }
}

/// A joint distribution on input x output.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    input_support: Vec<f64>,
    output_support: Vec<f64>,
    entries: Vec<Vec<f64>>,
}

impl Joint {
    pub fn new(
        input_support: Vec<f64>,
        output_support: Vec<f64>,
        entries: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if entries.len() != input_support.len()
            || entries.iter().any(|r| r.len() != output_support.len())
        {
            return Err(Error::DimensionMismatch("joint shape".into()));
        }
        let flat: Vec<f64> = entries.iter().flatten().copied().collect();
        if flat.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidDistribution("negative joint entry".into()));
        }
        let total = pairwise_sum(&flat);
        if (total - 1.0).abs() > TOL_SUM {
            return Err(Error::InvalidDistribution(format!("joint sums to {total}")));
        }
        Ok(Self {
            input_support,
            output_support,
            entries,
        })
    }

    pub fn input_support(&self) -> &[f64] {
        &self.input_support
    }

    pub fn output_support(&self) -> &[f64] {
        &self.output_support
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn left_marginal(&self) -> Vec<f64> {
        self.entries.iter().map(|r| pairwise_sum(r)).collect()
    }

    pub fn right_marginal(&self) -> Vec<f64> {
        (0..self.output_support.len())
            .map(|y| {
                let col: Vec<f64> = self.entries.iter().map(|r| r[y]).collect();
                pairwise_sum(&col)
            })
            .collect()
    }
}

/// Joint distribution `J[x][y] = prior[x] * C[x][y]`.
pub fn push_joint(prior: &DiscreteDist, channel: &Channel) -> Result<Joint> {
    if !same_support(prior.support(), channel.input_support()) {
        return Err(Error::SupportMismatch(
            "prior support differs from channel input support".into(),
        ));
    }
    let entries = prior
        .probs()
        .iter()
        .zip(channel.rows())
        .map(|(&p, row)| row.iter().map(|&c| p * c).collect())
        .collect();
    Ok(Joint {
        input_support: prior.support().to_vec(),
        output_support: channel.output_support().to_vec(),
        entries,
    })
}

/// A finite distribution over posteriors ("inners") on a common support.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    inners: Vec<DiscreteDist>,
    outers: Vec<f64>,
    /// For hypers abstracted from a joint: the inner each output column fed
    /// into, or `None` for zero-probability columns.
    column_map: Vec<Option<usize>>,
}

impl Hyper {
    /// Build a hyper from weighted inners, merging near-duplicates and
    /// dropping zero weights.
    pub fn new(inners: Vec<DiscreteDist>, outers: Vec<f64>) -> Result<Self> {
        if inners.len() != outers.len() || inners.is_empty() {
            return Err(Error::DimensionMismatch(
                "one outer per inner is required".into(),
            ));
        }
        let support = inners[0].support().to_vec();
        if inners.iter().any(|d| !same_support(d.support(), &support)) {
            return Err(Error::SupportMismatch("inners must share a support".into()));
        }
        if outers.iter().any(|&o| !(o >= 0.0)) {
            return Err(Error::InvalidDistribution("negative outer".into()));
        }
        let total = pairwise_sum(&outers);
        if (total - 1.0).abs() > TOL_SUM {
            return Err(Error::InvalidDistribution(format!("outers sum to {total}")));
        }
        let columns: Vec<(f64, Vec<f64>)> = outers
            .into_iter()
            .zip(inners)
            .map(|(o, d)| (o / total, d.probs))
            .collect();
        Ok(Self::merge(support, columns))
    }

    fn merge(support: Vec<f64>, columns: Vec<(f64, Vec<f64>)>) -> Self {
        let mut acc: Vec<(f64, Vec<f64>)> = Vec::new();
        let mut column_map = Vec::with_capacity(columns.len());
        for (weight, inner) in columns {
            if weight <= 0.0 {
                column_map.push(None);
                continue;
            }
            match acc
                .iter()
                .position(|(_, existing)| total_variation(existing, &inner) <= TOL_DIST)
            {
                Some(k) => {
                    let (w, existing) = &mut acc[k];
                    let merged = *w + weight;
                    for (e, v) in existing.iter_mut().zip(&inner) {
                        *e = (*e * *w + v * weight) / merged;
                    }
                    *w = merged;
                    column_map.push(Some(k));
                }
                None => {
                    column_map.push(Some(acc.len()));
                    acc.push((weight, inner));
                }
            }
        }
        let (outers, inners) = acc
            .into_iter()
            .map(|(w, probs)| {
                (
                    w,
                    DiscreteDist {
                        support: support.clone(),
                        probs,
                    },
                )
            })
            .unzip();
        Self {
            inners,
            outers,
            column_map,
        }
    }

    pub fn inners(&self) -> &[DiscreteDist] {
        &self.inners
    }

    pub fn outers(&self) -> &[f64] {
        &self.outers
    }

    pub fn len(&self) -> usize {
        self.outers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outers.is_empty()
    }

    pub fn support(&self) -> &[f64] {
        self.inners[0].support()
    }

    pub fn column_map(&self) -> &[Option<usize>] {
        &self.column_map
    }

    /// Expected value of a function of the inner distributions.
    pub fn expect(&self, mut f: impl FnMut(&DiscreteDist) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .outers
            .iter()
            .zip(&self.inners)
            .map(|(&o, d)| o * f(d))
            .collect();
        pairwise_sum(&terms)
    }
}

/// Abstract a joint into its hyper: one inner per output with positive
/// marginal (the normalised column), weighted by that marginal.
pub fn hyper_of(joint: &Joint) -> Hyper {
    let marginal = joint.right_marginal();
    let columns = marginal
        .iter()
        .enumerate()
        .map(|(y, &p)| {
            if p > 0.0 {
                (p, joint.entries.iter().map(|r| r[y] / p).collect())
            } else {
                (0.0, Vec::new())
            }
        })
        .collect();
    Hyper::merge(joint.input_support.clone(), columns)
}
