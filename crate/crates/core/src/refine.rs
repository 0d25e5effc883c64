//! The refinement order on channels and hypers, earth moves, and the
//! Kantorovich distance between hypers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{solve, LinearProgram, LpOutcome, FEAS_TOL};
use crate::mechanisms::{geometric_channel, t_pixelated_laplace, EpsilonParams};
use crate::num::pairwise_sum;
use crate::prob::{
    hyper_of, push_joint, same_support, Channel, DiscreteDist, Grid, Hyper, Joint, TOL_SUM,
};

/// Relative singular-value cutoff for linear independence.
pub const RANK_TOL: f64 = 1e-8;

/// 1-Wasserstein distance on [0, 1]: the integral of the absolute CDF
/// difference.
pub fn ground_distance(a: &DiscreteDist, b: &DiscreteDist) -> f64 {
    let mut events: Vec<(f64, f64)> = a
        .support()
        .iter()
        .zip(a.probs())
        .map(|(&x, &p)| (x, p))
        .chain(b.support().iter().zip(b.probs()).map(|(&x, &p)| (x, -p)))
        .collect();
    events.sort_by(|s, t| s.0.total_cmp(&t.0));
    let mut diff = 0.0;
    let mut parts = Vec::with_capacity(events.len());
    for w in events.windows(2) {
        diff += w[0].1;
        parts.push(diff.abs() * (w[1].0 - w[0].0));
    }
    pairwise_sum(&parts)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefinementWitness {
    /// Row-stochastic `R[y][y']` with `D·R = D'`.
    PostProcessor(Vec<Vec<f64>>),
    /// `coeffs[j][i]`: inner j of the coarser hyper as a convex combination
    /// of the inners i of the finer one.
    ConvexHull(Vec<Vec<f64>>),
    Chain(Vec<RefinementWitness>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    Refined(RefinementWitness),
    NotRefined,
}

impl Refinement {
    pub fn is_refined(&self) -> bool {
        matches!(self, Refinement::Refined(_))
    }
}

/// Search for a post-processing matrix R with `J·R = J'`.
pub fn find_postprocessor(joint: &Joint, joint2: &Joint) -> Result<Refinement> {
    if !same_support(joint.input_support(), joint2.input_support()) {
        return Err(Error::DimensionMismatch(
            "joints must share the input support".into(),
        ));
    }
    let d = joint.entries();
    let d2 = joint2.entries();
    let (nx, ny, ny2) = (
        d.len(),
        joint.output_support().len(),
        joint2.output_support().len(),
    );
    let nvar = ny * ny2;
    let mut a = Vec::with_capacity(ny + nx * ny2);
    let mut b = Vec::with_capacity(ny + nx * ny2);
    for y in 0..ny {
        let mut row = vec![0.0; nvar];
        row[y * ny2..(y + 1) * ny2].fill(1.0);
        a.push(row);
        b.push(1.0);
    }
    for x in 0..nx {
        for y2 in 0..ny2 {
            let mut row = vec![0.0; nvar];
            for y in 0..ny {
                row[y * ny2 + y2] = d[x][y];
            }
            a.push(row);
            b.push(d2[x][y2]);
        }
    }
    let lp = LinearProgram {
        a,
        b,
        c: vec![0.0; nvar],
    };
    let sol = match solve(&lp)? {
        LpOutcome::Optimal(s) => s,
        LpOutcome::Infeasible => return Ok(Refinement::NotRefined),
        LpOutcome::Unbounded => {
            return Err(Error::SolverFailure("feasibility LP unbounded".into()))
        }
    };
    let r: Vec<Vec<f64>> = (0..ny)
        .map(|y| {
            let row = &sol.x[y * ny2..(y + 1) * ny2];
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    for x in 0..nx {
        for y2 in 0..ny2 {
            let got: f64 = (0..ny).map(|y| d[x][y] * r[y][y2]).sum();
            if (got - d2[x][y2]).abs() > FEAS_TOL {
                return Ok(Refinement::NotRefined);
            }
        }
    }
    Ok(Refinement::Refined(RefinementWitness::PostProcessor(r)))
}

fn uniform_hyper(c: &Channel) -> Result<Hyper> {
    let prior = DiscreteDist::uniform_on(c.input_support().to_vec())?;
    Ok(hyper_of(&push_joint(&prior, c)?))
}

/// Express each posterior of `coarse` (uniform prior) as a convex
/// combination of the posteriors of `fine`, after checking that the latter
/// are linearly independent.
pub fn hull_refinement_check(fine: &Channel, coarse: &Channel) -> Result<Refinement> {
    if !same_support(fine.input_support(), coarse.input_support()) {
        return Err(Error::SupportMismatch(
            "channels must share the input support".into(),
        ));
    }
    let h = uniform_hyper(fine)?;
    let h2 = uniform_hyper(coarse)?;
    let nx = h.support().len();
    let k = h.len();
    let p = DMatrix::from_fn(nx, k, |x, i| h.inners()[i].probs()[x]);
    let svd = p.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = if k > nx {
        0.0
    } else {
        svd.singular_values.min()
    };
    if k > nx || s_min <= RANK_TOL * s_max {
        return Err(Error::LinearDependence(s_min / s_max));
    }
    let mut coeffs = Vec::with_capacity(h2.len());
    for inner in h2.inners() {
        let q = DVector::from_column_slice(inner.probs());
        let lam = svd
            .solve(&q, RANK_TOL * s_max)
            .map_err(|e| Error::SolverFailure(e.to_string()))?;
        let resid = (&p * &lam - &q).amax();
        if resid > FEAS_TOL || lam.iter().any(|&v| v < -FEAS_TOL) {
            return Ok(Refinement::NotRefined);
        }
        let clipped: Vec<f64> = lam.iter().map(|v| v.max(0.0)).collect();
        let s: f64 = clipped.iter().sum();
        coeffs.push(clipped.into_iter().map(|v| v / s).collect());
    }
    Ok(Refinement::Refined(RefinementWitness::ConvexHull(coeffs)))
}

/// Hull coefficients (indexed by hyper inners) implied by a post-processor.
pub fn postprocessor_to_hull(
    joint: &Joint,
    joint2: &Joint,
    r: &[Vec<f64>],
) -> Result<RefinementWitness> {
    let h = hyper_of(joint);
    let h2 = hyper_of(joint2);
    let p = joint.right_marginal();
    let mut coeffs = vec![vec![0.0; h.len()]; h2.len()];
    let mut mass = vec![0.0; h2.len()];
    for (y, row) in r.iter().enumerate() {
        let Some(i) = h.column_map()[y] else { continue };
        for (y2, &v) in row.iter().enumerate() {
            if let Some(j) = h2.column_map()[y2] {
                coeffs[j][i] += p[y] * v;
                mass[j] += p[y] * v;
            }
        }
    }
    for (c, m) in coeffs.iter_mut().zip(&mass) {
        if *m <= 0.0 {
            return Err(Error::InvalidWitness(
                "post-processor misses an inner".into(),
            ));
        }
        c.iter_mut().for_each(|v| *v /= m);
    }
    Ok(RefinementWitness::ConvexHull(coeffs))
}

/// Mass moved from inners of one hyper to inners of another.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub sources: Vec<DiscreteDist>,
    pub sinks: Vec<DiscreteDist>,
    pub flows: Vec<Vec<f64>>,
}

impl TransportPlan {
    pub fn cost(&self) -> f64 {
        let mut parts = Vec::new();
        for (i, row) in self.flows.iter().enumerate() {
            for (j, &f) in row.iter().enumerate() {
                if f > 0.0 {
                    parts.push(f * ground_distance(&self.sources[i], &self.sinks[j]));
                }
            }
        }
        pairwise_sum(&parts)
    }

    pub fn check_marginals(&self, outers: &[f64], outers2: &[f64]) -> bool {
        let rows_ok = self
            .flows
            .iter()
            .zip(outers)
            .all(|(r, o)| (r.iter().sum::<f64>() - o).abs() <= TOL_SUM);
        let cols_ok = outers2
            .iter()
            .enumerate()
            .all(|(j, o)| (self.flows.iter().map(|r| r[j]).sum::<f64>() - o).abs() <= TOL_SUM);
        rows_ok && cols_ok && self.flows.len() == outers.len()
    }
}

/// The earth move determined by a hull witness: inner i of Δ sends
/// `outer'_j λ_ji` to inner j of Δ'.
pub fn earth_move_of_refinement(
    witness: &RefinementWitness,
    delta: &Hyper,
    delta2: &Hyper,
) -> Result<TransportPlan> {
    let RefinementWitness::ConvexHull(coeffs) = witness else {
        return Err(Error::InvalidWitness(
            "convert post-processors with postprocessor_to_hull first".into(),
        ));
    };
    if coeffs.len() != delta2.len() || coeffs.iter().any(|c| c.len() != delta.len()) {
        return Err(Error::InvalidWitness("coefficient shape".into()));
    }
    let flows: Vec<Vec<f64>> = (0..delta.len())
        .map(|i| {
            (0..delta2.len())
                .map(|j| delta2.outers()[j] * coeffs[j][i])
                .collect()
        })
        .collect();
    let plan = TransportPlan {
        sources: delta.inners().to_vec(),
        sinks: delta2.inners().to_vec(),
        flows,
    };
    for (i, row) in plan.flows.iter().enumerate() {
        if (row.iter().sum::<f64>() - delta.outers()[i]).abs() > FEAS_TOL {
            return Err(Error::InvalidWitness(format!(
                "inner {i} would move {} but holds {}",
                row.iter().sum::<f64>(),
                delta.outers()[i]
            )));
        }
    }
    Ok(plan)
}

/// Optimal transport between two hypers with ground cost
/// [`ground_distance`], together with an optimal plan. Optimality is
/// certified by dual feasibility and a zero duality gap.
pub fn kantorovich_plan(delta: &Hyper, delta2: &Hyper) -> Result<(f64, TransportPlan)> {
    if !same_support(delta.support(), delta2.support()) {
        return Err(Error::SupportMismatch(
            "hypers on different supports".into(),
        ));
    }
    let (m, n) = (delta.len(), delta2.len());
    let mut a = Vec::with_capacity(m + n);
    for i in 0..m {
        let mut row = vec![0.0; m * n];
        row[i * n..(i + 1) * n].fill(1.0);
        a.push(row);
    }
    for j in 0..n {
        let mut row = vec![0.0; m * n];
        for i in 0..m {
            row[i * n + j] = 1.0;
        }
        a.push(row);
    }
    let b: Vec<f64> = delta
        .outers()
        .iter()
        .chain(delta2.outers())
        .copied()
        .collect();
    let c: Vec<f64> = delta
        .inners()
        .iter()
        .flat_map(|p| delta2.inners().iter().map(move |q| ground_distance(p, q)))
        .collect();
    let lp = LinearProgram { a, b, c };
    let sol = match solve(&lp)? {
        LpOutcome::Optimal(s) => s,
        other => return Err(Error::SolverFailure(format!("transport LP: {other:?}"))),
    };
    let dual_obj: f64 = sol.duals.iter().zip(&lp.b).map(|(y, b)| y * b).sum();
    if sol.reduced_costs.iter().any(|&r| r < -FEAS_TOL)
        || (dual_obj - sol.objective).abs() > FEAS_TOL
    {
        return Err(Error::SolverFailure("optimality certificate failed".into()));
    }
    let flows = (0..m).map(|i| sol.x[i * n..(i + 1) * n].to_vec()).collect();
    let plan = TransportPlan {
        sources: delta.inners().to_vec(),
        sinks: delta2.inners().to_vec(),
        flows,
    };
    Ok((sol.objective.max(0.0), plan))
}

pub fn kantorovich_hyper(delta: &Hyper, delta2: &Hyper) -> Result<f64> {
    kantorovich_plan(delta, delta2).map(|(v, _)| v)
}

/// `c κ / N` with `c = 3 / (1 - e^{-ε})²`.
pub fn gap_bound(eps: EpsilonParams, kappa: f64, n: usize) -> f64 {
    let d = -(-eps.epsilon()).exp_m1();
    3.0 * kappa / (n as f64 * d * d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainLink {
    pub finer: String,
    pub coarser: String,
    pub refined: bool,
    pub kantorovich: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    /// Geometric against each pixelated Laplace.
    pub geometric_links: Vec<ChainLink>,
    /// Successive pixelated Laplace channels, finest first.
    pub laplace_links: Vec<ChainLink>,
}

impl ChainReport {
    pub fn all_refined(&self) -> bool {
        self.geometric_links
            .iter()
            .chain(&self.laplace_links)
            .all(|l| l.refined)
    }

    /// Kantorovich distances between successive Laplace channels shrink as
    /// T grows.
    pub fn kantorovich_decreasing(&self) -> bool {
        // laplace_links run from the finest pair to the coarsest pair
        self.laplace_links
            .windows(2)
            .all(|w| w[0].kantorovich <= w[1].kantorovich + 1e-12)
    }

    pub fn first_failure(&self) -> Option<&ChainLink> {
        self.geometric_links
            .iter()
            .chain(&self.laplace_links)
            .find(|l| !l.refined)
    }
}

/// Check `Geo_N ⊑ ᵀLap` for each listed T and `ᵀ'Lap ⊑ ᵀLap` for each
/// successive pair T | T', all on the uniform prior over U_N.
pub fn refinement_chain_check(eps: EpsilonParams, n: usize, ts: &[usize]) -> Result<ChainReport> {
    let grid = Grid::new(n)?;
    for w in ts.windows(2) {
        if w[0] == 0 || w[1] % w[0] != 0 {
            return Err(Error::InvalidT);
        }
    }
    let prior = DiscreteDist::uniform(grid);
    let geo = geometric_channel(eps, n)?;
    let geo_joint = push_joint(&prior, &geo)?;
    let geo_hyper = hyper_of(&geo_joint);
    let laps = ts
        .iter()
        .map(|&t| {
            let c = t_pixelated_laplace(eps, n, t)?;
            let j = push_joint(&prior, &c)?;
            let h = hyper_of(&j);
            Ok((t, j, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut geometric_links = Vec::new();
    for (t, j, h) in &laps {
        geometric_links.push(ChainLink {
            finer: format!("Geo_{n}"),
            coarser: format!("Lap_{n}^{t}"),
            refined: find_postprocessor(&geo_joint, j)?.is_refined(),
            kantorovich: kantorovich_hyper(&geo_hyper, h)?,
        });
    }
    let mut laplace_links = Vec::new();
    for w in laps.windows(2).rev() {
        let (t0, j0, h0) = &w[0];
        let (t1, j1, h1) = &w[1];
        laplace_links.push(ChainLink {
            finer: format!("Lap_{n}^{t1}"),
            coarser: format!("Lap_{n}^{t0}"),
            refined: find_postprocessor(j1, j0)?.is_refined(),
            kantorovich: kantorovich_hyper(h1, h0)?,
        });
    }
    Ok(ChainReport {
        geometric_links,
        laplace_links,
    })
}

/// Largest ground distance between posteriors of neighbouring outputs of
/// Geo_N under the uniform prior.
pub fn max_adjacent_geo_distance(eps: EpsilonParams, n: usize) -> Result<f64> {
    let h = uniform_hyper(&geometric_channel(eps, n)?)?;
    let order: Vec<usize> = h.column_map().iter().flatten().copied().collect();
    Ok(order
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| ground_distance(&h.inners()[w[0]], &h.inners()[w[1]]))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{expected_loss_discrete, uncertainty, LossFunction};
    use crate::prob::make_channel;
    use proptest::prelude::*;

    fn eps(e: f64) -> EpsilonParams {
        EpsilonParams::new(e).unwrap()
    }

    fn dist(support: &[f64], probs: &[f64]) -> DiscreteDist {
        DiscreteDist::new(support.to_vec(), probs.to_vec()).unwrap()
    }

    /// Transport LP over the merged support with |x - y| costs.
    fn brute_w1(a: &DiscreteDist, b: &DiscreteDist) -> f64 {
        let (m, n) = (a.len(), b.len());
        let mut rows = Vec::new();
        for i in 0..m {
            let mut r = vec![0.0; m * n];
            r[i * n..(i + 1) * n].fill(1.0);
            rows.push(r);
        }
        for j in 0..n {
            let mut r = vec![0.0; m * n];
            for i in 0..m {
                r[i * n + j] = 1.0;
            }
            rows.push(r);
        }
        let lp = LinearProgram {
            a: rows,
            b: a.probs().iter().chain(b.probs()).copied().collect(),
            c: a.support()
                .iter()
                .flat_map(|x| b.support().iter().map(move |y| (x - y).abs()))
                .collect(),
        };
        match solve(&lp).unwrap() {
            LpOutcome::Optimal(s) => s.objective,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ground_distance_examples() {
        let pts = [0.0, 0.5, 1.0];
        let a = dist(&pts, &[0.2, 0.3, 0.5]);
        assert_eq!(ground_distance(&a, &a), 0.0);
        assert_eq!(
            ground_distance(&dist(&[0.0], &[1.0]), &dist(&[1.0], &[1.0])),
            1.0
        );
        let split = dist(&[0.0, 1.0], &[0.5, 0.5]);
        let mid = dist(&[0.5], &[1.0]);
        assert!((ground_distance(&split, &mid) - 0.5).abs() < 1e-15);
        assert!((brute_w1(&split, &mid) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn postprocessor_examples() {
        let prior = DiscreteDist::uniform(Grid::new(2).unwrap());
        let geo = geometric_channel(eps(2.0 * 4f64.ln()), 2).unwrap();
        let j = push_joint(&prior, &geo).unwrap();
        match find_postprocessor(&j, &j).unwrap() {
            Refinement::Refined(RefinementWitness::PostProcessor(r)) => {
                let jr: Vec<Vec<f64>> = j
                    .entries()
                    .iter()
                    .map(|row| {
                        (0..3)
                            .map(|c| (0..3).map(|y| row[y] * r[y][c]).sum())
                            .collect()
                    })
                    .collect();
                for (a, b) in jr.iter().flatten().zip(j.entries().iter().flatten()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
            other => panic!("{other:?}"),
        }
        let constant = Channel::constant(prior.support().to_vec(), vec![0.0, 1.0]).unwrap();
        let jc = push_joint(&prior, &constant).unwrap();
        assert!(find_postprocessor(&j, &jc).unwrap().is_refined());
        // the constant channel cannot be post-processed into Geo
        assert_eq!(find_postprocessor(&jc, &j).unwrap(), Refinement::NotRefined);

        let lap = t_pixelated_laplace(eps(2.0 * 4f64.ln()), 2, 8).unwrap();
        let jl = push_joint(&prior, &lap).unwrap();
        assert!(find_postprocessor(&j, &jl).unwrap().is_refined());
    }

    #[test]
    fn hull_examples() {
        let e = eps(2.0 * 4f64.ln());
        let geo = geometric_channel(e, 2).unwrap();
        match hull_refinement_check(&geo, &geo).unwrap() {
            Refinement::Refined(RefinementWitness::ConvexHull(c)) => {
                for (j, row) in c.iter().enumerate() {
                    for (i, &v) in row.iter().enumerate() {
                        assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
                    }
                }
            }
            other => panic!("{other:?}"),
        }
        let lap = t_pixelated_laplace(e, 2, 8).unwrap();
        match hull_refinement_check(&geo, &lap).unwrap() {
            Refinement::Refined(RefinementWitness::ConvexHull(c)) => assert_eq!(c.len(), 8),
            other => panic!("{other:?}"),
        }
        for n in [2, 4, 8] {
            let g = geometric_channel(eps(1.0), n).unwrap();
            assert!(hull_refinement_check(&g, &g).is_ok());
        }
        // three distinct posteriors on two points are dependent
        let c = make_channel(
            vec![0.0, 1.0],
            vec![0.0, 0.5, 1.0],
            vec![vec![0.5, 0.25, 0.25], vec![0.25, 0.5, 0.25]],
        )
        .unwrap();
        assert!(matches!(
            hull_refinement_check(&c, &c),
            Err(Error::LinearDependence(_))
        ));
        // two independent posteriors cannot produce the point masses
        let coarse_lap = t_pixelated_laplace(eps(1.0), 2, 2).unwrap();
        let id = Channel::identity(Grid::new(2).unwrap().points()).unwrap();
        assert_eq!(
            hull_refinement_check(&coarse_lap, &id).unwrap(),
            Refinement::NotRefined
        );
    }

    #[test]
    fn earth_move_between_adjacent_posteriors() {
        let e = eps(2.0 * 4f64.ln());
        let prior = DiscreteDist::uniform(Grid::new(2).unwrap());
        let geo = geometric_channel(e, 2).unwrap();
        let lap = t_pixelated_laplace(e, 2, 8).unwrap();
        let hg = hyper_of(&push_joint(&prior, &geo).unwrap());
        let hl = hyper_of(&push_joint(&prior, &lap).unwrap());
        let Refinement::Refined(w) = hull_refinement_check(&geo, &lap).unwrap() else {
            panic!()
        };
        let plan = earth_move_of_refinement(&w, &hg, &hl).unwrap();
        assert!(plan.check_marginals(hg.outers(), hl.outers()));
        for j in 0..hl.len() {
            let used: Vec<usize> = (0..hg.len()).filter(|&i| plan.flows[i][j] > 1e-9).collect();
            assert!(
                used.len() <= 2 && used.windows(2).all(|w| w[1] == w[0] + 1),
                "{used:?}"
            );
        }
        let k = kantorovich_hyper(&hg, &hl).unwrap();
        assert!(plan.cost() >= k - 1e-9);

        let same = earth_move_of_refinement(
            &RefinementWitness::ConvexHull(
                (0..hg.len())
                    .map(|j| {
                        (0..hg.len())
                            .map(|i| if i == j { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            ),
            &hg,
            &hg,
        )
        .unwrap();
        assert_eq!(same.cost(), 0.0);
    }

    #[test]
    fn postprocessor_and_hull_witnesses_agree() {
        let e = eps(1.0);
        let prior = DiscreteDist::uniform(Grid::new(4).unwrap());
        let geo = geometric_channel(e, 4).unwrap();
        let lap = t_pixelated_laplace(e, 4, 16).unwrap();
        let jg = push_joint(&prior, &geo).unwrap();
        let jl = push_joint(&prior, &lap).unwrap();
        let Refinement::Refined(RefinementWitness::PostProcessor(r)) =
            find_postprocessor(&jg, &jl).unwrap()
        else {
            panic!()
        };
        let from_r = postprocessor_to_hull(&jg, &jl, &r).unwrap();
        let Refinement::Refined(hull) = hull_refinement_check(&geo, &lap).unwrap() else {
            panic!()
        };
        let (RefinementWitness::ConvexHull(a), RefinementWitness::ConvexHull(b)) = (&from_r, &hull)
        else {
            panic!()
        };
        // independence makes the coefficients unique
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn kantorovich_examples() {
        let pts = [0.0, 1.0];
        let h0 = Hyper::new(vec![dist(&pts, &[1.0, 0.0])], vec![1.0]).unwrap();
        let h1 = Hyper::new(vec![dist(&pts, &[0.0, 1.0])], vec![1.0]).unwrap();
        assert_eq!(kantorovich_hyper(&h0, &h0).unwrap(), 0.0);
        assert!((kantorovich_hyper(&h0, &h1).unwrap() - 1.0).abs() < 1e-12);

        let e = eps(1.0);
        let prior = DiscreteDist::uniform(Grid::new(4).unwrap());
        let hg = hyper_of(&push_joint(&prior, &geometric_channel(e, 4).unwrap()).unwrap());
        let hl = hyper_of(&push_joint(&prior, &t_pixelated_laplace(e, 4, 32).unwrap()).unwrap());
        let k = kantorovich_hyper(&hg, &hl).unwrap();
        assert!(k <= gap_bound(e, 1.0, 4), "{k}");
    }

    #[test]
    fn gap_bound_examples() {
        let b = gap_bound(eps(1.0), 1.0, 1);
        let oracle = 3.0 / (1.0 - (-1f64).exp()).powi(2);
        assert!((b - oracle).abs() < 1e-12);
        assert!((b - 7.508).abs() < 1e-3);
        assert!((gap_bound(eps(1.0), 1.0, 2) * 2.0 - b).abs() < 1e-12);
        assert!((gap_bound(eps(60.0), 2.0, 3) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn chain_examples() {
        let r = refinement_chain_check(eps(1.0), 2, &[8, 16, 32]).unwrap();
        assert!(r.all_refined(), "{:?}", r.first_failure());
        assert!(r.kantorovich_decreasing(), "{r:?}");
        let single = refinement_chain_check(eps(1.0), 2, &[8]).unwrap();
        assert!(single.laplace_links.is_empty() && single.all_refined());
        assert!(refinement_chain_check(eps(1.0), 2, &[8, 12]).is_err());
    }

    #[test]
    fn adjacent_geo_posteriors_are_close() {
        for e in [0.5, 1.0, 2.0 * 4f64.ln()] {
            for n in [2, 4, 8, 16] {
                let d = max_adjacent_geo_distance(eps(e), n).unwrap();
                assert!(d <= gap_bound(eps(e), 1.0, n), "eps={e} n={n}: {d}");
            }
        }
    }

    fn arb_hyper(nx: usize) -> impl Strategy<Value = Hyper> {
        (1usize..5).prop_flat_map(move |k| {
            (
                prop::collection::vec(prop::collection::vec(0.0f64..1.0, nx), k),
                prop::collection::vec(0.05f64..1.0, k),
            )
                .prop_map(move |(inners, outers)| {
                    let pts: Vec<f64> = (0..nx).map(|i| i as f64 / (nx - 1) as f64).collect();
                    let so: f64 = outers.iter().sum();
                    let inners = inners
                        .into_iter()
                        .map(|v| {
                            let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
                            let s: f64 = v.iter().sum();
                            DiscreteDist::new(pts.clone(), v.iter().map(|x| x / s).collect())
                                .unwrap()
                        })
                        .collect();
                    Hyper::new(inners, outers.iter().map(|o| o / so).collect()).unwrap()
                })
        })
    }

    fn expected_y(h: &Hyper, loss: &LossFunction) -> f64 {
        h.expect(|d| uncertainty(loss, d).unwrap().0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kantorovich_is_a_metric(a in arb_hyper(4), b in arb_hyper(4), c in arb_hyper(4)) {
            let ab = kantorovich_hyper(&a, &b).unwrap();
            let ba = kantorovich_hyper(&b, &a).unwrap();
            let bc = kantorovich_hyper(&b, &c).unwrap();
            let ac = kantorovich_hyper(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(kantorovich_hyper(&a, &a).unwrap() < 1e-12);
        }

        #[test]
        fn kantorovich_rubinstein(a in arb_hyper(5), b in arb_hyper(5), which in 0usize..2) {
            let grid = Grid::new(4).unwrap();
            let loss = if which == 0 { LossFunction::builtin_len(grid) } else { LossFunction::builtin_len2(grid) };
            let k = kantorovich_hyper(&a, &b).unwrap();
            let gap = (expected_y(&a, &loss) - expected_y(&b, &loss)).abs();
            prop_assert!(gap <= loss.kappa().unwrap() * k + 1e-9);
        }

        #[test]
        fn refinement_orders_losses(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 3),
                                    post in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 4),
                                    pi in prop::collection::vec(0.05f64..1.0, 3),
                                    table in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 2)) {
            // C' = C R is refined by C; check with the LP and with losses
            let norm = |v: &Vec<f64>| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<f64>>() };
            let c_rows: Vec<Vec<f64>> = rows.iter().map(norm).collect();
            let r: Vec<Vec<f64>> = post.iter().map(|v| norm(&v.iter().map(|x| x + 1e-3).collect())).collect();
            let c2_rows: Vec<Vec<f64>> = c_rows.iter()
                .map(|row| (0..3).map(|j| (0..4).map(|y| row[y] * r[y][j]).sum()).collect())
                .collect();
            let xs = Grid::new(2).unwrap().points();
            let c = make_channel(xs.clone(), vec![0.0, 0.25, 0.5, 0.75], c_rows).unwrap();
            let c2 = make_channel(xs.clone(), vec![0.0, 0.5, 1.0], c2_rows).unwrap();
            let prior = DiscreteDist::new(xs.clone(), norm(&pi)).unwrap();
            let j = push_joint(&prior, &c).unwrap();
            let j2 = push_joint(&prior, &c2).unwrap();
            prop_assert!(find_postprocessor(&j, &j2).unwrap().is_refined());
            let losses = [
                LossFunction::len(xs.clone()).unwrap(),
                LossFunction::bayes_risk(xs.clone()).unwrap(),
                LossFunction::table(table).unwrap(),
            ];
            for loss in &losses {
                let l1 = expected_loss_discrete(&prior, &c, loss).unwrap();
                let l2 = expected_loss_discrete(&prior, &c2, loss).unwrap();
                prop_assert!(l1 <= l2 + 1e-9);
            }
        }
    }
}
