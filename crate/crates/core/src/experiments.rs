//! Experiment configuration, random ε-DP channels, and the drivers for the
//! discrete optimality, convergence and main-theorem experiments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{
    expected_loss_continuous, expected_loss_discrete, expected_loss_hybrid, Kernel, LossFunction,
};
use crate::mechanisms::{geometric_channel, t_pixelated_laplace, verify_dp, EpsilonParams};
use crate::num::{derive_seed, fmt_sig};
use crate::pixelate::{
    nstep_channel, pixelate_prior, restrict_continuous_mechanism, PiecewisePrior, PolyPiece,
    TruncatedLaplace,
};
use crate::prob::{make_channel, Channel, DiscreteDist, Grid};
use crate::refine::gap_bound;

/// Slack for inequalities between exactly computed losses.
pub const EXACT_TOL: f64 = 1e-9;
/// Slack for inequalities involving a quadrature result.
pub const QUAD_CHECK_TOL: f64 = 1e-6;

pub const CSV_HEADER: &str =
    "N,T,eps,kappa,loss_geo,loss_tlap,loss_lap_exact,gap,bound,dp_tightness";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(alias = "eps")]
    pub epsilon: f64,
    /// `uniform`, `linear`, `step`, or a path to a prior JSON file.
    #[serde(default = "default_prior")]
    pub prior: String,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(alias = "n", default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_t_factor")]
    pub t_factor: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Guesses on U_m instead of U_N.
    #[serde(default)]
    pub guess_grid: Option<usize>,
}

fn default_prior() -> String {
    "uniform".into()
}
fn default_loss() -> String {
    "len".into()
}
fn default_n_list() -> Vec<usize> {
    vec![2, 4, 8, 16, 32, 64]
}
fn default_t_factor() -> usize {
    8
}
fn default_samples() -> usize {
    100
}
fn default_seed() -> u64 {
    42
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            prior: default_prior(),
            loss: default_loss(),
            n_list: default_n_list(),
            t_factor: default_t_factor(),
            samples: default_samples(),
            seed: default_seed(),
            output: None,
            guess_grid: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse a JSON file, or TOML when the extension is `.toml`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            Self::from_toml(&text)
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        EpsilonParams::new(self.epsilon)?;
        if self.n_list.is_empty() {
            return Err(Error::InvalidConfig("N list is empty".into()));
        }
        if self.n_list.contains(&0) {
            return Err(Error::InvalidN);
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "N list must be strictly ascending".into(),
            ));
        }
        if self.t_factor == 0 {
            return Err(Error::InvalidT);
        }
        if self.guess_grid == Some(0) {
            return Err(Error::InvalidN);
        }
        Ok(())
    }

    pub fn eps(&self) -> Result<EpsilonParams> {
        EpsilonParams::new(self.epsilon)
    }

    pub fn resolve_prior(&self) -> Result<PiecewisePrior> {
        resolve_prior(&self.prior)
    }

    /// The configured loss with guesses on U_N (or the override grid).
    pub fn loss_for(&self, n: usize) -> Result<LossFunction> {
        let loss = LossFunction::by_name(&self.loss, n)?;
        match self.guess_grid {
            Some(m) if !matches!(loss.kernel(), Kernel::Table { .. }) => {
                loss.with_guesses(Grid::new(m)?.points())
            }
            _ => Ok(loss),
        }
    }
}

/// Built-in priors by name, or a prior JSON file.
pub fn resolve_prior(spec: &str) -> Result<PiecewisePrior> {
    match spec {
        "uniform" => Ok(PiecewisePrior::uniform()),
        "linear" => PiecewisePrior::polynomial(vec![0.0, 2.0]),
        "step" => PiecewisePrior::new(
            vec![
                PolyPiece {
                    from: 0.0,
                    to: 0.5,
                    coeffs: vec![1.5],
                },
                PolyPiece {
                    from: 0.5,
                    to: 1.0,
                    coeffs: vec![0.5],
                },
            ],
            Vec::new(),
        ),
        path => Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?),
    }
}

const SAMPLER_ITERS: usize = 200;
const SAMPLER_DRAWS: u64 = 16;

/// One draw of the DP sampler; may stall.
pub fn sample_dp_channel_once(eps: EpsilonParams, n: usize, seed: u64) -> Result<Channel> {
    let grid = Grid::new(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ny = rng.random_range(n + 1..=3 * n + 3);
    let sigma = rng.random_range(0.5..4.0);
    let dist = LogNormal::new(0.0, sigma).expect("positive sigma");
    let nx = n + 1;
    let mut m: Vec<Vec<f64>> = (0..nx)
        .map(|_| (0..ny).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    let full = eps.epsilon() / n as f64 * (1.0 - 1e-6);
    let outputs: Vec<f64> = (0..ny).map(|k| k as f64 / (ny - 1) as f64).collect();
    for it in 0..SAMPLER_ITERS {
        // at half rate, normalising can at most double the column ratios,
        // so the last iteration always lands inside the DP set
        let rate = full * (1.0 - 0.5 * it as f64 / (SAMPLER_ITERS - 1) as f64);
        // largest log-Lipschitz (rate per grid step) minorant of each column
        for y in 0..ny {
            let mut logs: Vec<f64> = (0..nx).map(|x| m[x][y].ln()).collect();
            for x in 1..nx {
                logs[x] = logs[x].min(logs[x - 1] + rate);
            }
            for x in (0..nx - 1).rev() {
                logs[x] = logs[x].min(logs[x + 1] + rate);
            }
            for x in 0..nx {
                m[x][y] = logs[x].exp();
            }
        }
        for row in &mut m {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        // adjacent rows suffice on a grid; the full check confirms
        let step = eps.epsilon() / n as f64;
        let adjacent_ok = m.windows(2).all(|w| {
            w[0].iter()
                .zip(&w[1])
                .all(|(a, b)| (a.ln() - b.ln()).abs() <= step)
        });
        if adjacent_ok {
            let c = make_channel(grid.points(), outputs.clone(), m.clone())?;
            if verify_dp(&c, eps).holds {
                return Ok(c);
            }
        }
    }
    Err(Error::SamplerStall(SAMPLER_ITERS))
}

/// A random channel on U_N that passes `verify_dp(·, ε)`: random column
/// count in `[N+1, 3N+3]`, log-normal columns, then alternating Lipschitz
/// clipping (at a slowly shrinking rate) and row normalisation. Stalled draws are retried with derived
/// seeds.
pub fn sample_dp_channel(eps: EpsilonParams, n: usize, seed: u64) -> Result<Channel> {
    let mut last = Error::SamplerStall(0);
    for draw in 0..SAMPLER_DRAWS {
        let s = if draw == 0 {
            seed
        } else {
            derive_seed(seed, draw)
        };
        match sample_dp_channel_once(eps, n, s) {
            Ok(c) => return Ok(c),
            Err(e @ Error::SamplerStall(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

#[derive(Debug, Clone)]
pub struct OptimalityViolation {
    pub index: usize,
    pub seed: u64,
    pub loss: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub n: usize,
    pub loss_geo: f64,
    pub min_margin: f64,
    pub samples: usize,
    pub violations: Vec<OptimalityViolation>,
}

/// Rejects losses that are not monotone on U_N, and Bayes risk unless its
/// guesses are exactly U_N.
pub fn check_legal(loss: &LossFunction, n: usize) -> Result<()> {
    let pts = Grid::new(n)?.points();
    if matches!(loss.kernel(), Kernel::BayesRisk) && loss.guesses() != pts.as_slice() {
        return Err(Error::InvalidLoss("Bayes risk needs W = U_N".into()));
    }
    if !loss.check_monotone(&pts) {
        return Err(Error::InvalidLoss(format!(
            "{} is not monotone on U_{n}",
            loss.label()
        )));
    }
    Ok(())
}

/// Compare Geo_N against `samples` random ε-DP channels under π_N.
pub fn discrete_optimality_trial(
    eps: EpsilonParams,
    n: usize,
    prior: &PiecewisePrior,
    loss: &LossFunction,
    samples: usize,
    seed: u64,
) -> Result<OptimalityReport> {
    check_legal(loss, n)?;
    let pn = pixelate_prior(prior, n)?;
    let loss_geo = expected_loss_discrete(&pn, &geometric_channel(eps, n)?, loss)?;
    let results = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let c = sample_dp_channel(eps, n, s)?;
            let l = expected_loss_discrete(&pn, &c, loss)?;
            Ok((i, s, l, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut min_margin = f64::INFINITY;
    let mut violations = Vec::new();
    for (index, seed, l, channel) in results {
        min_margin = min_margin.min(l - loss_geo);
        if l < loss_geo - EXACT_TOL {
            violations.push(OptimalityViolation {
                index,
                seed,
                loss: l,
                channel,
            });
        }
    }
    Ok(OptimalityReport {
        n,
        loss_geo,
        min_margin,
        samples,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub t: usize,
    pub eps: f64,
    pub kappa: Option<f64>,
    pub loss_geo: f64,
    pub loss_tlap: f64,
    pub loss_lap_exact: Option<f64>,
    pub gap: f64,
    pub bound: Option<f64>,
    pub dp_tightness: f64,
}

impl ConvergenceRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| fmt_sig(x, 12)).unwrap_or_default();
        [
            self.n.to_string(),
            self.t.to_string(),
            fmt_sig(self.eps, 12),
            opt(self.kappa),
            fmt_sig(self.loss_geo, 12),
            fmt_sig(self.loss_tlap, 12),
            opt(self.loss_lap_exact),
            fmt_sig(self.gap, 12),
            opt(self.bound),
            fmt_sig(self.dp_tightness, 12),
        ]
        .join(",")
    }
}

pub fn rows_to_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Human-readable descriptions of failed checks.
    pub violations: Vec<String>,
}

impl ConvergenceReport {
    pub fn csv(&self) -> String {
        rows_to_csv(&self.rows)
    }
}

fn convergence_row(
    cfg: &ExperimentConfig,
    prior: &PiecewisePrior,
    n: usize,
) -> Result<ConvergenceRow> {
    let eps = cfg.eps()?;
    let t = cfg.t_factor * n;
    let loss = cfg.loss_for(n)?;
    let pn = pixelate_prior(prior, n)?;
    let geo = geometric_channel(eps, n)?;
    let tlap = t_pixelated_laplace(eps, n, t)?;
    let loss_geo = expected_loss_discrete(&pn, &geo, &loss)?;
    let loss_tlap = expected_loss_discrete(&pn, &tlap, &loss)?;
    let rows = restrict_continuous_mechanism(&TruncatedLaplace { eps }, n)?;
    let loss_lap_exact = expected_loss_hybrid(&pn, rows.rows(), &loss).ok();
    Ok(ConvergenceRow {
        n,
        t,
        eps: eps.epsilon(),
        kappa: loss.kappa(),
        loss_geo,
        loss_tlap,
        loss_lap_exact,
        gap: loss_tlap - loss_geo,
        bound: loss.kappa().map(|k| gap_bound(eps, k, n)),
        dp_tightness: verify_dp(&geo, eps).tightness,
    })
}

/// Sweep N: losses of Geo_N and ᵀLap (T = t_factor·N) under π_N, their gap,
/// and the bound cκ/N. Rows come back in config order.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let prior = cfg.resolve_prior()?;
    let rows = cfg
        .n_list
        .par_iter()
        .map(|&n| convergence_row(cfg, &prior, n))
        .collect::<Result<Vec<_>>>()?;
    let mut violations = Vec::new();
    for r in &rows {
        if r.gap < -EXACT_TOL {
            violations.push(format!(
                "N={}: Geo loss exceeds pixelated Laplace loss by {}",
                r.n, -r.gap
            ));
        }
        if let Some(b) = r.bound {
            if r.gap > b + EXACT_TOL {
                violations.push(format!("N={}: gap {} exceeds bound {}", r.n, r.gap, b));
            }
        }
        if let Some(l) = r.loss_lap_exact {
            if l < r.loss_geo - EXACT_TOL || l > r.loss_tlap + EXACT_TOL {
                violations.push(format!(
                    "N={}: exact Laplace loss {} outside [{}, {}]",
                    r.n, l, r.loss_geo, r.loss_tlap
                ));
            }
        }
    }
    for w in rows.windows(2) {
        if w[1].n == 2 * w[0].n && w[1].gap > w[0].gap + EXACT_TOL {
            violations.push(format!(
                "gap grew from {} at N={} to {} at N={}",
                w[0].gap, w[0].n, w[1].gap, w[1].n
            ));
        }
    }
    Ok(ConvergenceReport { rows, violations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainViolation {
    pub n: usize,
    pub competitor: String,
    pub link: usize,
    pub lhs: f64,
    pub rhs: f64,
}

/// The five terms of the chain for one competitor at one N.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTerms {
    pub competitor: String,
    /// Loss(π, K, ℓ_N).
    pub loss_k: f64,
    pub terms: [f64; 5],
}

#[derive(Debug, Clone)]
pub struct DemoRow {
    pub n: usize,
    /// Loss(π, Lap, ℓ_N).
    pub loss_lap: f64,
    /// Loss(π_N, Geo_N, ℓ_N).
    pub loss_geo: f64,
    /// Lower bound on Loss(π, K, ℓ_N) - Loss(π, Lap, ℓ_N) implied by the chain.
    pub lower_bound: f64,
    /// Smallest Loss(π, K, ℓ_N) - Loss(π, Lap, ℓ_N) over the sampled K.
    pub min_observed_gap: Option<f64>,
    pub competitors: Vec<ChainTerms>,
    pub violations: Vec<ChainViolation>,
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub rows: Vec<DemoRow>,
}

impl DemoReport {
    pub fn violations(&self) -> impl Iterator<Item = &ChainViolation> {
        self.rows.iter().flat_map(|r| &r.violations)
    }

    /// The implied lower bounds rise towards 0 as N grows.
    pub fn lower_bounds_improve(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].lower_bound >= w[0].lower_bound - EXACT_TOL)
            && self.rows.iter().all(|r| r.lower_bound <= EXACT_TOL)
    }
}

/// Check, at each N, the inequality chain
/// `e^{ε/N} L(π,K,ℓ_N) ≥ L(π_N,K_N,ℓ_N) ≥ L(π_N,Geo,ℓ_N)
///  ≥ L(π_N,Lap|U_N,ℓ_N) - cκ/N ≥ e^{-ε/N} L(π,Lap,ℓ_N) - cκ/N`
/// for K the truncated Laplace and for lifted random ε-DP channels.
pub fn main_theorem_demo(
    eps: EpsilonParams,
    prior: &PiecewisePrior,
    loss_name: &str,
    n_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<DemoReport> {
    let rows = n_list
        .par_iter()
        .map(|&n| demo_row(eps, prior, loss_name, n, samples, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoReport { rows })
}

fn demo_row(
    eps: EpsilonParams,
    prior: &PiecewisePrior,
    loss_name: &str,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<DemoRow> {
    let loss = LossFunction::by_name(loss_name, n)?;
    let kappa = loss
        .kappa()
        .ok_or_else(|| Error::InvalidLoss("the chain needs a Lipschitz loss".into()))?;
    let ln = loss.stepped(n)?;
    let pn = pixelate_prior(prior, n)?;
    let factor = (eps.epsilon() / n as f64).exp();
    let ck = gap_bound(eps, kappa, n);

    let lap = TruncatedLaplace { eps };
    let lap_rows = restrict_continuous_mechanism(&lap, n)?;
    let loss_lap = expected_loss_continuous(prior, &lap, &ln)?;
    let loss_lap_n = expected_loss_hybrid(&pn, lap_rows.rows(), &ln)?;
    let loss_geo = expected_loss_discrete(&pn, &geometric_channel(eps, n)?, &ln)?;
    let l3 = loss_geo;
    let l4 = loss_lap_n - ck;
    let l5 = loss_lap / factor - ck;

    let mut competitors = vec![ChainTerms {
        competitor: "laplace".into(),
        loss_k: loss_lap,
        terms: [loss_lap * factor, loss_lap_n, l3, l4, l5],
    }];
    let sampled = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(derive_seed(seed, n as u64), i as u64);
            let c = sample_dp_channel(eps, n, s)?;
            let lifted = nstep_channel(&c, n)?;
            let loss_k = expected_loss_continuous(prior, &lifted, &ln)?;
            let l2 = expected_loss_discrete(&pn, &c, &ln)?;
            Ok(ChainTerms {
                competitor: format!("sample {i} (seed {s})"),
                loss_k,
                terms: [loss_k * factor, l2, l3, l4, l5],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    competitors.extend(sampled);

    // links that compare against a quadrature value get the looser slack
    let slack = [QUAD_CHECK_TOL, EXACT_TOL, EXACT_TOL, QUAD_CHECK_TOL];
    let mut violations = Vec::new();
    for c in &competitors {
        let first_slack = if c.competitor == "laplace" {
            QUAD_CHECK_TOL
        } else {
            EXACT_TOL
        };
        for link in 0..4 {
            let tol = if link == 0 { first_slack } else { slack[link] };
            if c.terms[link] < c.terms[link + 1] - tol {
                violations.push(ChainViolation {
                    n,
                    competitor: c.competitor.clone(),
                    link,
                    lhs: c.terms[link],
                    rhs: c.terms[link + 1],
                });
            }
        }
    }
    let lower_bound = (1.0 / (factor * factor) - 1.0) * loss_lap - ck / factor;
    let min_observed_gap = competitors[1..]
        .iter()
        .map(|c| c.loss_k - loss_lap)
        .min_by(f64::total_cmp);
    Ok(DemoRow {
        n,
        loss_lap,
        loss_geo,
        lower_bound,
        min_observed_gap,
        competitors,
        violations,
    })
}

/// Uniform distribution over U_N as a convenience for callers.
pub fn uniform_on_grid(n: usize) -> Result<DiscreteDist> {
    Ok(DiscreteDist::uniform(Grid::new(n)?))
}
