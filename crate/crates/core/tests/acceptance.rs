//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p dpopt --test acceptance -- --nocapture`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpopt::experiments::{
    discrete_optimality_trial, resolve_prior, run_convergence, ExperimentConfig,
};
use dpopt::loss::{expected_loss_hybrid, uncertainty};
use dpopt::pixelate::{restrict_continuous_mechanism, TruncatedLaplace};
use dpopt::prob::max_divergence;
use dpopt::refine::{find_postprocessor, hull_refinement_check, kantorovich_hyper, Refinement};
use dpopt::{
    expected_loss_continuous, expected_loss_discrete, geometric_channel, hyper_of, make_channel,
    pixelate_prior, push_joint, t_pixelated_laplace, verify_dp, Channel, DiscreteDist,
    EpsilonParams, Grid, Hyper, LossFunction, PiecewisePrior,
};

type Check = std::result::Result<(), String>;

fn eps(e: f64) -> EpsilonParams {
    EpsilonParams::new(e).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn matrix_close(c: &Channel, want: &[[f64; 5]], tol: f64) -> Check {
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let got = c.row(i)[j];
            ensure((got - w).abs() <= tol, || {
                format!("entry ({i},{j}): {got} vs {w}")
            })?;
        }
    }
    Ok(())
}

fn example_channel() -> Channel {
    make_channel(
        vec![0.0, 0.5, 1.0],
        vec![0.0, 0.25, 0.5, 0.75, 1.0],
        vec![
            vec![2.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0, 1.0 / 24.0, 1.0 / 24.0],
            vec![1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            vec![1.0 / 24.0, 1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0, 2.0 / 3.0],
        ],
    )
    .unwrap()
}

fn c1_geometric_fixtures() -> Check {
    let g2 = geometric_channel(eps(2.0 * 4f64.ln()), 2).map_err(|e| e.to_string())?;
    let want2 = [
        [4.0 / 5.0, 3.0 / 20.0, 1.0 / 20.0],
        [1.0 / 5.0, 3.0 / 5.0, 1.0 / 5.0],
        [1.0 / 20.0, 3.0 / 20.0, 4.0 / 5.0],
    ];
    for (i, row) in want2.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let got = g2.row(i)[j];
            ensure((got - w).abs() <= 1e-12, || {
                format!("Geo2 ({i},{j}): {got} vs {w}")
            })?;
        }
    }
    let g4 = geometric_channel(eps(4.0 * 2f64.ln()), 4).map_err(|e| e.to_string())?;
    let want4 = [
        [2.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0, 1.0 / 24.0, 1.0 / 24.0],
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0],
        [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
        [1.0 / 12.0, 1.0 / 12.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0],
        [1.0 / 24.0, 1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0, 2.0 / 3.0],
    ];
    matrix_close(&g4, &want4, 1e-12)
}

fn c2_truncation() -> Check {
    // α = 1/2 per step on (0..2) is ε = 2 ln 2 on U_2
    let g = geometric_channel(eps(2.0 * 2f64.ln()), 2).map_err(|e| e.to_string())?;
    let want = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
    for (j, &w) in want.iter().enumerate() {
        let got = g.row(0)[j];
        ensure((got - w).abs() <= 1e-12, || {
            format!("entry {j}: {got} vs {w}")
        })?;
    }
    Ok(())
}

fn c3_worked_loss() -> Check {
    let c = example_channel();
    let prior = DiscreteDist::uniform_on(c.input_support().to_vec()).unwrap();
    let loss = LossFunction::bayes_risk(c.input_support().to_vec()).unwrap();
    let l = expected_loss_discrete(&prior, &c, &loss).map_err(|e| e.to_string())?;
    ensure((l - 1.0 / 3.0).abs() <= 1e-12, || format!("loss {l}"))
}

fn c4_max_divergence() -> Check {
    let c = example_channel();
    let d = max_divergence(&c.row_dist(0), &c.row_dist(1)).map_err(|e| e.to_string())?;
    ensure((d - 4f64.ln()).abs() <= 1e-12, || format!("divergence {d}"))
}

fn c5_dp_tightness() -> Check {
    for e in [0.5, 1.0, 2.0 * 4f64.ln()] {
        for n in [2, 4, 8, 16] {
            let g = geometric_channel(eps(e), n).map_err(|e| e.to_string())?;
            let r = verify_dp(&g, eps(e));
            ensure(r.holds, || format!("ε={e} N={n}: DP fails"))?;
            // tightness is divergence per unit of input distance
            ensure((r.tightness - e).abs() <= 1e-9, || {
                format!("ε={e} N={n}: tightness {}", r.tightness)
            })?;
        }
    }
    Ok(())
}

fn c6_refinement() -> Check {
    for e in [1.0, 2.0 * 4f64.ln()] {
        for n in [2usize, 4] {
            for t in [8usize, 16, 32] {
                let geo = geometric_channel(eps(e), n).map_err(|e| e.to_string())?;
                let tlap = t_pixelated_laplace(eps(e), n, t).map_err(|e| e.to_string())?;
                let u = DiscreteDist::uniform(Grid::new(n).unwrap());
                let lp = find_postprocessor(
                    &push_joint(&u, &geo).unwrap(),
                    &push_joint(&u, &tlap).unwrap(),
                )
                .map_err(|e| e.to_string())?;
                let hull = hull_refinement_check(&geo, &tlap).map_err(|e| e.to_string())?;
                let tag = format!("ε={e:.4} N={n} T={t}");
                ensure(lp.is_refined(), || format!("{tag}: no post-processor"))?;
                ensure(hull.is_refined(), || format!("{tag}: hull check fails"))?;
                ensure(
                    matches!(lp, Refinement::Refined(_)) == matches!(hull, Refinement::Refined(_)),
                    || format!("{tag}: certifiers disagree"),
                )?;
            }
        }
    }
    Ok(())
}

fn c7_gap_bound() -> Check {
    let mut problems = Vec::new();
    let mut gaps = Vec::new();
    for prior in ["uniform", "linear", "step"] {
        let cfg = ExperimentConfig {
            epsilon: 1.0,
            prior: prior.into(),
            loss: "len".into(),
            n_list: vec![2, 4, 8, 16, 32, 64],
            t_factor: 8,
            ..ExperimentConfig::default()
        };
        let report = run_convergence(&cfg).map_err(|e| e.to_string())?;
        let c = 3.0 / (1.0 - (-1f64).exp()).powi(2);
        for r in &report.rows {
            let bound = c / r.n as f64;
            if r.t != 8 * r.n {
                problems.push(format!("{prior} N={}: T={}", r.n, r.t));
            }
            if !(r.gap >= -1e-9 && r.gap <= bound + 1e-9) {
                problems.push(format!(
                    "{prior} N={}: gap {} outside [0, {bound}]",
                    r.n, r.gap
                ));
            }
        }
        let (first, last) = (&report.rows[0], report.rows.last().unwrap());
        if last.gap >= first.gap {
            problems.push(format!(
                "{prior}: gap at N=64 ({:e}) is not below gap at N=2 ({:e})",
                last.gap, first.gap
            ));
        }
        gaps.push((prior, first.gap, last.gap));
    }
    println!("    gaps (N=2, N=64): {gaps:?}");
    ensure(problems.is_empty(), || problems.join("; "))
}

fn c8_pixelation_sandwich() -> Check {
    let e = eps(1.0);
    let prior = PiecewisePrior::uniform();
    let k = TruncatedLaplace { eps: e };
    for n in [4usize, 16] {
        let ln = LossFunction::builtin_len(Grid::new(n).unwrap())
            .stepped(n)
            .unwrap();
        let pn = pixelate_prior(&prior, n).unwrap();
        let restricted = restrict_continuous_mechanism(&k, n).map_err(|e| e.to_string())?;
        let discrete =
            expected_loss_hybrid(&pn, restricted.rows(), &ln).map_err(|e| e.to_string())?;
        let lifted =
            expected_loss_continuous(&prior, &restricted.lift(), &ln).map_err(|e| e.to_string())?;
        ensure((lifted - discrete).abs() <= 1e-9, || {
            format!("N={n}: lifted {lifted} vs pixelated {discrete}")
        })?;
        let full = expected_loss_continuous(&prior, &k, &ln).map_err(|e| e.to_string())?;
        let f = (1.0 / n as f64).exp();
        ensure(
            discrete / f <= full + 1e-6 && full <= discrete * f + 1e-6,
            || {
                format!(
                    "N={n}: {full} not within [{}, {}]",
                    discrete / f,
                    discrete * f
                )
            },
        )?;
    }
    Ok(())
}

fn c9_discrete_optimality() -> Check {
    let e = eps(1.0);
    let mut total = 0;
    for prior in ["uniform", "linear", "step"] {
        let p = resolve_prior(prior).unwrap();
        for n in [2usize, 4, 8] {
            let grid = Grid::new(n).unwrap();
            for loss in [
                LossFunction::builtin_len(grid),
                LossFunction::builtin_len2(grid),
            ] {
                let r = discrete_optimality_trial(e, n, &p, &loss, 100, 2024)
                    .map_err(|e| e.to_string())?;
                ensure(r.samples == 100, || "sample count".into())?;
                ensure(r.violations.is_empty(), || {
                    format!(
                        "{prior} N={n} {}: {} violations, min margin {}",
                        loss.label(),
                        r.violations.len(),
                        r.min_margin
                    )
                })?;
                total += r.samples;
            }
        }
    }
    println!("    {total} sampled competitors, no violations");
    Ok(())
}

fn random_hyper(rng: &mut ChaCha8Rng, n: usize) -> Hyper {
    let k = rng.random_range(2..=6);
    let rows: Vec<Vec<f64>> = (0..=n)
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let outputs = (0..k).map(|j| j as f64 / (k - 1) as f64).collect();
    let c = make_channel(Grid::new(n).unwrap().points(), outputs, rows).unwrap();
    let w: Vec<f64> = (0..=n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    let prior = DiscreteDist::new(
        c.input_support().to_vec(),
        w.iter().map(|x| x / s).collect(),
    )
    .unwrap();
    hyper_of(&push_joint(&prior, &c).unwrap())
}

/// Guess rows on U_n, each 1-Lipschitz across the secrets of U_n.
fn random_lipschitz_table(rng: &mut ChaCha8Rng, n: usize) -> LossFunction {
    let step = 1.0 / n as f64;
    let rows = (0..=n)
        .map(|_| {
            let mut v = vec![rng.random_range(0.0..1.0)];
            for _ in 0..n {
                let last = *v.last().unwrap();
                v.push(last + rng.random_range(-step..step));
            }
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            v.into_iter().map(|x| x - lo).collect()
        })
        .collect();
    LossFunction::table(rows).unwrap()
}

fn c10_kantorovich_rubinstein() -> Check {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = Grid::new(n).unwrap();
    let mut losses = vec![
        LossFunction::builtin_len(grid),
        LossFunction::builtin_len2(grid),
    ];
    for _ in 0..10 {
        losses.push(random_lipschitz_table(&mut rng, n));
    }
    for l in &losses[2..] {
        ensure(l.kappa().unwrap() <= 1.0, || {
            format!("table κ {:?}", l.kappa())
        })?;
    }
    let ey = |h: &Hyper, l: &LossFunction| h.expect(|d| uncertainty(l, d).unwrap().0);
    for pair in 0..50 {
        let a = random_hyper(&mut rng, n);
        let b = random_hyper(&mut rng, n);
        let k = kantorovich_hyper(&a, &b).map_err(|e| e.to_string())?;
        for l in &losses {
            let kappa = l.kappa().unwrap();
            let diff = (ey(&a, l) - ey(&b, l)).abs();
            ensure(diff <= kappa * k + 1e-9, || {
                format!("pair {pair} {}: {diff} > {kappa}·{k}", l.label())
            })?;
        }
    }
    Ok(())
}

fn c11_determinism() -> Check {
    let cfg = ExperimentConfig {
        n_list: vec![2, 4, 8, 16, 32, 64],
        seed: 42,
        ..ExperimentConfig::default()
    };
    let a = run_convergence(&cfg).map_err(|e| e.to_string())?.csv();
    let b = run_convergence(&cfg).map_err(|e| e.to_string())?.csv();
    ensure(a.as_bytes() == b.as_bytes(), || {
        "CSV differs between runs".into()
    })
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Check, u64); 11] = [
        ("1 geometric fixtures", c1_geometric_fixtures, 1),
        ("2 truncation fixture", c2_truncation, 1),
        ("3 worked loss example", c3_worked_loss, 1),
        ("4 max divergence fixture", c4_max_divergence, 1),
        ("5 DP tightness", c5_dp_tightness, 5),
        ("6 refinement certificates", c6_refinement, 30),
        ("7 gap bound", c7_gap_bound, 120),
        ("8 pixelation sandwich", c8_pixelation_sandwich, 60),
        (
            "9 discrete optimality sampling",
            c9_discrete_optimality,
            180,
        ),
        ("10 Kantorovich-Rubinstein", c10_kantorovich_rubinstein, 60),
        ("11 determinism", c11_determinism, 120),
    ];
    let mut failed = Vec::new();
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {p:?}")))
            .and_then(|()| {
                let took = start.elapsed();
                ensure(took <= Duration::from_secs(limit), || {
                    format!("took {took:?}, limit {limit}s")
                })
            });
        let took = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS criterion {name} ({took:.2}s)"),
            Err(msg) => {
                println!("FAIL criterion {name} ({took:.2}s): {msg}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
