use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dpopt::experiments::{
    discrete_optimality_trial, main_theorem_demo, resolve_prior, run_convergence, ExperimentConfig,
};
use dpopt::mechanisms::{truncated_laplace, verify_dp};
use dpopt::num::fmt_sig;
use dpopt::pixelate::TruncatedLaplace;
use dpopt::refine::{
    find_postprocessor, hull_refinement_check, kantorovich_hyper, Refinement, RefinementWitness,
};
use dpopt::{
    expected_loss_continuous, expected_loss_discrete, geometric_channel, hyper_of, pixelate_prior,
    push_joint, t_pixelated_laplace, Channel, DiscreteDist, EpsilonParams, Error, LossFunction,
};

#[derive(Parser)]
#[command(
    name = "dpopt",
    version,
    about = "Private mechanisms as channels: losses, refinement, convergence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mechanism and print it.
    Mech(MechArgs),
    /// Check a channel file for ε-DP on its inputs.
    DpCheck {
        channel: PathBuf,
        #[arg(long)]
        eps: f64,
    },
    /// Expected loss of one mechanism under one prior.
    Loss(LossArgs),
    /// Decide refinement between two channels.
    Refine {
        fine: PathBuf,
        coarse: PathBuf,
        /// Discrete prior JSON ({"support":[..],"probs":[..]}); uniform by default.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Print the pixelated prior on U_N.
    Pixelate {
        #[arg(long, default_value = "uniform")]
        prior: String,
        #[arg(long)]
        n: usize,
    },
    /// Geo vs pixelated Laplace over a sweep of N; writes CSV.
    Converge(ExpArgs),
    /// Geo against random ε-DP channels.
    Optimality(ExpArgs),
    /// Check the inequality chain for truncated Laplace optimality.
    Demo(ExpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Geo,
    Tlap,
    Laplace,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct MechArgs {
    #[arg(value_enum)]
    kind: Kind,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    /// Input for `laplace`.
    #[arg(long)]
    x: Option<f64>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct LossArgs {
    /// `geo`, `tlap`, `laplace`, or a channel JSON file.
    #[arg(long)]
    mech: String,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value = "uniform")]
    prior: String,
    #[arg(long, default_value = "len")]
    loss: String,
}

#[derive(Args)]
struct ExpArgs {
    /// JSON or TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    t_factor: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.eps {
            cfg.epsilon = v;
        }
        if let Some(v) = &self.prior {
            cfg.prior = v.clone();
        }
        if let Some(v) = &self.loss {
            cfg.loss = v.clone();
        }
        if let Some(v) = &self.n {
            cfg.n_list = v.clone();
        }
        if let Some(v) = self.t_factor {
            cfg.t_factor = v;
        }
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Outcome {
    Ok,
    Violation,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = std::env::var("DPOPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violation) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<Outcome, Error> {
    match cmd {
        Command::Mech(a) => mech(a),
        Command::DpCheck { channel, eps } => {
            let c = read_channel(&channel)?;
            let r = verify_dp(&c, EpsilonParams::new(eps)?);
            println!(
                "holds: {}\ntightness: {}",
                r.holds,
                fmt_sig(r.tightness, 12)
            );
            Ok(if r.holds {
                Outcome::Ok
            } else {
                Outcome::Violation
            })
        }
        Command::Loss(a) => loss(a),
        Command::Refine {
            fine,
            coarse,
            prior,
        } => refine(&fine, &coarse, prior.as_deref()),
        Command::Pixelate { prior, n } => {
            let p = pixelate_prior(&resolve_prior(&prior)?, n)?;
            print_json(&rounded(serde_json::to_value(&p)?));
            Ok(Outcome::Ok)
        }
        Command::Converge(a) => converge(&a.config()?),
        Command::Optimality(a) => optimality(&a.config()?),
        Command::Demo(a) => demo(&a.config()?),
    }
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T, Error> {
    v.ok_or_else(|| Error::InvalidConfig(format!("missing --{flag}")))
}

fn read_channel(path: &Path) -> Result<Channel, Error> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

/// Round every number to 12 significant digits.
fn rounded(v: Value) -> Value {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => json!(fmt_sig(f, 12).parse::<f64>().unwrap_or(f)),
            _ => Value::Number(n),
        },
        Value::Array(a) => Value::Array(a.into_iter().map(rounded).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, rounded(v))).collect()),
        other => other,
    }
}

fn mech(a: MechArgs) -> Result<Outcome, Error> {
    let eps = EpsilonParams::new(a.eps)?;
    let channel = match a.kind {
        Kind::Geo => geometric_channel(eps, need(a.n, "n")?)?,
        Kind::Tlap => t_pixelated_laplace(eps, need(a.n, "n")?, need(a.t, "t")?)?,
        Kind::Laplace => {
            let m = truncated_laplace(eps, need(a.x, "x")?)?;
            print_json(&rounded(serde_json::to_value(&m)?));
            return Ok(Outcome::Ok);
        }
    };
    match a.format {
        Format::Json => print_json(&rounded(serde_json::to_value(&channel)?)),
        Format::Text => print!("{}", channel_text(&channel)),
    }
    Ok(Outcome::Ok)
}

fn channel_text(c: &Channel) -> String {
    let cell = |v: f64| format!("{v:.12}");
    let mut lines = vec![std::iter::once(format!("{:>8}", "x\\y"))
        .chain(
            c.output_support()
                .iter()
                .map(|&y| format!("{:>14}", cell(y))),
        )
        .collect::<Vec<_>>()
        .join(" ")];
    for (x, row) in c.input_support().iter().zip(c.rows()) {
        lines.push(
            std::iter::once(format!("{:>8}", fmt_sig(*x, 6)))
                .chain(row.iter().map(|&v| format!("{:>14}", cell(v))))
                .collect::<Vec<_>>()
                .join(" "),
        );
    }
    lines.join("\n") + "\n"
}

fn loss(a: LossArgs) -> Result<Outcome, Error> {
    let value = match a.mech.as_str() {
        "laplace" => {
            let eps = EpsilonParams::new(need(a.eps, "eps")?)?;
            let prior = resolve_prior(&a.prior)?;
            let n = need(a.n, "n")?;
            let l = LossFunction::by_name(&a.loss, n)?;
            expected_loss_continuous(&prior, &TruncatedLaplace { eps }, &l)?
        }
        kind => {
            let channel = match kind {
                "geo" => {
                    geometric_channel(EpsilonParams::new(need(a.eps, "eps")?)?, need(a.n, "n")?)?
                }
                "tlap" => t_pixelated_laplace(
                    EpsilonParams::new(need(a.eps, "eps")?)?,
                    need(a.n, "n")?,
                    need(a.t, "t")?,
                )?,
                path => read_channel(Path::new(path))?,
            };
            let n = channel.n_inputs() - 1;
            let prior = if a.prior.ends_with(".json") && is_discrete(Path::new(&a.prior)) {
                serde_json::from_str(&std::fs::read_to_string(&a.prior)?)?
            } else {
                pixelate_prior(&resolve_prior(&a.prior)?, n)?
            };
            let l = LossFunction::by_name(&a.loss, n)?;
            expected_loss_discrete(&prior, &channel, &l)?
        }
    };
    println!("{}", fmt_sig(value, 12));
    Ok(Outcome::Ok)
}

fn is_discrete(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|s| serde_json::from_str::<Value>(&s).ok())
        .is_some_and(|v| v.get("support").is_some())
}

fn witness_json(w: &RefinementWitness) -> Value {
    match w {
        RefinementWitness::PostProcessor(r) => json!({"postprocessor": r}),
        RefinementWitness::ConvexHull(c) => json!({"convex_hull": c}),
        RefinementWitness::Chain(ws) => {
            json!({"chain": ws.iter().map(witness_json).collect::<Vec<_>>()})
        }
    }
}

fn refine(fine: &Path, coarse: &Path, prior: Option<&Path>) -> Result<Outcome, Error> {
    let c1 = read_channel(fine)?;
    let c2 = read_channel(coarse)?;
    let prior = match prior {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => DiscreteDist::uniform_on(c1.input_support().to_vec())?,
    };
    let j1 = push_joint(&prior, &c1)?;
    let j2 = push_joint(&prior, &c2)?;
    let (refined, witness) = match find_postprocessor(&j1, &j2)? {
        Refinement::Refined(w) => (json!(true), witness_json(&w)),
        Refinement::NotRefined => match hull_refinement_check(&c1, &c2) {
            Ok(Refinement::Refined(w)) => (json!(true), witness_json(&w)),
            Ok(Refinement::NotRefined) => (json!(false), Value::Null),
            Err(Error::LinearDependence(_)) => (json!("undecided"), Value::Null),
            Err(e) => return Err(e),
        },
    };
    let k = kantorovich_hyper(&hyper_of(&j1), &hyper_of(&j2))?;
    print_json(&rounded(
        json!({"refined": refined, "witness": witness, "kantorovich": k}),
    ));
    Ok(Outcome::Ok)
}

fn converge(cfg: &ExperimentConfig) -> Result<Outcome, Error> {
    let report = run_convergence(cfg)?;
    let csv = report.csv();
    match &cfg.output {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(if report.violations.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Violation
    })
}

fn optimality(cfg: &ExperimentConfig) -> Result<Outcome, Error> {
    let eps = cfg.eps()?;
    let prior = cfg.resolve_prior()?;
    let mut bad = false;
    for &n in &cfg.n_list {
        let loss = cfg.loss_for(n)?;
        let r = discrete_optimality_trial(eps, n, &prior, &loss, cfg.samples, cfg.seed)?;
        println!(
            "N={} loss_geo={} min_margin={} samples={} violations={}",
            n,
            fmt_sig(r.loss_geo, 12),
            fmt_sig(r.min_margin, 12),
            r.samples,
            r.violations.len()
        );
        for v in &r.violations {
            bad = true;
            eprintln!(
                "violation: sample {} (seed {}) loss {}: {}",
                v.index,
                v.seed,
                fmt_sig(v.loss, 12),
                serde_json::to_string(&v.channel)?
            );
        }
    }
    Ok(if bad { Outcome::Violation } else { Outcome::Ok })
}

fn demo(cfg: &ExperimentConfig) -> Result<Outcome, Error> {
    let report = main_theorem_demo(
        cfg.eps()?,
        &cfg.resolve_prior()?,
        &cfg.loss,
        &cfg.n_list,
        cfg.samples,
        cfg.seed,
    )?;
    println!("N,loss_lap,loss_geo,lower_bound,min_observed_gap,competitors,violations");
    for r in &report.rows {
        println!(
            "{},{},{},{},{},{},{}",
            r.n,
            fmt_sig(r.loss_lap, 12),
            fmt_sig(r.loss_geo, 12),
            fmt_sig(r.lower_bound, 12),
            r.min_observed_gap
                .map(|g| fmt_sig(g, 12))
                .unwrap_or_default(),
            r.competitors.len(),
            r.violations.len()
        );
    }
    let mut bad = false;
    for v in report.violations() {
        bad = true;
        eprintln!(
            "violation: N={} {} link {}: {} < {}",
            v.n,
            v.competitor,
            v.link + 1,
            fmt_sig(v.lhs, 12),
            fmt_sig(v.rhs, 12)
        );
    }
    if !report.lower_bounds_improve() {
        bad = true;
        eprintln!("violation: implied lower bounds do not rise towards 0");
    }
    Ok(if bad { Outcome::Violation } else { Outcome::Ok })
}
