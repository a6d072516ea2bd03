//! Command-line surface: simulate, fit, select, predict, evaluate, benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use vbhp::engine::{
    background_mode, fit, interp1, predictive_kernel, predictive_mode_curve, FitConfig, Priors,
};
use vbhp::eval::{benchmark_scaling, grid_select, hll, l2_mu, l2_phi, log_log_slope, log_spaced, split};
use vbhp::events::{load_events, save_events, EventFormat};
use vbhp::gp::{Domain, InducingGrid, KernelConfig};
use vbhp::model::ModelFile;
use vbhp::sim::{simulate, SimConfig, TriggeringKernel};
use vbhp::special::gamma_quantile;
use vbhp::Error;

/// Variational Bayesian inference for non-parametric Hawkes processes.
#[derive(Parser)]
#[command(name = "vbhp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Hawkes process by Ogata thinning and write an events file.
    Simulate(SimulateArgs),
    /// Fit the variational model at fixed kernel hyperparameters.
    Fit(FitArgs),
    /// Select kernel hyperparameters on a grid by the marginal-likelihood bound.
    Select(SelectArgs),
    /// Tabulate the posterior triggering kernel from a saved model.
    Predict(PredictArgs),
    /// Score a saved model on held-out splits (and against a known truth).
    Evaluate(EvaluateArgs),
    /// Measure per-iteration fit time across sequence sizes.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in triggering kernel: sin, cos, exp, zero.
    #[arg(long, conflicts_with = "kernel_file")]
    kernel: Option<String>,
    /// Piecewise-linear kernel from a CSV of "lag,value" rows.
    #[arg(long)]
    kernel_file: Option<PathBuf>,
    /// Background intensity.
    #[arg(long)]
    mu: f64,
    /// Observation window length.
    #[arg(long)]
    t_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output events file (.json for JSON, anything else for CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Input events file (.json or one-timestamp-per-line CSV).
    #[arg(long)]
    events: PathBuf,
    /// Rescale the observed span to [0, SCALE_TO) before fitting.
    #[arg(long)]
    scale_to: Option<f64>,
    /// Kernel variance γ.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Kernel length-scale α.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Number of inducing points.
    #[arg(long, default_value_t = 10)]
    inducing: usize,
    /// Triggering-kernel support truncation (default 0.45·T).
    #[arg(long)]
    support: Option<f64>,
    /// Disable support truncation entirely.
    #[arg(long, default_value_t = false)]
    no_truncation: bool,
    /// Gamma prior shape (default 1).
    #[arg(long)]
    k0: Option<f64>,
    /// Gamma prior scale (default half the empirical rate).
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    scale_to: Option<f64>,
    /// Comma-separated γ candidates (default: 7 log-spaced in [1e-1, 1e2]).
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    /// Comma-separated α candidates (default: 7 log-spaced in [1e-3, 1e1]).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    inducing: usize,
    #[arg(long)]
    support: Option<f64>,
    #[arg(long, default_value_t = false)]
    no_truncation: bool,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    /// Output model file for the winning configuration.
    #[arg(long)]
    out: PathBuf,
    /// Optional contour table (gamma, alpha, bound) for external plotting.
    #[arg(long)]
    contour: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Lower edge of the prediction interval.
    #[arg(long, default_value_t = 0.0)]
    from: f64,
    /// Upper edge of the prediction interval (default 1.4).
    #[arg(long, default_value_t = 1.4)]
    to: f64,
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Output table; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    scale_to: Option<f64>,
    /// Ground-truth kernel name for L₂ scoring (sin, cos, exp, zero).
    #[arg(long)]
    truth: Option<String>,
    /// Ground-truth background intensity for L₂ scoring.
    #[arg(long)]
    mu_true: Option<f64>,
    /// Number of train/test thinning splits for the HLL table.
    #[arg(long, default_value_t = 20)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper edge of the predictive support for L₂ and HLL quadrature.
    #[arg(long, default_value_t = 1.4)]
    support: f64,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Comma-separated target sequence sizes.
    #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    inducing: usize,
    /// Timed EM iterations per size.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// 17 significant digits, round-trip exact for f64.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Argument(_) | Error::Domain(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Numerical(_) | Error::State(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> vbhp::Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}

fn kernel_from_file(path: &PathBuf) -> vbhp::Result<TriggeringKernel> {
    let text = std::fs::read_to_string(path)?;
    let mut ts = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Data(format!(
                "{}:{}: expected 'lag,value'",
                path.display(),
                lineno + 1
            )));
        }
        let t: f64 = parts[0].trim().parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad lag '{}'", path.display(), lineno + 1, parts[0]))
        })?;
        let v: f64 = parts[1].trim().parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad value '{}'", path.display(), lineno + 1, parts[1]))
        })?;
        if v < 0.0 {
            return Err(Error::Data(format!(
                "{}:{}: triggering kernel values must be non-negative",
                path.display(),
                lineno + 1
            )));
        }
        ts.push(t);
        values.push(v);
    }
    if ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(format!("{}: lags must be strictly increasing", path.display())));
    }
    if ts.is_empty() {
        return Err(Error::Data(format!("{}: empty kernel file", path.display())));
    }
    Ok(TriggeringKernel::Interp { ts, values })
}

fn cmd_simulate(a: SimulateArgs) -> vbhp::Result<()> {
    let kernel = match (&a.kernel, &a.kernel_file) {
        (Some(name), None) => TriggeringKernel::by_name(name)
            .ok_or_else(|| Error::Argument(format!("unknown kernel '{name}'")))?,
        (None, Some(path)) => kernel_from_file(path)?,
        _ => return Err(Error::Argument("provide exactly one of --kernel or --kernel-file".into())),
    };
    let sim = simulate(&SimConfig {
        mu: a.mu,
        t_max: a.t_max,
        kernel,
        seed: a.seed,
        record_branching: false,
    })?;
    save_events(&sim.events, &a.out, EventFormat::from_path(&a.out))?;
    println!("events {}", sim.events.len());
    println!("t_max {}", fmt(sim.events.t_max));
    Ok(())
}

fn default_support(no_truncation: bool, support: Option<f64>, t_max: f64) -> Option<f64> {
    if no_truncation {
        None
    } else {
        Some(support.unwrap_or(0.45 * t_max))
    }
}

fn cmd_fit(a: FitArgs) -> vbhp::Result<()> {
    let events = load_events(&a.events, EventFormat::from_path(&a.events), a.scale_to)?;
    let defaults = Priors::default_for(&events);
    let priors = Priors::new(a.k0.unwrap_or(1.0), a.c0.unwrap_or(defaults.c0))?;
    let kernel_cfg = KernelConfig::new(a.gamma, vec![a.alpha])?;
    let domain = Domain::interval(events.t_max)?;
    let grid = InducingGrid::regular(&domain, a.inducing)?;
    let fit_cfg = FitConfig {
        max_em_iterations: a.max_iterations,
        elbo_relative_tolerance: a.tolerance,
        support: default_support(a.no_truncation, a.support, events.t_max),
        ..FitConfig::default()
    };
    let (state, report) = fit(&events, &priors, &kernel_cfg, &grid, &fit_cfg)?;
    let model =
        ModelFile::from_fit(&kernel_cfg, &grid, &domain, &state, &priors, fit_cfg.support, &report);
    model.save(&a.out)?;
    println!("events {}", events.len());
    println!("iterations {}", report.iterations);
    println!("converged {}", report.converged);
    println!("bound {}", fmt(report.bound));
    println!("elbo {}", fmt(*report.elbo_trace.last().unwrap()));
    println!("background_mode {}", fmt(background_mode(&state)));
    Ok(())
}

fn cmd_select(a: SelectArgs) -> vbhp::Result<()> {
    let events = load_events(&a.events, EventFormat::from_path(&a.events), a.scale_to)?;
    let priors = Priors::default_for(&events);
    let gammas = a.gammas.unwrap_or_else(|| log_spaced(1e-1, 1e2, 7));
    let alphas = a.alphas.unwrap_or_else(|| log_spaced(1e-3, 1e1, 7));
    let fit_cfg = FitConfig {
        max_em_iterations: a.max_iterations,
        support: default_support(a.no_truncation, a.support, events.t_max),
        ..FitConfig::default()
    };
    let sel = grid_select(&events, &gammas, &alphas, &priors, a.inducing, &fit_cfg)?;
    let domain = Domain::interval(events.t_max)?;
    let grid = InducingGrid::regular(&domain, a.inducing)?;
    let model = ModelFile::from_fit(
        &sel.best,
        &grid,
        &domain,
        &sel.state,
        &priors,
        fit_cfg.support,
        &sel.report,
    );
    model.save(&a.out)?;
    if let Some(contour) = &a.contour {
        let mut file = std::fs::File::create(contour)?;
        writeln!(file, "gamma\talpha\tbound")?;
        for cell in &sel.table {
            let bound = cell.bound.map(fmt).unwrap_or_else(|| "failed".into());
            writeln!(file, "{}\t{}\t{}", fmt(cell.gamma), fmt(cell.alpha), bound)?;
        }
    }
    println!("gamma {}", fmt(sel.best.gamma));
    println!("alpha {}", fmt(sel.best.alphas[0]));
    println!("bound {}", fmt(sel.report.bound));
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> vbhp::Result<()> {
    let model = ModelFile::load(&a.model)?;
    let gp = model.gp_context()?;
    let state = model.state();
    if a.points < 2 || a.to <= a.from {
        return Err(Error::Argument("need at least 2 points and to > from".into()));
    }
    let mut lines = String::from("x\tmode\tshape\tscale\tq10\tq90\n");
    for i in 0..a.points {
        let x = a.from + (a.to - a.from) * i as f64 / (a.points - 1) as f64;
        let (k, c) = predictive_kernel(&gp, &state, &[x])?;
        let mode = if k > 1.0 { (k - 1.0) * c } else { 0.0 };
        let q10 = gamma_quantile(k, c, 0.1)?;
        let q90 = gamma_quantile(k, c, 0.9)?;
        lines.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            fmt(x),
            fmt(mode),
            fmt(k),
            fmt(c),
            fmt(q10),
            fmt(q90)
        ));
    }
    match &a.out {
        Some(path) => std::fs::write(path, lines)?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> vbhp::Result<()> {
    let model = ModelFile::load(&a.model)?;
    let gp = model.gp_context()?;
    let state = model.state();
    let events = load_events(&a.events, EventFormat::from_path(&a.events), a.scale_to)?;
    if events.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty sequence".into()));
    }
    let curve = predictive_mode_curve(&gp, &state, 0.0, a.support, 1000)?;
    let phi_pred = |t: f64| interp1(&curve, t);
    let mu_mode = background_mode(&state);

    if let Some(truth_name) = &a.truth {
        let truth = TriggeringKernel::by_name(truth_name)
            .ok_or_else(|| Error::Argument(format!("unknown kernel '{truth_name}'")))?;
        let l2 = l2_phi(phi_pred, |t| truth.eval(t), 0.0, a.support, 1000);
        println!("l2_phi {}", fmt(l2));
        if let Some(mu_true) = a.mu_true {
            println!("l2_mu {}", fmt(l2_mu(mu_mode, mu_true)));
        }
    }

    println!("split\thll");
    let mut values = Vec::new();
    for s in 0..a.splits {
        let (_, test) = split(&events, a.seed.wrapping_add(s as u64));
        match hll(&test, mu_mode, phi_pred, Some(a.support), 1000) {
            Some(v) => {
                println!("{s}\t{}", fmt(v));
                values.push(v);
            }
            None => println!("{s}\tempty"),
        }
    }
    if !values.is_empty() {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = values[values.len() / 2];
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("hll_median {}", fmt(median));
        println!("hll_mean {}", fmt(mean));
    }
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> vbhp::Result<()> {
    if a.sizes.len() < 2 {
        return Err(Error::Argument("benchmark needs at least two sizes".into()));
    }
    let points = benchmark_scaling(&a.sizes, a.inducing, a.iterations, a.seed)?;
    println!("target_n\tactual_n\tseconds_per_iteration");
    for p in &points {
        println!("{}\t{}\t{}", p.target_n, p.actual_n, fmt(p.per_iteration_seconds));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.actual_n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.per_iteration_seconds).collect();
    let slope = log_log_slope(&xs, &ys)?;
    println!("loglog_slope {}", fmt(slope));
    Ok(())
}
