//! Metrics (L₂ distance, held-out log-likelihood), train/test splitting,
//! hyperparameter selection by the tighter bound, and scaling benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{fit, FitConfig, FitReport, Priors, VariationalState};
use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::gp::{Domain, InducingGrid, KernelConfig};
use crate::sim::{simulate, SimConfig, TriggeringKernel};

/// Evaluation defaults: quadrature resolution, predictive support, split
/// count, and the hyperparameter grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub quad_points: usize,
    pub support: [f64; 2],
    pub n_splits: usize,
    pub seed: u64,
    pub gamma_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            quad_points: 1000,
            support: [0.0, 1.4],
            n_splits: 20,
            seed: 0,
            gamma_values: log_spaced(1e-1, 1e2, 7),
            alpha_values: log_spaced(1e-3, 1e1, 7),
        }
    }
}

/// n geometrically spaced values from lo to hi inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// L₂ distance (∫ (φ_pred − φ_true)² dx)^½ on [lo, hi] by n-point trapezoid.
pub fn l2_phi(
    phi_pred: impl Fn(f64) -> f64,
    phi_true: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> f64 {
    assert!(n >= 2 && hi > lo);
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + i as f64 * h;
        let d = phi_pred(x) - phi_true(x);
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * d * d;
    }
    (acc * h).sqrt()
}

/// |μ_pred − μ_true|.
pub fn l2_mu(mu_pred: f64, mu_true: f64) -> f64 {
    (mu_pred - mu_true).abs()
}

/// Held-out log-likelihood per point on [0, t_max]:
/// [Σ_j log λ(x_j) − μ|T| − Σ_i ∫ φ over the truncated forward window] / N.
/// The intensity at each test point is built from the earlier test points.
/// Returns None on an empty test sequence (the metric is undefined).
pub fn hll(
    test: &EventSequence,
    mu_pred: f64,
    phi_pred: impl Fn(f64) -> f64,
    support: Option<f64>,
    quad_points: usize,
) -> Option<f64> {
    if test.is_empty() {
        return None;
    }
    let ts = &test.timestamps;
    let n = ts.len();
    let cap = support.unwrap_or(f64::INFINITY);
    let mut log_term = 0.0;
    for j in 0..n {
        let mut lam = mu_pred;
        for i in (0..j).rev() {
            let lag = ts[j] - ts[i];
            if lag > cap {
                break;
            }
            lam += phi_pred(lag);
        }
        log_term += lam.max(1e-300).ln();
    }
    let mut compensator = mu_pred * test.t_max;
    for &t in ts {
        let hi = (test.t_max - t).min(cap);
        if hi > 0.0 {
            compensator += trapezoid(&phi_pred, 0.0, hi, quad_points.max(2));
        }
    }
    Some((log_term - compensator) / n as f64)
}

fn trapezoid(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for i in 1..n - 1 {
        acc += f(lo + i as f64 * h);
    }
    acc * h
}

/// Thinning split: each point goes to train or test independently with
/// probability ½. Both halves keep the full observation window.
pub fn split(seq: &EventSequence, seed: u64) -> (EventSequence, EventSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &t in &seq.timestamps {
        if rng.random::<f64>() < 0.5 {
            train.push(t);
        } else {
            test.push(t);
        }
    }
    (
        EventSequence::new(train, seq.t_max).expect("subset of a valid sequence"),
        EventSequence::new(test, seq.t_max).expect("subset of a valid sequence"),
    )
}

/// One grid cell of the model-selection sweep; bound is None for failed fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub gamma: f64,
    pub alpha: f64,
    pub bound: Option<f64>,
}

pub struct GridSelection {
    pub best: KernelConfig,
    pub state: VariationalState,
    pub report: FitReport,
    pub table: Vec<GridCell>,
}

/// Index of the winning cell: highest bound, ties broken toward smaller γ
/// then smaller α (cells arrive sorted that way). Failed fits are skipped.
pub fn pick_best(table: &[GridCell]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cell) in table.iter().enumerate() {
        if let Some(b) = cell.bound {
            if b.is_finite() && best.map_or(true, |(_, bb)| b > bb) {
                best = Some((i, b));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Fit every (γ, α) candidate concurrently and keep the configuration that
/// maximizes the tighter marginal-likelihood bound.
pub fn grid_select(
    events: &EventSequence,
    gammas: &[f64],
    alphas: &[f64],
    priors: &Priors,
    inducing_per_dim: usize,
    fit_cfg: &FitConfig,
) -> Result<GridSelection> {
    if gammas.is_empty() || alphas.is_empty() {
        return Err(Error::Argument("hyperparameter grid is empty".into()));
    }
    let domain = Domain::interval(events.t_max)?;
    let grid = InducingGrid::regular(&domain, inducing_per_dim)?;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for &g in gammas {
        for &a in alphas {
            pairs.push((g, a));
        }
    }
    pairs.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let results: Vec<(GridCell, Option<(VariationalState, FitReport)>)> = pairs
        .par_iter()
        .map(|&(gamma, alpha)| {
            let outcome = KernelConfig::new(gamma, vec![alpha])
                .and_then(|cfg| fit(events, priors, &cfg, &grid, fit_cfg));
            match outcome {
                Ok((state, report)) if report.bound.is_finite() => (
                    GridCell { gamma, alpha, bound: Some(report.bound) },
                    Some((state, report)),
                ),
                _ => (GridCell { gamma, alpha, bound: None }, None),
            }
        })
        .collect();

    let table: Vec<GridCell> = results.iter().map(|(c, _)| c.clone()).collect();
    let winner = pick_best(&table)
        .ok_or_else(|| Error::Numerical("every grid configuration failed to fit".into()))?;
    let (cell, fitted) = &results[winner];
    let (state, report) = fitted.clone().expect("winner has a successful fit");
    Ok(GridSelection {
        best: KernelConfig::new(cell.gamma, vec![cell.alpha])?,
        state,
        report,
        table,
    })
}

/// One measurement of the scaling benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkPoint {
    pub target_n: usize,
    pub actual_n: usize,
    pub per_iteration_seconds: f64,
}

/// Per-iteration fit time across sequence sizes, on synthetic subcritical
/// sequences with event density held near 100 events per unit time so that
/// support truncation keeps the admissible-pair count linear in N.
pub fn benchmark_scaling(
    sizes: &[usize],
    inducing_per_dim: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<BenchmarkPoint>> {
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n < 10 {
            return Err(Error::Argument("benchmark sizes must be at least 10".into()));
        }
        // simulate past a burn-in so the event density is at its steady state
        // for every window length (otherwise pairs-per-event, and thus the
        // per-iteration cost, grows with N and distorts the slope)
        let t_max = n as f64 / 100.0;
        let burn_in = 5.0;
        let sim = simulate(&SimConfig {
            mu: 10.0,
            t_max: t_max + burn_in,
            kernel: TriggeringKernel::Exponential { amplitude: 4.5, rate: 5.0 },
            seed: seed.wrapping_add(n as u64),
            record_branching: false,
        })?;
        let ts: Vec<f64> = sim
            .events
            .timestamps
            .iter()
            .filter(|&&t| t >= burn_in)
            .map(|&t| t - burn_in)
            .collect();
        let events = EventSequence::new(ts, t_max)?;
        let priors = Priors::default_for(&events);
        let kernel_cfg = KernelConfig::new(1.0, vec![0.1])?;
        let domain = events.domain();
        let grid = InducingGrid::regular(&domain, inducing_per_dim)?;
        let fit_cfg = FitConfig {
            max_em_iterations: iterations,
            elbo_relative_tolerance: 0.0, // run the full budget; we time iterations
            support: Some(1.4f64.min(t_max)),
            ..FitConfig::default()
        };
        let (_, report) = fit(&events, &priors, &kernel_cfg, &grid, &fit_cfg)?;
        let per_iter =
            report.iter_times.iter().sum::<f64>() / report.iter_times.len().max(1) as f64;
        out.push(BenchmarkPoint {
            target_n: n,
            actual_n: events.len(),
            per_iteration_seconds: per_iter,
        });
    }
    Ok(out)
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument("slope needs at least two matched samples".into()));
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::Argument("log-log slope needs positive samples".into()));
    }
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if var == 0.0 {
        return Err(Error::Argument("slope needs at least two distinct sizes".into()));
    }
    Ok(cov / var)
}
