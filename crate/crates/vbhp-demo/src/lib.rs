//! Browser bindings: simulate a Hawkes sequence, trace its intensity, and
//! fit + predict the triggering kernel — all returning JSON strings the demo
//! page renders on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vbhp::engine::{
    background_mode, fit, interp1, predictive_kernel, predictive_mode_curve, FitConfig, Priors,
};
use vbhp::events::EventSequence;
use vbhp::gp::{Domain, GpContext, InducingGrid, KernelConfig};
use vbhp::sim::{intensity_at, simulate, SimConfig, TriggeringKernel};
use vbhp::special::gamma_quantile;

fn err_js(e: vbhp::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn kernel_by_name(name: &str) -> Result<TriggeringKernel, JsValue> {
    TriggeringKernel::by_name(name)
        .ok_or_else(|| JsValue::from_str(&format!("unknown kernel '{name}'")))
}

#[derive(Serialize)]
struct SimulateOut {
    events: Vec<f64>,
    t_max: f64,
}

/// Simulate a Hawkes sequence; returns {"events": [...], "t_max": ...}.
#[wasm_bindgen]
pub fn demo_simulate(kernel: &str, mu: f64, t_max: f64, seed: u64) -> Result<String, JsValue> {
    let kernel = kernel_by_name(kernel)?;
    let sim = simulate(&SimConfig { mu, t_max, kernel, seed, record_branching: false })
        .map_err(err_js)?;
    let out = SimulateOut { events: sim.events.timestamps, t_max };
    Ok(serde_json::to_string(&out).unwrap())
}

#[derive(Serialize)]
struct CurveOut {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

/// Conditional intensity λ(t) of a simulated sequence on a regular grid.
#[wasm_bindgen]
pub fn demo_intensity(
    kernel: &str,
    mu: f64,
    t_max: f64,
    seed: u64,
    points: usize,
) -> Result<String, JsValue> {
    let kernel = kernel_by_name(kernel)?;
    let sim = simulate(&SimConfig { mu, t_max, kernel: kernel.clone(), seed, record_branching: false })
        .map_err(err_js)?;
    let ts = &sim.events.timestamps;
    let n = points.max(2);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let t = t_max * i as f64 / (n - 1) as f64;
        let upto = ts.partition_point(|&x| x < t);
        xs.push(t);
        ys.push(intensity_at(t, &ts[..upto], mu, &kernel));
    }
    Ok(serde_json::to_string(&CurveOut { xs, ys }).unwrap())
}

#[derive(Serialize)]
struct FitOut {
    xs: Vec<f64>,
    mode: Vec<f64>,
    q10: Vec<f64>,
    q90: Vec<f64>,
    truth: Vec<f64>,
    background_mode: f64,
    elbo_trace: Vec<f64>,
    converged: bool,
    n_events: usize,
}

/// Simulate, fit the variational model, and return the posterior triggering
/// kernel (mode and [0.1, 0.9] credible band) on [0, support].
#[wasm_bindgen]
pub fn demo_fit_predict(
    kernel: &str,
    mu: f64,
    t_max: f64,
    seed: u64,
    gamma: f64,
    alpha: f64,
    inducing: usize,
    support: f64,
    points: usize,
) -> Result<String, JsValue> {
    let true_kernel = kernel_by_name(kernel)?;
    let sim = simulate(&SimConfig {
        mu,
        t_max,
        kernel: true_kernel.clone(),
        seed,
        record_branching: false,
    })
    .map_err(err_js)?;
    let events = sim.events;
    let priors = Priors::default_for(&events);
    let kernel_cfg = KernelConfig::new(gamma, vec![alpha]).map_err(err_js)?;
    let domain = Domain::interval(events.t_max).map_err(err_js)?;
    let grid = InducingGrid::regular(&domain, inducing.max(2)).map_err(err_js)?;
    let fit_cfg = FitConfig {
        max_em_iterations: 30,
        support: Some(support.min(t_max)),
        ..FitConfig::default()
    };
    let (state, report) = fit(&events, &priors, &kernel_cfg, &grid, &fit_cfg).map_err(err_js)?;
    let gp = GpContext::new(kernel_cfg, grid, domain).map_err(err_js)?;

    let n = points.max(2);
    let mut xs = Vec::with_capacity(n);
    let mut mode = Vec::with_capacity(n);
    let mut q10 = Vec::with_capacity(n);
    let mut q90 = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let curve = predictive_mode_curve(&gp, &state, 0.0, support, n).map_err(err_js)?;
    for i in 0..n {
        let x = support * i as f64 / (n - 1) as f64;
        let (k, c) = predictive_kernel(&gp, &state, &[x]).map_err(err_js)?;
        xs.push(x);
        mode.push(interp1(&curve, x));
        q10.push(gamma_quantile(k, c, 0.1).map_err(err_js)?);
        q90.push(gamma_quantile(k, c, 0.9).map_err(err_js)?);
        truth.push(true_kernel.eval(x));
    }
    let out = FitOut {
        xs,
        mode,
        q10,
        q90,
        truth,
        background_mode: background_mode(&state),
        elbo_trace: report.elbo_trace,
        converged: report.converged,
        n_events: EventSequence::len(&events),
    };
    Ok(serde_json::to_string(&out).unwrap())
}
