//! Ground-truth Hawkes simulation by Ogata thinning on a bounded window.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventSequence;

/// Non-negative triggering kernel φ with a declared support length and an
/// upper bound φ_max for thinning.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TriggeringKernel {
    /// φ(t) = 0.9·sin(3t) + 0.9 on [0, π/2], else 0.
    Sin,
    /// φ(t) = cos(2t) + 1 on [0, π/2], else 0.
    Cos,
    /// φ(t) = 5·exp(-5t) on [0, ∞).
    Exp,
    /// φ ≡ 0 (pure Poisson background).
    Zero,
    /// φ(t) = amplitude·exp(-rate·t); branching ratio amplitude/rate.
    Exponential { amplitude: f64, rate: f64 },
    /// Piecewise-linear user kernel over sorted knots; zero past the last knot.
    Interp { ts: Vec<f64>, values: Vec<f64> },
}

impl TriggeringKernel {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sin" => Some(Self::Sin),
            "cos" => Some(Self::Cos),
            "exp" => Some(Self::Exp),
            "zero" => Some(Self::Zero),
            _ => None,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self {
            Self::Sin => {
                if t <= std::f64::consts::FRAC_PI_2 {
                    0.9 * (3.0 * t).sin() + 0.9
                } else {
                    0.0
                }
            }
            Self::Cos => {
                if t <= std::f64::consts::FRAC_PI_2 {
                    (2.0 * t).cos() + 1.0
                } else {
                    0.0
                }
            }
            Self::Exp => 5.0 * (-5.0 * t).exp(),
            Self::Zero => 0.0,
            Self::Exponential { amplitude, rate } => amplitude * (-rate * t).exp(),
            Self::Interp { ts, values } => {
                if ts.is_empty() || t > *ts.last().unwrap() {
                    return 0.0;
                }
                match ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                    Ok(i) => values[i],
                    Err(0) => values[0],
                    Err(i) => {
                        let w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
                        values[i - 1] * (1.0 - w) + values[i] * w
                    }
                }
            }
        }
    }

    /// Lag beyond which φ is negligible. Exponential kernels never vanish
    /// exactly; they are cut where the tail drops below 1e-12 of the
    /// amplitude, keeping the simulator's active window finite.
    pub fn support(&self) -> f64 {
        match self {
            Self::Sin | Self::Cos => std::f64::consts::FRAC_PI_2,
            Self::Exp => 1e12f64.ln() / 5.0,
            Self::Exponential { rate, .. } => 1e12f64.ln() / rate,
            Self::Zero => 0.0,
            Self::Interp { ts, .. } => ts.last().copied().unwrap_or(0.0),
        }
    }

    /// Declared upper bound for thinning.
    pub fn phi_max(&self) -> f64 {
        match self {
            Self::Sin => 1.8,
            Self::Cos => 2.0,
            Self::Exp => 5.0,
            Self::Zero => 0.0,
            Self::Exponential { amplitude, .. } => *amplitude,
            Self::Interp { values, .. } => values.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// ∫₀^hi φ(t) dt by trapezoid; used for cluster-size accounting.
    pub fn integral(&self, hi: f64, n: usize) -> f64 {
        if hi <= 0.0 {
            return 0.0;
        }
        let h = hi / n as f64;
        let mut sum = 0.5 * (self.eval(0.0) + self.eval(hi));
        for i in 1..n {
            sum += self.eval(i as f64 * h);
        }
        sum * h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub mu: f64,
    pub t_max: f64,
    pub kernel: TriggeringKernel,
    pub seed: u64,
    pub record_branching: bool,
}

pub struct Simulation {
    pub events: EventSequence,
    /// parents[i] = None for background, Some(j) for the triggering event.
    pub parents: Option<Vec<Option<usize>>>,
}

/// Conditional intensity μ + Σ_{x_i < t} φ(t - x_i).
pub fn intensity_at(t: f64, history: &[f64], mu: f64, kernel: &TriggeringKernel) -> f64 {
    mu + history
        .iter()
        .take_while(|&&x| x < t)
        .map(|&x| kernel.eval(t - x))
        .sum::<f64>()
}

const MAX_EVENTS: usize = 1_000_000;

/// Ogata modified thinning with a local piecewise bound μ + n_active·φ_max.
///
/// The bound is valid on [t, t + Δ] because no new events arrive before the
/// next acceptance and expired-support events contribute zero from then on.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    if cfg.mu < 0.0 {
        return Err(Error::Argument(format!("mu must be non-negative, got {}", cfg.mu)));
    }
    if cfg.t_max <= 0.0 {
        return Err(Error::Argument(format!("t_max must be positive, got {}", cfg.t_max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phi_max = cfg.kernel.phi_max();
    let support = cfg.kernel.support();
    let mut events: Vec<f64> = Vec::new();
    let mut parents: Vec<Option<usize>> = Vec::new();
    let mut t = 0.0f64;
    let mut first_active = 0usize; // index of the oldest event still in support

    loop {
        while first_active < events.len() && t - events[first_active] > support {
            first_active += 1;
        }
        let n_active = events.len() - first_active;
        let bound = cfg.mu + n_active as f64 * phi_max;
        if bound <= 0.0 {
            break;
        }
        // Explosion guard: the thinning loop generates ~bound·(t_max - t)
        // further candidates, an upper bound on further events. Aborting once
        // that projection passes the cap keeps supercritical configurations
        // from consuming quadratic time before the count check fires.
        if events.len() > MAX_EVENTS
            || events.len() as f64 + bound * (cfg.t_max - t) > 1.5 * MAX_EVENTS as f64
        {
            return Err(Error::Numerical(format!(
                "simulation would exceed {MAX_EVENTS} events; kernel is supercritical on this window"
            )));
        }
        let u: f64 = rng.random::<f64>().max(1e-300);
        t += -u.ln() / bound;
        if t >= cfg.t_max {
            break;
        }
        // intensity at the candidate, per active contributor
        let mut lambda = cfg.mu;
        let mut contrib: Vec<(usize, f64)> = Vec::new();
        for (idx, &x) in events.iter().enumerate().skip(first_active) {
            let c = cfg.kernel.eval(t - x);
            if c > 0.0 {
                if cfg.record_branching {
                    contrib.push((idx, c));
                }
                lambda += c;
            }
        }
        if rng.random::<f64>() * bound <= lambda {
            if cfg.record_branching {
                let mut pick = rng.random::<f64>() * lambda;
                let mut parent = None;
                if pick > cfg.mu {
                    pick -= cfg.mu;
                    for &(idx, c) in &contrib {
                        if pick <= c {
                            parent = Some(idx);
                            break;
                        }
                        pick -= c;
                    }
                    // floating-point slack: attribute to the last contributor
                    if parent.is_none() {
                        parent = contrib.last().map(|&(idx, _)| idx);
                    }
                }
                parents.push(parent);
            }
            events.push(t);
            if events.len() > MAX_EVENTS {
                return Err(Error::Numerical(format!(
                    "simulation exceeded {MAX_EVENTS} events; kernel is supercritical on this window"
                )));
            }
        }
    }

    let events = EventSequence::new(events, cfg.t_max)?;
    Ok(Simulation {
        events,
        parents: if cfg.record_branching { Some(parents) } else { None },
    })
}
