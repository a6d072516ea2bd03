//! The variational EM loop: branching-posterior E-step, ELBO assembly,
//! M-step ascent over (m, S, k, c), the tighter marginal-likelihood bound,
//! and convergence control.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::gp::{
    kernel_vector, posterior_moments, psi_matrix, truncated_volume, GpContext, InducingGrid,
    KernelConfig,
};
use crate::special::{digamma, expected_log_square, g_tilde_prime, log_gamma, trigamma};

/// Gamma prior on the background intensity; the GP prior mean is zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Priors {
    pub k0: f64,
    pub c0: f64,
}

impl Priors {
    pub fn new(k0: f64, c0: f64) -> Result<Self> {
        if k0 <= 0.0 || c0 <= 0.0 {
            return Err(Error::Argument(format!("Gamma prior needs k0, c0 > 0, got ({k0}, {c0})")));
        }
        Ok(Priors { k0, c0 })
    }

    /// k0 = 1 and c0 at half the empirical rate; a weakly informative default.
    pub fn default_for(events: &EventSequence) -> Self {
        let c0 = (0.5 * events.rate()).max(1e-3);
        Priors { k0: 1.0, c0 }
    }
}

/// Row-stochastic parent probabilities: background plus admissible earlier
/// events (those within the support region when truncation is active).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchingPosterior {
    pub rows: Vec<BranchingRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchingRow {
    pub background: f64,
    pub parents: Vec<(usize, f64)>,
}

impl BranchingPosterior {
    /// H_B = -Σ q log q with 0·log 0 = 0 (entries below 1e-300 are clamped).
    pub fn entropy(&self) -> f64 {
        let term = |q: f64| if q < 1e-300 { 0.0 } else { -q * q.ln() };
        self.rows
            .iter()
            .map(|r| term(r.background) + r.parents.iter().map(|&(_, q)| term(q)).sum::<f64>())
            .sum()
    }
}

/// Everything q(B, μ, f, u) needs: inducing-point Gaussian (via its
/// lower-triangular factor), Gamma background, and branching posterior.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub m: DVector<f64>,
    /// Lower triangular with positive diagonal; S = s_factor·s_factorᵀ.
    pub s_factor: DMatrix<f64>,
    pub k: f64,
    pub c: f64,
    pub branching: BranchingPosterior,
}

impl VariationalState {
    pub fn s(&self) -> DMatrix<f64> {
        &self.s_factor * self.s_factor.transpose()
    }

    /// Unconstrained coordinates: [m; lower triangle of S-factor column by
    /// column with log diagonal; log k; log c].
    pub fn pack(&self) -> DVector<f64> {
        let m_dim = self.m.len();
        let mut out = Vec::with_capacity(packed_len(m_dim));
        out.extend(self.m.iter());
        for j in 0..m_dim {
            for i in j..m_dim {
                if i == j {
                    out.push(self.s_factor[(i, j)].ln());
                } else {
                    out.push(self.s_factor[(i, j)]);
                }
            }
        }
        out.push(self.k.ln());
        out.push(self.c.ln());
        DVector::from_vec(out)
    }

    pub fn from_packed(
        theta: &DVector<f64>,
        m_dim: usize,
        branching: BranchingPosterior,
    ) -> Result<Self> {
        if theta.len() != packed_len(m_dim) {
            return Err(Error::Argument("packed state has the wrong length".into()));
        }
        let m = DVector::from_fn(m_dim, |i, _| theta[i]);
        let mut l = DMatrix::zeros(m_dim, m_dim);
        let mut idx = m_dim;
        for j in 0..m_dim {
            for i in j..m_dim {
                l[(i, j)] = if i == j { theta[idx].exp() } else { theta[idx] };
                idx += 1;
            }
        }
        let k = theta[idx].exp();
        let c = theta[idx + 1].exp();
        Ok(VariationalState { m, s_factor: l, k, c, branching })
    }
}

pub fn packed_len(m_dim: usize) -> usize {
    m_dim + m_dim * (m_dim + 1) / 2 + 2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_em_iterations: usize,
    pub elbo_relative_tolerance: f64,
    /// Gradient-ascent steps per M-step (each with backtracking line search).
    pub m_step_iterations: usize,
    /// Triggering-kernel support truncation length; None disables truncation.
    pub support: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_em_iterations: 50,
            elbo_relative_tolerance: 1e-5,
            m_step_iterations: 20,
            support: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub elbo_trace: Vec<f64>,
    /// Tighter marginal-likelihood bound (the DDE) at the final state.
    pub bound: f64,
    pub iter_times: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub stalled_m_steps: usize,
}

/// Precomputed per-fit quantities: admissible pairs with their projected
/// kernel rows, and the summed Ψ integrals (all fixed while hyperparameters
/// are fixed).
pub struct FitContext<'a> {
    pub gp: &'a GpContext,
    pub events: &'a EventSequence,
    pub support: Option<f64>,
    n: usize,
    m_dim: usize,
    /// (start, end) range into the pair arrays for each child event.
    child_ranges: Vec<(usize, usize)>,
    pair_parent: Vec<usize>,
    /// Row p holds (K_zz⁻¹ k(lag_p))ᵀ.
    a_mat: DMatrix<f64>,
    /// γ - k(lag)ᵀ K_zz⁻¹ k(lag) per pair.
    sigma0: DVector<f64>,
    /// K_zz⁻¹ (Σ_i Ψ_i) K_zz⁻¹.
    b_mat: DMatrix<f64>,
    /// Tr(K_zz⁻¹ Σ_i Ψ_i).
    tr_kinv_psi: f64,
    /// γ Σ_i |T_i|.
    gamma_vol: f64,
    volume: f64,
}

impl<'a> FitContext<'a> {
    pub fn new(
        events: &'a EventSequence,
        gp: &'a GpContext,
        support: Option<f64>,
    ) -> Result<Self> {
        if gp.domain.dim() != 1 {
            return Err(Error::Argument("the EM engine handles one-dimensional windows".into()));
        }
        let n = events.len();
        let m_dim = gp.grid.len();
        let ts = &events.timestamps;
        if let Some(&last) = ts.last() {
            if last > events.t_max {
                return Err(Error::Argument("events outside the window".into()));
            }
        }

        let mut child_ranges = Vec::with_capacity(n);
        let mut pair_parent = Vec::new();
        let mut a_rows: Vec<DVector<f64>> = Vec::new();
        let mut sigma0 = Vec::new();
        for i in 0..n {
            let start = pair_parent.len();
            for j in (0..i).rev() {
                let lag = ts[i] - ts[j];
                if let Some(s) = support {
                    if lag > s {
                        break; // earlier parents are even farther away
                    }
                }
                let kx = kernel_vector(&[lag], &gp.grid, &gp.cfg)?;
                let a = gp.factor.solve_vec(&kx);
                sigma0.push(gp.cfg.gamma - kx.dot(&a));
                a_rows.push(a);
                pair_parent.push(j);
            }
            child_ranges.push((start, pair_parent.len()));
        }
        let p = pair_parent.len();
        let mut a_mat = DMatrix::zeros(p, m_dim);
        for (r, a) in a_rows.iter().enumerate() {
            a_mat.row_mut(r).copy_from(&a.transpose());
        }

        let mut psi_sum = DMatrix::zeros(m_dim, m_dim);
        let mut gamma_vol = 0.0;
        for i in 0..n {
            psi_sum += psi_matrix(&[ts[i]], &gp.grid, &gp.cfg, &gp.domain, support)?;
            gamma_vol += gp.cfg.gamma * truncated_volume(&[ts[i]], &gp.domain, support);
        }
        let kinv_psi = gp.factor.solve_mat(&psi_sum);
        let tr_kinv_psi = kinv_psi.trace();
        let b_raw = gp.factor.solve_mat(&kinv_psi.transpose());
        let b_mat = 0.5 * (&b_raw + b_raw.transpose());

        Ok(FitContext {
            gp,
            events,
            support,
            n,
            m_dim,
            child_ranges,
            pair_parent,
            a_mat,
            sigma0: DVector::from_vec(sigma0),
            b_mat,
            tr_kinv_psi,
            gamma_vol,
            volume: gp.domain.volume(),
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_parent.len()
    }

    pub fn m_dim(&self) -> usize {
        self.m_dim
    }

    /// ν and Σ of f at every admissible lag, for the current (m, L).
    fn pair_moments(&self, m: &DVector<f64>, l: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let nu = &self.a_mat * m;
        let v = &self.a_mat * l;
        let p = self.n_pairs();
        let mut sigma = DVector::zeros(p);
        for r in 0..p {
            let s = self.sigma0[r] + v.row(r).norm_squared();
            if s <= 0.0 {
                return Err(Error::State(format!("non-positive pair variance {s}")));
            }
            sigma[r] = s;
        }
        Ok((nu, sigma))
    }

    /// ∫ E[f²] over all truncated regions, plus its fixed pieces.
    fn integral_term(&self, m: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
        let bm = &self.b_mat * m;
        let mean_sq = m.dot(&bm);
        let bl = &self.b_mat * l;
        let tr_s = l.iter().zip(bl.iter()).map(|(x, y)| x * y).sum::<f64>();
        mean_sq + self.gamma_vol - self.tr_kinv_psi + tr_s
    }

    /// Flattened q over pairs plus per-event background mass.
    fn flatten_q(&self, branching: &BranchingPosterior) -> Result<(DVector<f64>, Vec<f64>)> {
        if branching.rows.len() != self.n {
            return Err(Error::State("branching posterior does not match the event count".into()));
        }
        let mut q = DVector::zeros(self.n_pairs());
        let mut q0 = Vec::with_capacity(self.n);
        for (i, row) in branching.rows.iter().enumerate() {
            q0.push(row.background);
            let (start, end) = self.child_ranges[i];
            if row.parents.len() != end - start {
                return Err(Error::State("branching row does not match admissible parents".into()));
            }
            for (offset, &(parent, value)) in row.parents.iter().enumerate() {
                if self.pair_parent[start + offset] != parent {
                    return Err(Error::State("branching row parent order mismatch".into()));
                }
                q[start + offset] = value;
            }
        }
        Ok((q, q0))
    }

    /// Uniform branching over admissible parents plus background.
    pub fn uniform_branching(&self) -> BranchingPosterior {
        let rows = (0..self.n)
            .map(|i| {
                let (start, end) = self.child_ranges[i];
                let deg = end - start;
                let w = 1.0 / (deg as f64 + 1.0);
                BranchingRow {
                    background: w,
                    parents: (start..end).map(|p| (self.pair_parent[p], w)).collect(),
                }
            })
            .collect();
        BranchingPosterior { rows }
    }
}

/// KL(Gamma(k, c) ‖ Gamma(k0, c0)), shape-scale parameterization.
pub fn kl_gamma(k: f64, c: f64, k0: f64, c0: f64) -> Result<f64> {
    if k <= 0.0 || c <= 0.0 || k0 <= 0.0 || c0 <= 0.0 {
        return Err(Error::Domain("kl_gamma requires positive arguments".into()));
    }
    Ok((k - k0) * digamma(k)? - k0 * (c / c0).ln() - k - (log_gamma(k)? - log_gamma(k0)?)
        + c * k / c0)
}

/// KL(Normal(m, S) ‖ Normal(0, K_zz)) with S given by its triangular factor.
pub fn kl_gaussian_u(
    m: &DVector<f64>,
    s_factor: &DMatrix<f64>,
    factor: &crate::gp::GramFactor,
) -> Result<f64> {
    let m_dim = m.len();
    let log_det_s = {
        let mut acc = 0.0;
        for i in 0..m_dim {
            let d = s_factor[(i, i)];
            if d <= 0.0 {
                return Err(Error::State("covariance factor has a non-positive diagonal".into()));
            }
            acc += d.ln();
        }
        2.0 * acc
    };
    let s = s_factor * s_factor.transpose();
    let tr = factor.solve_mat(&s).trace();
    let quad = m.dot(&factor.solve_vec(m));
    Ok(0.5 * (tr + factor.log_det - log_det_s - m_dim as f64 + quad))
}

/// Branching-posterior update: q_{i,j} ∝ exp(E[log f_ij²]) for earlier events,
/// q_{i,0} ∝ c·exp(ψ(k)) for the background, normalized per row.
pub fn e_step(ctx: &FitContext, state: &VariationalState) -> Result<BranchingPosterior> {
    let (nu, sigma) = ctx.pair_moments(&state.m, &state.s_factor)?;
    let log_bg = state.c.ln() + digamma(state.k)?;
    let mut rows = Vec::with_capacity(ctx.n);
    for i in 0..ctx.n {
        let (start, end) = ctx.child_ranges[i];
        let mut logw = Vec::with_capacity(end - start + 1);
        logw.push(log_bg);
        for p in start..end {
            logw.push(expected_log_square(nu[p], sigma[p])?);
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logw.iter().map(|&w| (w - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
            if *w < 1e-300 {
                *w = 0.0;
            }
        }
        rows.push(BranchingRow {
            background: weights[0],
            parents: (start..end)
                .map(|p| (ctx.pair_parent[p], weights[p - start + 1]))
                .collect(),
        });
    }
    Ok(BranchingPosterior { rows })
}

/// Data-dependent expectation (the tighter marginal-likelihood bound):
/// Σ_i [q_{i,0}(ψ(k)+log c) + Σ_j q_{i,j}E[log f_ij²] - ∫ E[f²]] + H_B - kc|T|.
pub fn dde(ctx: &FitContext, state: &VariationalState) -> Result<f64> {
    let (q, q0) = ctx.flatten_q(&state.branching)?;
    let (nu, sigma) = ctx.pair_moments(&state.m, &state.s_factor)?;
    let bg = digamma(state.k)? + state.c.ln();
    let mut acc = 0.0;
    for i in 0..ctx.n {
        acc += q0[i] * bg;
    }
    for p in 0..ctx.n_pairs() {
        if q[p] > 0.0 {
            acc += q[p] * expected_log_square(nu[p], sigma[p])?;
        }
    }
    acc -= ctx.integral_term(&state.m, &state.s_factor);
    acc += state.branching.entropy();
    acc -= state.k * state.c * ctx.volume;
    Ok(acc)
}

/// ELBO = DDE - KL(q(μ)‖p(μ)) - KL(q(u)‖p(u)).
pub fn elbo(ctx: &FitContext, state: &VariationalState, priors: &Priors) -> Result<f64> {
    Ok(dde(ctx, state)?
        - kl_gamma(state.k, state.c, priors.k0, priors.c0)?
        - kl_gaussian_u(&state.m, &state.s_factor, &ctx.gp.factor)?)
}

/// Tighter approximation to the log marginal likelihood: exactly the DDE.
pub fn approx_log_marginal(ctx: &FitContext, state: &VariationalState) -> Result<f64> {
    dde(ctx, state)
}

/// ELBO at packed coordinates, with the branching posterior held fixed.
pub fn elbo_packed(
    ctx: &FitContext,
    branching: &BranchingPosterior,
    priors: &Priors,
    theta: &DVector<f64>,
) -> Result<f64> {
    let state = VariationalState::from_packed(theta, ctx.m_dim, branching.clone())?;
    elbo(ctx, &state, priors)
}

/// ELBO and its analytic gradient in the packed coordinates (m raw, S-factor
/// lower triangle with log diagonal, log k, log c), branching held fixed.
pub fn elbo_gradient_packed(
    ctx: &FitContext,
    branching: &BranchingPosterior,
    priors: &Priors,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let state = VariationalState::from_packed(theta, ctx.m_dim, branching.clone())?;
    let (q, q0) = ctx.flatten_q(branching)?;
    let m = &state.m;
    let l = &state.s_factor;
    let m_dim = ctx.m_dim;
    let (nu, sigma) = ctx.pair_moments(m, l)?;

    // pair contributions to value and to d/dν, d/dΣ weights
    let mut value = 0.0;
    let mut w_nu = DVector::zeros(ctx.n_pairs());
    let mut w_sigma = DVector::zeros(ctx.n_pairs());
    for p in 0..ctx.n_pairs() {
        if q[p] <= 0.0 {
            continue;
        }
        let z = -(nu[p] * nu[p]) / (2.0 * sigma[p]);
        let gp = g_tilde_prime(z)?;
        value += q[p] * expected_log_square(nu[p], sigma[p])?;
        w_nu[p] = q[p] * gp * nu[p] / sigma[p];
        w_sigma[p] = q[p] * (-gp * nu[p] * nu[p] / (2.0 * sigma[p] * sigma[p]) + 1.0 / sigma[p]);
    }

    let bg = digamma(state.k)? + state.c.ln();
    let q0_sum: f64 = q0.iter().sum();
    value += q0_sum * bg;
    value -= ctx.integral_term(m, l);
    value += branching.entropy();
    value -= state.k * state.c * ctx.volume;
    let klg = kl_gamma(state.k, state.c, priors.k0, priors.c0)?;
    let klu = kl_gaussian_u(m, l, &ctx.gp.factor)?;
    value -= klg + klu;

    // gradient w.r.t. m
    let kinv_m = ctx.gp.factor.solve_vec(m);
    let grad_m = self_transpose_mul(&ctx.a_mat, &w_nu) - 2.0 * (&ctx.b_mat * m) - kinv_m;

    // gradient w.r.t. the factor L: 2(W - B)L - K⁻¹L + L⁻ᵀ
    let w_mat = weighted_gram(&ctx.a_mat, &w_sigma);
    let l_inv = l.clone().try_inverse().ok_or_else(|| {
        Error::State("singular covariance factor".into())
    })?;
    let grad_l = 2.0 * (&w_mat - &ctx.b_mat) * l - ctx.gp.factor.solve_mat(l) + l_inv.transpose();

    // gradient w.r.t. k and c (then chained through the log parameterization)
    let tg = trigamma(state.k)?;
    let dk = q0_sum * tg - state.c * ctx.volume
        - ((state.k - priors.k0) * tg - 1.0 + state.c / priors.c0);
    let dc = q0_sum / state.c - state.k * ctx.volume - (-priors.k0 / state.c + state.k / priors.c0);

    let mut grad = Vec::with_capacity(packed_len(m_dim));
    grad.extend(grad_m.iter());
    for j in 0..m_dim {
        for i in j..m_dim {
            if i == j {
                grad.push(grad_l[(i, j)] * l[(i, j)]);
            } else {
                grad.push(grad_l[(i, j)]);
            }
        }
    }
    grad.push(dk * state.k);
    grad.push(dc * state.c);
    Ok((value, DVector::from_vec(grad)))
}

/// Aᵀ w for tall pair matrices.
fn self_transpose_mul(a: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    a.transpose() * w
}

/// Aᵀ diag(w) A, accumulated over rows with non-zero weight.
fn weighted_gram(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let m = a.ncols();
    let mut out = DMatrix::zeros(m, m);
    for r in 0..a.nrows() {
        let wr = w[r];
        if wr == 0.0 {
            continue;
        }
        let row = a.row(r);
        for i in 0..m {
            let wi = wr * row[i];
            for j in 0..=i {
                out[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}

/// One M-step: L-BFGS ascent with Armijo backtracking over the unconstrained
/// coordinates. Returns the improved state and whether the very first step
/// already failed to find any ascent (a stall).
pub fn m_step(
    ctx: &FitContext,
    state: &VariationalState,
    priors: &Priors,
    cfg: &FitConfig,
) -> Result<(VariationalState, bool)> {
    const MEMORY: usize = 8;
    let mut theta = state.pack();
    let (mut f, mut g) = elbo_gradient_packed(ctx, &state.branching, priors, &theta)?;
    let mut pairs: Vec<(DVector<f64>, DVector<f64>)> = Vec::new(); // (s, y) for -f
    let mut stalled = false;
    for inner in 0..cfg.m_step_iterations {
        if g.norm() < 1e-10 {
            break;
        }
        // two-loop recursion on h = -f (gradient -g) to get an ascent
        // direction d for f
        let mut d = -(&g); // grad of h
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y) in pairs.iter().rev() {
            let rho = 1.0 / y.dot(s);
            let a = rho * s.dot(&d);
            d -= a * y;
            alphas.push((rho, a));
        }
        if let Some((s, y)) = pairs.last() {
            d *= s.dot(y) / y.norm_squared();
        }
        for ((s, y), (rho, a)) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&d);
            d += (a - b) * s;
        }
        d = -d; // ascent direction for f
        let mut slope = g.dot(&d);
        if !slope.is_finite() || slope <= 0.0 {
            pairs.clear();
            d = g.clone();
            slope = g.norm_squared();
        }
        let mut t = if pairs.is_empty() { 1.0 / (1.0 + g.norm()) } else { 1.0 };
        let mut accepted = false;
        let mut f_acc = f;
        for _ in 0..60 {
            let cand = &theta + t * &d;
            let f_new = match elbo_packed(ctx, &state.branching, priors, &cand) {
                Ok(v) if v.is_finite() => v,
                _ => f64::NEG_INFINITY,
            };
            if f_new >= f + 1e-4 * t * slope - 1e-12 {
                theta = cand;
                f_acc = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if inner == 0 {
                stalled = true;
            }
            break;
        }
        let (f2, g2) = elbo_gradient_packed(ctx, &state.branching, priors, &theta)?;
        let s_vec = t * &d;
        let y_vec = &g - &g2; // y for h = -f: (-g2) - (-g)
        if y_vec.dot(&s_vec) > 1e-12 * y_vec.norm() * s_vec.norm() {
            if pairs.len() == MEMORY {
                pairs.remove(0);
            }
            pairs.push((s_vec, y_vec));
        }
        f = if f2.is_finite() { f2 } else { f_acc };
        g = g2;
    }
    if stalled {
        return Ok((state.clone(), true));
    }
    let new_state = VariationalState::from_packed(&theta, ctx.m_dim, state.branching.clone())?;
    Ok((new_state, false))
}

/// One accelerated EM iteration: two base M-step/E-step passes followed by a
/// SQUAREM-style extrapolation through the packed coordinates, accepted only
/// when it improves the ELBO (so the logged trace stays non-decreasing).
/// Returns the new E-step-consistent state, its ELBO, and how many of the two
/// inner M-steps stalled.
pub fn em_cycle(
    ctx: &FitContext,
    state: &VariationalState,
    priors: &Priors,
    cfg: &FitConfig,
) -> Result<(VariationalState, f64, usize)> {
    let mut stalled = 0usize;
    let theta0 = state.pack();

    let (mut s1, st1) = m_step(ctx, state, priors, cfg)?;
    s1.branching = e_step(ctx, &s1)?;
    if st1 {
        stalled += 1;
    }
    let (mut s2, st2) = m_step(ctx, &s1, priors, cfg)?;
    s2.branching = e_step(ctx, &s2)?;
    if st2 {
        stalled += 1;
    }
    let f2 = elbo(ctx, &s2, priors)?;

    let r = s1.pack() - &theta0;
    let v = s2.pack() - s1.pack() - &r;
    let vn = v.norm();
    if vn > 1e-12 {
        let alpha = (-(r.norm() / vn)).min(-1.0);
        let cand = theta0 - (2.0 * alpha) * &r + (alpha * alpha) * &v;
        if let Ok(mut sc) = VariationalState::from_packed(&cand, ctx.m_dim, s2.branching.clone()) {
            if let Ok(b) = e_step(ctx, &sc) {
                sc.branching = b;
                if let Ok(fc) = elbo(ctx, &sc, priors) {
                    if fc.is_finite() && fc >= f2 {
                        return Ok((sc, fc, stalled));
                    }
                }
            }
        }
    }
    Ok((s2, f2, stalled))
}

/// Prior-centered deterministic initial state. The mean is offset from zero:
/// the ELBO depends on f only through f², so m = 0 is a symmetric stationary
/// point gradient ascent cannot leave.
pub fn initial_state(ctx: &FitContext, priors: &Priors) -> VariationalState {
    let s_eff = ctx.support.unwrap_or(ctx.volume).min(ctx.volume).max(1e-6);
    let m0 = (0.5 / s_eff).sqrt();
    VariationalState {
        m: DVector::from_element(ctx.m_dim, m0),
        s_factor: ctx.gp.factor.l(),
        k: priors.k0,
        c: priors.c0,
        branching: ctx.uniform_branching(),
    }
}

/// Variational EM: alternate the E-step and M-step until the relative ELBO
/// change drops below tolerance or the iteration budget runs out.
pub fn fit(
    events: &EventSequence,
    priors: &Priors,
    kernel_cfg: &KernelConfig,
    grid: &InducingGrid,
    fit_cfg: &FitConfig,
) -> Result<(VariationalState, FitReport)> {
    let gp = GpContext::new(kernel_cfg.clone(), grid.clone(), events.domain())?;
    let ctx = FitContext::new(events, &gp, fit_cfg.support)?;
    fit_with_context(&ctx, priors, fit_cfg)
}

pub fn fit_with_context(
    ctx: &FitContext,
    priors: &Priors,
    fit_cfg: &FitConfig,
) -> Result<(VariationalState, FitReport)> {
    let mut state = initial_state(ctx, priors);
    let mut trace = vec![elbo(ctx, &state, priors)?];
    let mut iter_times = Vec::new();
    let mut converged = false;
    let mut stalled_m_steps = 0usize;
    let mut iterations = 0usize;
    for _ in 0..fit_cfg.max_em_iterations {
        let t0 = Instant::now();
        let (next, el, stalled) = em_cycle(ctx, &state, priors, fit_cfg)?;
        state = next;
        stalled_m_steps += stalled;
        iter_times.push(t0.elapsed().as_secs_f64());
        iterations += 1;
        let prev = *trace.last().unwrap();
        trace.push(el);
        if (el - prev).abs() / el.abs().max(1e-12) < fit_cfg.elbo_relative_tolerance {
            converged = true;
            break;
        }
    }
    let bound = dde(ctx, &state)?;
    Ok((
        state,
        FitReport { elbo_trace: trace, bound, iter_times, converged, iterations, stalled_m_steps },
    ))
}

/// Gamma parameters of the predictive triggering kernel φ(x̃) = f(x̃)²:
/// k̃ = (ν̃²+σ̃²)²/[2σ̃²(2ν̃²+σ̃²)], c̃ = 2σ̃²(2ν̃²+σ̃²)/(ν̃²+σ̃²).
pub fn predictive_kernel(
    gp: &GpContext,
    state: &VariationalState,
    x_tilde: &[f64],
) -> Result<(f64, f64)> {
    let s = state.s();
    let (nu, var) = posterior_moments(x_tilde, &state.m, &s, &gp.grid, &gp.factor, &gp.cfg)?;
    let second = nu * nu + var;
    let spread = 2.0 * var * (2.0 * nu * nu + var);
    Ok((second * second / spread, spread / second))
}

/// Mode of a Gamma(shape, scale): (shape-1)·scale above shape 1, else 0.
pub fn gamma_mode(shape: f64, scale: f64) -> f64 {
    if shape > 1.0 {
        (shape - 1.0) * scale
    } else {
        0.0
    }
}

/// Mode of the posterior triggering kernel at a lag.
pub fn predictive_mode(gp: &GpContext, state: &VariationalState, x_tilde: &[f64]) -> Result<f64> {
    let (k, c) = predictive_kernel(gp, state, x_tilde)?;
    Ok(gamma_mode(k, c))
}

/// Mode of the posterior background intensity.
pub fn background_mode(state: &VariationalState) -> f64 {
    gamma_mode(state.k, state.c)
}

/// Posterior triggering-kernel mode tabulated on n equispaced lags in
/// [lo, hi]; cheap to evaluate afterwards via interpolation.
pub fn predictive_mode_curve(
    gp: &GpContext,
    state: &VariationalState,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    if n < 2 || hi <= lo {
        return Err(Error::Argument("curve needs n >= 2 points and hi > lo".into()));
    }
    let s = state.s();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let (nu, var) = posterior_moments(&[x], &state.m, &s, &gp.grid, &gp.factor, &gp.cfg)?;
        let second = nu * nu + var;
        let spread = 2.0 * var * (2.0 * nu * nu + var);
        out.push((x, gamma_mode(second * second / spread, spread / second)));
    }
    Ok(out)
}

/// Piecewise-linear interpolation of a sorted (x, y) table, clamped at the
/// ends.
pub fn interp1(curve: &[(f64, f64)], x: f64) -> f64 {
    match curve {
        [] => 0.0,
        [only] => only.1,
        _ => {
            if x <= curve[0].0 {
                return curve[0].1;
            }
            if x >= curve[curve.len() - 1].0 {
                return curve[curve.len() - 1].1;
            }
            let idx = curve.partition_point(|&(cx, _)| cx <= x);
            let (x0, y0) = curve[idx - 1];
            let (x1, y1) = curve[idx];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{expected_square_integral, Domain};
    use crate::sim::{simulate, SimConfig, TriggeringKernel};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        ts: Vec<f64>,
        t_max: f64,
        m_dim: usize,
        gamma: f64,
        alpha: f64,
    ) -> (EventSequence, GpContext) {
        let events = EventSequence::new(ts, t_max).unwrap();
        let domain = Domain::interval(t_max).unwrap();
        let grid = InducingGrid::regular(&domain, m_dim).unwrap();
        let cfg = KernelConfig::new(gamma, vec![alpha]).unwrap();
        let gp = GpContext::new(cfg, grid, domain).unwrap();
        (events, gp)
    }

    fn random_state(ctx: &FitContext, rng: &mut ChaCha8Rng) -> VariationalState {
        let m_dim = ctx.m_dim();
        let m = DVector::from_fn(m_dim, |_, _| rng.random::<f64>() - 0.3);
        let l = DMatrix::from_fn(m_dim, m_dim, |i, j| {
            if i > j {
                0.2 * (rng.random::<f64>() - 0.5)
            } else if i == j {
                0.2 + 0.6 * rng.random::<f64>()
            } else {
                0.0
            }
        });
        let mut state = VariationalState {
            m,
            s_factor: l,
            k: 0.5 + 2.0 * rng.random::<f64>(),
            c: 0.5 + 2.0 * rng.random::<f64>(),
            branching: ctx.uniform_branching(),
        };
        state.branching = e_step(ctx, &state).unwrap();
        state
    }

    fn simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn kl_gamma_zero_at_equality_and_nonnegative() {
        assert!(kl_gamma(1.5, 2.0, 1.5, 2.0).unwrap().abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let v = kl_gamma(
                0.2 + 3.0 * rng.random::<f64>(),
                0.2 + 3.0 * rng.random::<f64>(),
                0.2 + 3.0 * rng.random::<f64>(),
                0.2 + 3.0 * rng.random::<f64>(),
            )
            .unwrap();
            assert!(v >= -1e-12);
        }
    }

    #[test]
    fn kl_gamma_matches_quadrature_oracle() {
        // KL(Gamma(2,1) || Gamma(1,1)) by direct quadrature of q log(q/p)
        let (k, c, k0, c0) = (2.0, 1.0, 1.0, 1.0);
        let q = |x: f64| x.powf(k - 1.0) * (-x / c).exp() / (libm::tgamma(k) * c.powf(k));
        let p = |x: f64| x.powf(k0 - 1.0) * (-x / c0).exp() / (libm::tgamma(k0) * c0.powf(k0));
        let integrand = |x: f64| {
            let qx = q(x);
            if qx < 1e-300 {
                0.0
            } else {
                qx * (qx / p(x)).ln()
            }
        };
        let oracle = simpson(integrand, 1e-9, 60.0, 200_000);
        let v = kl_gamma(k, c, k0, c0).unwrap();
        assert!((v - oracle).abs() < 1e-6, "closed form {v}, quadrature {oracle}");
    }

    #[test]
    fn kl_gaussian_zero_at_prior_and_matches_oracle() {
        let (_, gp) = setup(vec![0.5], 1.0, 2, 1.0, 0.5);
        let l_prior = gp.factor.l();
        let v = kl_gaussian_u(&DVector::zeros(2), &l_prior, &gp.factor).unwrap();
        assert!(v.abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let l = DMatrix::from_fn(2, 2, |i, j| {
                if i > j {
                    rng.random::<f64>() - 0.5
                } else if i == j {
                    0.2 + rng.random::<f64>()
                } else {
                    0.0
                }
            });
            let v = kl_gaussian_u(&m, &l, &gp.factor).unwrap();
            // explicit-inverse oracle
            let s = &l * l.transpose();
            let kinv = gp.factor.k_zz.clone().try_inverse().unwrap();
            let oracle = 0.5
                * ((&kinv * &s).trace()
                    + gp.factor.k_zz.determinant().ln()
                    - s.determinant().ln()
                    - 2.0
                    + (m.transpose() * &kinv * &m)[(0, 0)]);
            assert!((v - oracle).abs() < 1e-9, "got {v}, oracle {oracle}");
            assert!(v >= -1e-12);
        }
    }

    #[test]
    fn e_step_single_event_all_background() {
        let (events, gp) = setup(vec![0.5], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let state = initial_state(&ctx, &Priors::new(1.0, 1.0).unwrap());
        let b = e_step(&ctx, &state).unwrap();
        assert_eq!(b.rows[0].background, 1.0);
        assert!(b.rows[0].parents.is_empty());
    }

    #[test]
    fn e_step_truncation_excludes_distant_parent() {
        let (events, gp) = setup(vec![0.1, 1.9], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, Some(0.5)).unwrap();
        let state = initial_state(&ctx, &Priors::new(1.0, 1.0).unwrap());
        let b = e_step(&ctx, &state).unwrap();
        assert_eq!(b.rows[1].background, 1.0);
        assert!(b.rows[1].parents.is_empty());
    }

    #[test]
    fn e_step_rows_are_stochastic() {
        let (events, gp) = setup(vec![0.2, 0.5, 0.9, 1.4, 1.8], 2.0, 4, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state = random_state(&ctx, &mut rng);
        let b = e_step(&ctx, &state).unwrap();
        for row in &b.rows {
            let total = row.background + row.parents.iter().map(|&(_, q)| q).sum::<f64>();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.background >= 0.0 && row.parents.iter().all(|&(_, q)| q >= 0.0));
        }
    }

    #[test]
    fn dde_zero_events_is_minus_kc_volume() {
        let (events, gp) = setup(vec![], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let priors = Priors::new(1.3, 0.7).unwrap();
        let state = initial_state(&ctx, &priors);
        let v = dde(&ctx, &state).unwrap();
        assert!((v + 1.3 * 0.7 * 2.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn dde_matches_term_by_term_assembly() {
        let (events, gp) = setup(vec![0.4, 1.1], 2.0, 3, 0.8, 0.4);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let state = random_state(&ctx, &mut rng);
        let got = dde(&ctx, &state).unwrap();

        // manual assembly from the tested component operations
        let s = state.s();
        let bg = digamma(state.k).unwrap() + state.c.ln();
        let mut manual = 0.0;
        for (i, row) in state.branching.rows.iter().enumerate() {
            manual += row.background * bg;
            for &(j, q) in &row.parents {
                let lag = events.timestamps[i] - events.timestamps[j];
                let (nu, var) =
                    posterior_moments(&[lag], &state.m, &s, &gp.grid, &gp.factor, &gp.cfg)
                        .unwrap();
                manual += q * expected_log_square(nu, var).unwrap();
            }
            manual -= expected_square_integral(
                &[events.timestamps[i]],
                &state.m,
                &s,
                &gp.grid,
                &gp.factor,
                &gp.cfg,
                &gp.domain,
                None,
            )
            .unwrap();
        }
        manual += state.branching.entropy();
        manual -= state.k * state.c * 2.0;
        assert!((got - manual).abs() < 1e-8, "dde {got}, manual {manual}");
    }

    #[test]
    fn one_hot_branching_has_zero_entropy() {
        let rows = vec![
            BranchingRow { background: 1.0, parents: vec![] },
            BranchingRow { background: 0.0, parents: vec![(0, 1.0)] },
        ];
        assert_eq!(BranchingPosterior { rows }.entropy(), 0.0);
    }

    #[test]
    fn elbo_equals_dde_at_prior_variational_factors() {
        let (events, gp) = setup(vec![0.3, 0.8, 1.5], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let priors = Priors::new(1.0, 0.9).unwrap();
        let state = initial_state_with_prior_mean(&ctx, &priors);
        let e = elbo(&ctx, &state, &priors).unwrap();
        let d = dde(&ctx, &state).unwrap();
        assert!((e - d).abs() < 1e-10);
        assert!(approx_log_marginal(&ctx, &state).unwrap() >= e - 1e-10);
    }

    fn initial_state_with_prior_mean(ctx: &FitContext, priors: &Priors) -> VariationalState {
        let mut s = initial_state(ctx, priors);
        s.m.fill(0.0); // exactly the prior, so both KL terms vanish
        s
    }

    #[test]
    fn bound_identity_holds_for_random_states() {
        let (events, gp) = setup(vec![0.2, 0.6, 0.9, 1.3], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let priors = Priors::new(1.2, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let state = random_state(&ctx, &mut rng);
            let e = elbo(&ctx, &state, &priors).unwrap();
            let b = approx_log_marginal(&ctx, &state).unwrap();
            let kls = kl_gamma(state.k, state.c, priors.k0, priors.c0).unwrap()
                + kl_gaussian_u(&state.m, &state.s_factor, &gp.factor).unwrap();
            assert!((b - e - kls).abs() < 1e-8);
            assert!(b >= e - 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let (events, gp) = setup(vec![0.2, 0.5, 0.9, 1.4, 1.8], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let priors = Priors::new(1.0, 1.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..3 {
            let state = random_state(&ctx, &mut rng);
            let theta = state.pack();
            let (_, grad) =
                elbo_gradient_packed(&ctx, &state.branching, &priors, &theta).unwrap();
            let h = 1e-5;
            for idx in 0..theta.len() {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[idx] += h;
                dn[idx] -= h;
                let fu = elbo_packed(&ctx, &state.branching, &priors, &up).unwrap();
                let fd = elbo_packed(&ctx, &state.branching, &priors, &dn).unwrap();
                let num = (fu - fd) / (2.0 * h);
                let denom = num.abs().max(grad[idx].abs()).max(1e-6);
                assert!(
                    (grad[idx] - num).abs() / denom < 1e-4,
                    "coordinate {idx}: analytic {}, numeric {num}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn m_step_does_not_decrease_elbo() {
        let (events, gp) = setup(vec![0.2, 0.5, 0.9, 1.4], 2.0, 3, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let priors = Priors::new(1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let state = random_state(&ctx, &mut rng);
            let before = elbo(&ctx, &state, &priors).unwrap();
            let cfg = FitConfig::default();
            let (after_state, _) = m_step(&ctx, &state, &priors, &cfg).unwrap();
            let after = elbo(&ctx, &after_state, &priors).unwrap();
            assert!(after >= before - 1e-8, "before {before}, after {after}");
        }
    }

    #[test]
    fn fit_recovers_poisson_background_rate() {
        let sim = simulate(&SimConfig {
            mu: 10.0,
            t_max: std::f64::consts::PI,
            kernel: TriggeringKernel::Zero,
            seed: 33,
            record_branching: false,
        })
        .unwrap();
        let events = sim.events;
        let priors = Priors::default_for(&events);
        let kernel_cfg = KernelConfig::new(1.0, vec![0.3]).unwrap();
        let domain = Domain::interval(events.t_max).unwrap();
        let grid = InducingGrid::regular(&domain, 5).unwrap();
        let (state, report) =
            fit(&events, &priors, &kernel_cfg, &grid, &FitConfig::default()).unwrap();
        // ELBO trace non-decreasing
        for w in report.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
        let post_mean = state.k * state.c;
        let post_sd = state.k.sqrt() * state.c;
        let empirical = events.rate();
        assert!(
            (post_mean - empirical).abs() < 3.0 * post_sd,
            "posterior mean {post_mean} ± {post_sd}, empirical rate {empirical}"
        );
    }

    #[test]
    fn empty_sequence_fits_background_only() {
        let events = EventSequence::new(vec![], 2.0).unwrap();
        let priors = Priors::new(1.0, 0.5).unwrap();
        let kernel_cfg = KernelConfig::new(1.0, vec![0.3]).unwrap();
        let domain = Domain::interval(2.0).unwrap();
        let grid = InducingGrid::regular(&domain, 4).unwrap();
        let (state, report) =
            fit(&events, &priors, &kernel_cfg, &grid, &FitConfig::default()).unwrap();
        assert!(state.branching.rows.is_empty());
        assert!(report.elbo_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    }

    #[test]
    fn support_truncation_longer_than_window_changes_nothing() {
        let sim = simulate(&SimConfig {
            mu: 6.0,
            t_max: 2.0,
            kernel: TriggeringKernel::Sin,
            seed: 9,
            record_branching: false,
        })
        .unwrap();
        let events = sim.events;
        let priors = Priors::default_for(&events);
        let kernel_cfg = KernelConfig::new(1.0, vec![0.2]).unwrap();
        let domain = Domain::interval(events.t_max).unwrap();
        let grid = InducingGrid::regular(&domain, 6).unwrap();
        let base = FitConfig::default();
        let trunc = FitConfig { support: Some(events.t_max * 2.0), ..FitConfig::default() };
        let (_, r1) = fit(&events, &priors, &kernel_cfg, &grid, &base).unwrap();
        let (_, r2) = fit(&events, &priors, &kernel_cfg, &grid, &trunc).unwrap();
        let e1 = *r1.elbo_trace.last().unwrap();
        let e2 = *r2.elbo_trace.last().unwrap();
        assert!((e1 - e2).abs() < 1e-6, "untruncated {e1}, truncated {e2}");
    }

    #[test]
    fn predictive_kernel_centered_case_and_moment_identity() {
        let (events, gp) = setup(vec![0.5, 1.0], 2.0, 4, 1.0, 0.5);
        let ctx = FitContext::new(&events, &gp, None).unwrap();
        let priors = Priors::new(1.0, 1.0).unwrap();
        let mut state = initial_state(&ctx, &priors);
        state.m.fill(0.0);
        let (k, c) = predictive_kernel(&gp, &state, &[0.7]).unwrap();
        let (_, var) =
            posterior_moments(&[0.7], &state.m, &state.s(), &gp.grid, &gp.factor, &gp.cfg)
                .unwrap();
        assert!((k - 0.5).abs() < 1e-10);
        assert!((c - 2.0 * var).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..10 {
            let state = random_state(&ctx, &mut rng);
            let x = [2.0 * rng.random::<f64>()];
            let (k, c) = predictive_kernel(&gp, &state, &x).unwrap();
            let (nu, var) =
                posterior_moments(&x, &state.m, &state.s(), &gp.grid, &gp.factor, &gp.cfg)
                    .unwrap();
            assert!((k * c - (nu * nu + var)).abs() < 1e-9);
        }
    }

    #[test]
    fn predictive_kernel_matches_squared_gaussian_moments() {
        // Gamma(k̃, c̃) should match the first two moments of (N(ν, σ²))²
        let (nu, var): (f64, f64) = (0.8, 0.3);
        let second = nu * nu + var;
        let spread = 2.0 * var * (2.0 * nu * nu + var);
        let (k, c) = (second * second / spread, spread / second);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let f = nu + var.sqrt() * g;
            sum += f * f;
            sum2 += f * f * f * f;
        }
        let mc_mean = sum / n as f64;
        let mc_var = sum2 / n as f64 - mc_mean * mc_mean;
        let se_mean = (mc_var / n as f64).sqrt();
        assert!((k * c - mc_mean).abs() < 3.0 * se_mean);
        // variance comparison with a generous (4th-moment) tolerance
        assert!((k * c * c - mc_var).abs() / mc_var < 0.02);
    }

    #[test]
    fn gamma_mode_cases() {
        assert_eq!(gamma_mode(2.0, 0.5), 0.5);
        assert_eq!(gamma_mode(0.5, 3.0), 0.0);
        assert_eq!(gamma_mode(1.0, 3.0), 0.0);
    }
}
