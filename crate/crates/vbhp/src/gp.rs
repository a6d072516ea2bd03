//! ARD kernel evaluation, regular-grid inducing points, Cholesky-backed Gram
//! algebra, posterior GP moments, and the closed-form Ψ integrals over
//! truncated lag domains.

use nalgebra::{DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::erf;

/// ARD kernel hyperparameters: K(x, x') = γ Π_r exp(-(x_r - x'_r)²/(2α_r)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub gamma: f64,
    pub alphas: Vec<f64>,
    pub jitter: f64,
}

impl KernelConfig {
    /// Jitter defaults to 1e-6·γ; regular grids at moderate M produce
    /// near-singular Gram matrices without it.
    pub fn new(gamma: f64, alphas: Vec<f64>) -> Result<Self> {
        let jitter = 1e-6 * gamma;
        Self::with_jitter(gamma, alphas, jitter)
    }

    pub fn with_jitter(gamma: f64, alphas: Vec<f64>, jitter: f64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::Argument(format!("kernel variance must be positive, got {gamma}")));
        }
        if alphas.is_empty() || alphas.iter().any(|&a| a <= 0.0) {
            return Err(Error::Argument("length-scales must be positive".into()));
        }
        if jitter <= 0.0 {
            return Err(Error::Argument(format!("jitter must be positive, got {jitter}")));
        }
        Ok(KernelConfig { gamma, alphas, jitter })
    }

    pub fn dim(&self) -> usize {
        self.alphas.len()
    }
}

/// Axis-aligned data domain T with per-dimension bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Domain {
    pub bounds: Vec<[f64; 2]>,
}

impl Domain {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() || bounds.iter().any(|b| b[1] <= b[0]) {
            return Err(Error::Argument("domain bounds must satisfy max > min".into()));
        }
        Ok(Domain { bounds })
    }

    /// One-dimensional window [0, t_max].
    pub fn interval(t_max: f64) -> Result<Self> {
        Self::new(vec![[0.0, t_max]])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|b| b[1] - b[0]).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.bounds).all(|(&xi, b)| xi >= b[0] && xi <= b[1])
    }
}

/// M inducing points on a regular lattice over the domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducingGrid {
    pub points: Vec<Vec<f64>>,
}

impl InducingGrid {
    /// Uniformly spaced points per dimension, endpoints included.
    pub fn regular(domain: &Domain, per_dim: usize) -> Result<Self> {
        if per_dim < 2 {
            return Err(Error::Argument("need at least 2 inducing points per dimension".into()));
        }
        let r = domain.dim();
        let mut points = vec![Vec::with_capacity(r)];
        for b in &domain.bounds {
            let axis: Vec<f64> = (0..per_dim)
                .map(|i| b[0] + (b[1] - b[0]) * i as f64 / (per_dim - 1) as f64)
                .collect();
            let mut next = Vec::with_capacity(points.len() * per_dim);
            for p in &points {
                for &z in &axis {
                    let mut q = p.clone();
                    q.push(z);
                    next.push(q);
                }
            }
            points = next;
        }
        Ok(InducingGrid { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// ARD kernel value.
pub fn kernel(x: &[f64], x_prime: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if x.len() != cfg.dim() || x_prime.len() != cfg.dim() {
        return Err(Error::Argument(format!(
            "point dimension mismatch: kernel is {}-dimensional, got {} and {}",
            cfg.dim(),
            x.len(),
            x_prime.len()
        )));
    }
    let mut expo = 0.0;
    for r in 0..cfg.dim() {
        let d = x[r] - x_prime[r];
        expo -= d * d / (2.0 * cfg.alphas[r]);
    }
    Ok(cfg.gamma * expo.exp())
}

/// Cholesky-factorized Gram matrix on the inducing points (jitter included).
pub struct GramFactor {
    pub k_zz: DMatrix<f64>,
    chol: nalgebra::linalg::Cholesky<f64, Dyn>,
    pub log_det: f64,
}

impl GramFactor {
    pub fn new(grid: &InducingGrid, cfg: &KernelConfig) -> Result<Self> {
        let m = grid.len();
        if m < 2 {
            return Err(Error::Argument("inducing grid needs at least 2 points".into()));
        }
        let mut k_zz = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = kernel(&grid.points[i], &grid.points[j], cfg)?;
                k_zz[(i, j)] = v;
                k_zz[(j, i)] = v;
            }
            k_zz[(i, i)] += cfg.jitter;
        }
        let chol = nalgebra::linalg::Cholesky::new(k_zz.clone()).ok_or_else(|| {
            Error::Numerical("Gram matrix is not positive definite; increase jitter".into())
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(GramFactor { k_zz, chol, log_det })
    }

    pub fn m(&self) -> usize {
        self.k_zz.nrows()
    }

    /// K_zz⁻¹ v via triangular solves.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// K_zz⁻¹ B via triangular solves.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Lower-triangular Cholesky factor of K_zz.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Kernel vector K_xz between a point and every inducing point.
pub fn kernel_vector(x: &[f64], grid: &InducingGrid, cfg: &KernelConfig) -> Result<DVector<f64>> {
    let mut k = DVector::zeros(grid.len());
    for (i, z) in grid.points.iter().enumerate() {
        k[i] = kernel(x, z, cfg)?;
    }
    Ok(k)
}

/// Posterior GP moments at x:
/// ν(x) = K_xz K_zz⁻¹ m,
/// Σ(x, x) = K_xx - K_xz K_zz⁻¹ K_zx + K_xz K_zz⁻¹ S K_zz⁻¹ K_zx.
pub fn posterior_moments(
    x: &[f64],
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    grid: &InducingGrid,
    factor: &GramFactor,
    cfg: &KernelConfig,
) -> Result<(f64, f64)> {
    let kx = kernel_vector(x, grid, cfg)?;
    let a = factor.solve_vec(&kx);
    let mean = a.dot(m);
    let var = cfg.gamma - kx.dot(&a) + (a.transpose() * s * &a)[(0, 0)];
    if var <= 0.0 {
        return Err(Error::State(format!(
            "posterior variance {var} is not positive; covariance state is not PSD"
        )));
    }
    Ok((mean, var))
}

/// Per-dimension integration limits of the truncated lag region T_i,
/// optionally capped by the triggering-kernel support length.
fn lag_limits(x_i: &[f64], domain: &Domain, support: Option<f64>, r: usize) -> (f64, f64) {
    let lo = domain.bounds[r][0];
    let mut hi = domain.bounds[r][1] - x_i[r];
    if let Some(s) = support {
        hi = hi.min(s);
    }
    (lo, hi)
}

/// Volume of the truncated lag region T_i (zero when degenerate).
pub fn truncated_volume(x_i: &[f64], domain: &Domain, support: Option<f64>) -> f64 {
    (0..domain.dim())
        .map(|r| {
            let (lo, hi) = lag_limits(x_i, domain, support, r);
            (hi - lo).max(0.0)
        })
        .product()
}

/// Ψ_i(z, z') = ∫_{T_i} K_zx K_xz' dx in closed form via erf differences.
///
/// Per dimension the factor is
///   √(πα)/2 · exp(-(z-z')²/(4α)) · [erf((z̄-lo)/√α) - erf((z̄-hi)/√α)],
/// with z̄ = (z+z')/2 and hi = min(T^max - x_i, support); the ordering keeps
/// each factor non-negative, and the matrix is a Gram integral, hence PSD.
pub fn psi_matrix(
    x_i: &[f64],
    grid: &InducingGrid,
    cfg: &KernelConfig,
    domain: &Domain,
    support: Option<f64>,
) -> Result<DMatrix<f64>> {
    if !domain.contains(x_i) {
        return Err(Error::Argument(format!("point {x_i:?} lies outside the domain")));
    }
    let m = grid.len();
    let r_dim = cfg.dim();
    let mut limits = Vec::with_capacity(r_dim);
    for r in 0..r_dim {
        let (lo, hi) = lag_limits(x_i, domain, support, r);
        if hi <= lo {
            return Ok(DMatrix::zeros(m, m));
        }
        limits.push((lo, hi));
    }
    let mut psi = DMatrix::zeros(m, m);
    for p in 0..m {
        for q in 0..=p {
            let mut v = cfg.gamma * cfg.gamma;
            for r in 0..r_dim {
                let alpha = cfg.alphas[r];
                let sqrt_a = alpha.sqrt();
                let zp = grid.points[p][r];
                let zq = grid.points[q][r];
                let zbar = 0.5 * (zp + zq);
                let (lo, hi) = limits[r];
                v *= 0.5
                    * (std::f64::consts::PI * alpha).sqrt()
                    * (-(zp - zq) * (zp - zq) / (4.0 * alpha)).exp()
                    * (erf((zbar - lo) / sqrt_a) - erf((zbar - hi) / sqrt_a));
            }
            psi[(p, q)] = v;
            psi[(q, p)] = v;
        }
    }
    Ok(psi)
}

/// ∫_{T_i} E[f(x)²] dx = mᵀK⁻¹Ψ_iK⁻¹m + γ|T_i| - Tr(K⁻¹Ψ_i) + Tr(K⁻¹SK⁻¹Ψ_i).
pub fn expected_square_integral(
    x_i: &[f64],
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    grid: &InducingGrid,
    factor: &GramFactor,
    cfg: &KernelConfig,
    domain: &Domain,
    support: Option<f64>,
) -> Result<f64> {
    let psi = psi_matrix(x_i, grid, cfg, domain, support)?;
    let vol = truncated_volume(x_i, domain, support);
    let u = factor.solve_vec(m);
    let kinv_psi = factor.solve_mat(&psi);
    let mean_sq = (u.transpose() * &psi * &u)[(0, 0)];
    let tr_kinv_psi = kinv_psi.trace();
    let tr_s = (factor.solve_mat(s) * &kinv_psi).trace();
    let total = mean_sq + cfg.gamma * vol - tr_kinv_psi + tr_s;
    if total < -1e-8 {
        return Err(Error::Numerical(format!(
            "expected square integral came out negative ({total}); Gram factorization is broken"
        )));
    }
    Ok(total.max(0.0))
}

/// Immutable GP context shared by the engine, prediction and evaluation.
pub struct GpContext {
    pub cfg: KernelConfig,
    pub grid: InducingGrid,
    pub domain: Domain,
    pub factor: GramFactor,
}

impl GpContext {
    pub fn new(cfg: KernelConfig, grid: InducingGrid, domain: Domain) -> Result<Self> {
        if cfg.dim() != domain.dim() {
            return Err(Error::Argument("kernel and domain dimensions differ".into()));
        }
        let factor = GramFactor::new(&grid, &cfg)?;
        Ok(GpContext { cfg, grid, domain, factor })
    }
}
