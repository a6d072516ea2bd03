//! Model persistence: a version-tagged JSON file holding the kernel, the
//! inducing grid, the variational state, priors, and fit metadata.
//! Numbers round-trip bit-exactly (shortest-round-trip float formatting).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{BranchingPosterior, FitReport, Priors, VariationalState};
use crate::error::{Error, Result};
use crate::gp::{Domain, GpContext, InducingGrid, KernelConfig};

pub const MODEL_VERSION: &str = "vbhp/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub kernel: KernelConfig,
    pub inducing_points: Vec<Vec<f64>>,
    pub domain: Vec<[f64; 2]>,
    /// Variational mean over the inducing values.
    pub m: Vec<f64>,
    /// Row-major lower-triangular factor of the variational covariance.
    pub s_factor: Vec<f64>,
    pub k: f64,
    pub c: f64,
    pub priors: Priors,
    /// Triggering-kernel support truncation used during the fit, if any.
    pub support: Option<f64>,
    pub elbo_trace: Vec<f64>,
    pub bound: f64,
    pub converged: bool,
}

impl ModelFile {
    pub fn from_fit(
        kernel: &KernelConfig,
        grid: &InducingGrid,
        domain: &Domain,
        state: &VariationalState,
        priors: &Priors,
        support: Option<f64>,
        report: &FitReport,
    ) -> Self {
        let m_dim = state.m.len();
        let mut s_factor = Vec::with_capacity(m_dim * m_dim);
        for i in 0..m_dim {
            for j in 0..m_dim {
                s_factor.push(state.s_factor[(i, j)]);
            }
        }
        ModelFile {
            version: MODEL_VERSION.to_string(),
            kernel: kernel.clone(),
            inducing_points: grid.points.clone(),
            domain: domain.bounds.clone(),
            m: state.m.iter().copied().collect(),
            s_factor,
            k: state.k,
            c: state.c,
            priors: *priors,
            support,
            elbo_trace: report.elbo_trace.clone(),
            bound: report.bound,
            converged: report.converged,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path.as_ref(), body + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let parsed: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if parsed.version != MODEL_VERSION {
            return Err(Error::Data(format!(
                "{}: incompatible model version '{}', this build reads '{MODEL_VERSION}'",
                path.display(),
                parsed.version
            )));
        }
        let m_dim = parsed.m.len();
        if parsed.inducing_points.len() != m_dim || parsed.s_factor.len() != m_dim * m_dim {
            return Err(Error::Data(format!(
                "{}: inconsistent dimensions in model file",
                path.display()
            )));
        }
        Ok(parsed)
    }

    pub fn grid(&self) -> InducingGrid {
        InducingGrid { points: self.inducing_points.clone() }
    }

    pub fn gp_context(&self) -> Result<GpContext> {
        GpContext::new(self.kernel.clone(), self.grid(), Domain::new(self.domain.clone())?)
    }

    /// Variational state with an empty branching posterior (the branching is
    /// training-data bound and is not persisted).
    pub fn state(&self) -> VariationalState {
        let m_dim = self.m.len();
        VariationalState {
            m: DVector::from_vec(self.m.clone()),
            s_factor: DMatrix::from_fn(m_dim, m_dim, |i, j| self.s_factor[i * m_dim + j]),
            k: self.k,
            c: self.c,
            branching: BranchingPosterior { rows: Vec::new() },
        }
    }
}
