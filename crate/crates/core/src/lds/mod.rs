//! Time-variant linear dynamical system: filtering, smoothing, EM parameter
//! estimation, likelihood, reconstruction, and sampling.
//!
//! Model, per subject n:
//!   state:       s_{n,t} = A_t s_{n,t-1} + eps_s,  eps_s ~ N(0, state_cov)
//!   observation: x_{n,t} = W_t s_{n,t}   + eps_x,  eps_x ~ N(0, diag(obs_cov))
//!   prior:       s_{n,0} ~ N(prior_mean, prior_cov)

mod em;
mod filter;
pub mod oracle;

pub use em::{em_fit, reconstruct, sample, EmOptions};
pub use filter::{kalman_filter, log_likelihood, rts_smooth, PosteriorMoments};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative ridge added to innovation covariances and M-step normal
/// equations.
pub const RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdsParams {
    /// T transition matrices, L×L. `a[0]` is unused by convention (the prior
    /// covers t = 0) and kept as identity.
    pub a: Vec<DMatrix<f64>>,
    /// T observation matrices, D×L.
    pub w: Vec<DMatrix<f64>>,
    /// L×L process noise covariance, shared across t.
    pub state_cov: DMatrix<f64>,
    /// Diagonal of the D×D observation noise covariance.
    pub obs_cov_diag: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl LdsParams {
    pub fn latent_dim(&self) -> usize {
        self.state_cov.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_cov_diag.len()
    }

    pub fn seq_len(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.latent_dim();
        let d = self.obs_dim();
        let t = self.seq_len();
        if t == 0 || self.a.len() != t {
            return Err(Error::ShapeMismatch("A and W lists must have length T >= 1".into()));
        }
        for m in &self.a {
            if m.nrows() != l || m.ncols() != l {
                return Err(Error::ShapeMismatch("transition matrix is not L×L".into()));
            }
        }
        for m in &self.w {
            if m.nrows() != d || m.ncols() != l {
                return Err(Error::ShapeMismatch("observation matrix is not D×L".into()));
            }
        }
        if self.prior_mean.len() != l || self.prior_cov.nrows() != l || self.prior_cov.ncols() != l
        {
            return Err(Error::ShapeMismatch("prior dimensions disagree with L".into()));
        }
        let finite = self.a.iter().chain(self.w.iter()).all(|m| m.iter().all(|v| v.is_finite()))
            && self.state_cov.iter().all(|v| v.is_finite())
            && self.obs_cov_diag.iter().all(|v| v.is_finite())
            && self.prior_mean.iter().all(|v| v.is_finite())
            && self.prior_cov.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("LDS parameters".into()));
        }
        for (name, m) in [("state_cov", &self.state_cov), ("prior_cov", &self.prior_cov)] {
            let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < -1e-10 {
                return Err(Error::InvalidArgument(format!("{name} is not PSD ({min_eig})")));
            }
        }
        if self.obs_cov_diag.min() < -1e-10 {
            return Err(Error::InvalidArgument("obs_cov diagonal has negative entries".into()));
        }
        Ok(())
    }
}

/// Which (subject, time) cells carry an observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationMask {
    pub observed: Vec<Vec<bool>>,
}

impl ObservationMask {
    pub fn all_observed(n: usize, t: usize) -> Self {
        Self { observed: vec![vec![true; t]; n] }
    }

    pub fn is_observed(&self, n: usize, t: usize) -> bool {
        self.observed[n][t]
    }

    /// Every sequence needs at least one observation, and t = 0 must be
    /// observed so the prior update anchors the sequence.
    pub fn validate(&self) -> Result<()> {
        for (n, row) in self.observed.iter().enumerate() {
            if row.is_empty() || !row.iter().any(|&b| b) {
                return Err(Error::InvalidArgument(format!("sequence {n} has no observations")));
            }
            if !row[0] {
                return Err(Error::InvalidArgument(format!(
                    "sequence {n} must be observed at t = 0"
                )));
            }
        }
        Ok(())
    }
}

/// Per-coordinate min-max scaling of observations to [0, 1], with the affine
/// map stored for unscaling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scaler {
    pub offset: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Scaler {
    pub fn fit(obs: &[Vec<DVector<f64>>]) -> Self {
        let d = obs[0][0].len();
        let mut lo = DVector::from_element(d, f64::INFINITY);
        let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
        for row in obs {
            for x in row {
                for i in 0..d {
                    lo[i] = lo[i].min(x[i]);
                    hi[i] = hi[i].max(x[i]);
                }
            }
        }
        let mut scale = DVector::zeros(d);
        for i in 0..d {
            let range = hi[i] - lo[i];
            scale[i] = if range > 1e-12 { range } else { 1.0 };
        }
        Self { offset: lo, scale }
    }

    pub fn to_scaled(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.offset[i]) / self.scale[i])
    }

    pub fn from_scaled(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i] * self.scale[i] + self.offset[i])
    }

    pub fn scale_all(&self, obs: &[Vec<DVector<f64>>]) -> Vec<Vec<DVector<f64>>> {
        obs.iter().map(|row| row.iter().map(|x| self.to_scaled(x)).collect()).collect()
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}
