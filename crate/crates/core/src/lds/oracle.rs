//! Brute-force reference for small LDS instances: builds the full joint
//! Gaussian over all states and observations of one sequence and conditions
//! it directly. Deliberately independent of the filter/smoother code path;
//! only practical for tiny L, D, T.

use nalgebra::{DMatrix, DVector};

use crate::lds::LdsParams;

/// Exact posterior moments of all states of one sequence given its observed
/// time points, plus the marginal log-density of those observations.
pub struct JointPosterior {
    /// E[s_t | observed x], per t.
    pub state_means: Vec<DVector<f64>>,
    /// Cov(s_t, s_u | observed x), indexed [t][u].
    pub state_covs: Vec<Vec<DMatrix<f64>>>,
    pub log_likelihood: f64,
}

/// Conditions the joint Gaussian of (s_0..s_{T-1}, x_0..x_{T-1}) on the
/// observed x entries of a single sequence.
pub fn condition_on_observations(
    params: &LdsParams,
    xs: &[DVector<f64>],
    observed: &[bool],
) -> JointPosterior {
    let l = params.latent_dim();
    let d = params.obs_dim();
    let t_len = params.seq_len();

    // State means and joint state covariance by linear-Gaussian composition.
    let mut mean_s: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    mean_s.push(params.prior_mean.clone());
    for t in 1..t_len {
        let prev = mean_s[t - 1].clone();
        mean_s.push(&params.a[t] * prev);
    }
    let mut cov_s: Vec<Vec<DMatrix<f64>>> =
        vec![vec![DMatrix::zeros(l, l); t_len]; t_len];
    cov_s[0][0] = params.prior_cov.clone();
    for t in 1..t_len {
        let a = &params.a[t];
        // Cross terms against everything before t.
        for u in 0..t {
            cov_s[t][u] = a * &cov_s[t - 1][u];
            cov_s[u][t] = cov_s[t][u].transpose();
        }
        cov_s[t][t] = a * &cov_s[t - 1][t - 1] * a.transpose() + &params.state_cov;
    }

    // Observed blocks.
    let obs_ts: Vec<usize> = (0..t_len).filter(|&t| observed[t]).collect();
    let k = obs_ts.len();
    let mut mean_x = DVector::zeros(k * d);
    let mut cov_xx = DMatrix::zeros(k * d, k * d);
    let mut cov_sx = DMatrix::zeros(t_len * l, k * d);
    for (bi, &ti) in obs_ts.iter().enumerate() {
        let wi = &params.w[ti];
        mean_x.rows_mut(bi * d, d).copy_from(&(wi * &mean_s[ti]));
        for (bj, &tj) in obs_ts.iter().enumerate() {
            let wj = &params.w[tj];
            let mut block = wi * &cov_s[ti][tj] * wj.transpose();
            if bi == bj {
                for i in 0..d {
                    block[(i, i)] += params.obs_cov_diag[i];
                }
            }
            cov_xx.view_mut((bi * d, bj * d), (d, d)).copy_from(&block);
        }
        for t in 0..t_len {
            let block = &cov_s[t][ti] * wi.transpose();
            cov_sx.view_mut((t * l, bi * d), (l, d)).copy_from(&block);
        }
    }

    let mut x_obs = DVector::zeros(k * d);
    for (bi, &ti) in obs_ts.iter().enumerate() {
        x_obs.rows_mut(bi * d, d).copy_from(&xs[ti]);
    }

    // Pseudo-inverse conditioning so degenerate (zero-noise) systems work.
    let cov_xx_inv = cov_xx.clone().pseudo_inverse(1e-12).expect("pseudo-inverse");
    let innovation = &x_obs - &mean_x;
    let gain = &cov_sx * &cov_xx_inv;
    let mut post_mean_flat = DVector::zeros(t_len * l);
    for t in 0..t_len {
        post_mean_flat.rows_mut(t * l, l).copy_from(&mean_s[t]);
    }
    post_mean_flat += &gain * &innovation;
    let correction = &gain * cov_sx.transpose();

    let mut state_means = Vec::with_capacity(t_len);
    let mut state_covs = vec![vec![DMatrix::zeros(l, l); t_len]; t_len];
    for t in 0..t_len {
        state_means.push(DVector::from(post_mean_flat.rows(t * l, l)));
        for u in 0..t_len {
            let corr = correction.view((t * l, u * l), (l, l));
            state_covs[t][u] = &cov_s[t][u] - DMatrix::from(corr);
        }
    }

    // Marginal log-density of the observed stack.
    let eig = cov_xx.clone().symmetric_eigen();
    let mut logdet = 0.0;
    let mut rank = 0usize;
    for &lam in eig.eigenvalues.iter() {
        if lam > 1e-12 {
            logdet += lam.ln();
            rank += 1;
        }
    }
    let maha = innovation.dot(&(&cov_xx_inv * &innovation));
    let log_likelihood =
        -0.5 * (rank as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + maha);

    JointPosterior { state_means, state_covs, log_likelihood }
}
