//! EM parameter estimation for the time-variant LDS, plus reconstruction
//! and sampling.
//!
//! The E-step is the Kalman filter + RTS smoother; the M-step applies the
//! standard closed-form linear-Gaussian maximizers built from smoothed
//! first/second moments and lag-one cross-covariances, with per-t updates of
//! A_t and W_t and pooled updates of the noise covariances.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lds::filter::{kalman_filter, rts_smooth, PosteriorMoments};
use crate::lds::{symmetrize, LdsParams, ObservationMask, RIDGE_SCALE};

#[derive(Debug, Clone)]
pub struct EmOptions {
    pub latent_dim: usize,
    pub iterations: usize,
    pub init_seed: u64,
    /// Floor applied to the observation noise diagonal.
    pub obs_noise_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { latent_dim: 64, iterations: 50, init_seed: 0, obs_noise_floor: 1e-10 }
    }
}

fn ridged_solve(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    let k = lhs.nrows();
    let ridge = (RIDGE_SCALE * lhs.trace() / k as f64).max(1e-300);
    let mut reg = lhs.clone();
    for i in 0..k {
        reg[(i, i)] += ridge;
    }
    symmetrize(&mut reg);
    let chol = Cholesky::new(reg).ok_or(Error::RankDeficientStatistics(t))?;
    // Solves X * lhs = rhs for X.
    Ok(chol.solve(&rhs.transpose()).transpose())
}

/// Deterministic initialization: W_t shared across t from the top-L principal
/// directions of the pooled observations, A_t = I, and moments of the
/// projected data for the rest. The seed only matters when the data rank is
/// below L and random directions must fill the basis.
fn initialize(
    obs: &[Vec<DVector<f64>>],
    mask: &ObservationMask,
    l: usize,
    seed: u64,
) -> LdsParams {
    let n = obs.len();
    let t_len = obs[0].len();
    let d = obs[0][0].len();

    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (ni, row) in obs.iter().enumerate() {
        for (t, x) in row.iter().enumerate() {
            if mask.is_observed(ni, t) {
                cols.push(x.clone());
            }
        }
    }
    let pooled = DMatrix::from_columns(&cols);
    let svd = pooled.clone().svd(true, false);
    let u = svd.u.expect("svd requested u");
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12).count().min(u.ncols());

    let mut w = DMatrix::zeros(d, l);
    for j in 0..l.min(rank) {
        w.set_column(j, &u.column(j));
    }
    if l > rank {
        // Fill remaining directions with seeded random vectors orthogonalized
        // against the chosen basis.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for j in rank..l {
            let mut v = DVector::from_fn(d, |_, _| rng.gen::<f64>() - 0.5);
            for k in 0..j {
                let proj = w.column(k).dot(&v);
                v -= proj * DVector::from(w.column(k));
            }
            let norm = v.norm();
            if norm > 1e-12 {
                v /= norm;
            }
            w.set_column(j, &v);
        }
    }

    // Latent projections of the observed data.
    let latents: Vec<Vec<DVector<f64>>> = obs
        .iter()
        .map(|row| row.iter().map(|x| w.transpose() * x).collect())
        .collect();

    let mut mu0 = DVector::zeros(l);
    for ni in 0..n {
        mu0 += &latents[ni][0];
    }
    mu0 /= n as f64;
    let mut v0 = DMatrix::zeros(l, l);
    for ni in 0..n {
        let diff = &latents[ni][0] - &mu0;
        v0 += &diff * diff.transpose();
    }
    v0 /= n as f64;
    for i in 0..l {
        v0[(i, i)] += 1e-4;
    }

    // Residual variance of the rank-L reconstruction.
    let mut resid = DVector::zeros(d);
    let mut count = 0.0;
    for (ni, row) in obs.iter().enumerate() {
        for (t, x) in row.iter().enumerate() {
            if mask.is_observed(ni, t) {
                let rec = &w * &latents[ni][t];
                for i in 0..d {
                    resid[i] += (x[i] - rec[i]).powi(2);
                }
                count += 1.0;
            }
        }
    }
    resid /= count;
    // Floor at a fraction of the per-coordinate variance: a near-zero start
    // is a degenerate fixed point of the noise update (the smoother pins the
    // states to the data and the residual never grows back).
    let mut var = DVector::zeros(d);
    let mut data_mean = DVector::zeros(d);
    for c in &cols {
        data_mean += c;
    }
    data_mean /= count;
    for c in &cols {
        for i in 0..d {
            var[i] += (c[i] - data_mean[i]).powi(2);
        }
    }
    var /= count;
    for i in 0..d {
        resid[i] = resid[i].max(0.05 * var[i]).max(1e-6);
    }

    LdsParams {
        a: (0..t_len).map(|_| DMatrix::identity(l, l)).collect(),
        w: (0..t_len).map(|_| w.clone()).collect(),
        state_cov: DMatrix::identity(l, l) * 0.1,
        obs_cov_diag: resid,
        prior_mean: mu0,
        prior_cov: v0,
    }
}

struct SufficientStats {
    /// E[s_t] per (n, t).
    mean: Vec<Vec<DVector<f64>>>,
    /// E[s_t s_tᵀ] per (n, t).
    second: Vec<Vec<DMatrix<f64>>>,
    /// E[s_t s_{t-1}ᵀ] per (n, t-1) (index t-1).
    cross: Vec<Vec<DMatrix<f64>>>,
}

fn collect_stats(moments: &PosteriorMoments) -> SufficientStats {
    let n = moments.smoothed_mean.len();
    let mut mean = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let mut cross = Vec::with_capacity(n);
    for ni in 0..n {
        let t_len = moments.smoothed_mean[ni].len();
        let mut m_row = Vec::with_capacity(t_len);
        let mut s_row = Vec::with_capacity(t_len);
        let mut c_row = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 0..t_len {
            let mu = &moments.smoothed_mean[ni][t];
            m_row.push(mu.clone());
            s_row.push(&moments.smoothed_cov[ni][t] + mu * mu.transpose());
            if t > 0 {
                let prev = &moments.smoothed_mean[ni][t - 1];
                c_row.push(&moments.lag_one_cov[ni][t - 1] + mu * prev.transpose());
            }
        }
        mean.push(m_row);
        second.push(s_row);
        cross.push(c_row);
    }
    SufficientStats { mean, second, cross }
}

fn m_step(
    obs: &[Vec<DVector<f64>>],
    mask: &ObservationMask,
    stats: &SufficientStats,
    old: &LdsParams,
) -> Result<LdsParams> {
    let n = obs.len();
    let t_len = old.seq_len();
    let l = old.latent_dim();
    let d = old.obs_dim();

    // Per-t transitions.
    let mut a = Vec::with_capacity(t_len);
    a.push(DMatrix::identity(l, l)); // a[0] unused by convention
    for t in 1..t_len {
        let mut s_cross = DMatrix::zeros(l, l);
        let mut s_prev = DMatrix::zeros(l, l);
        for ni in 0..n {
            s_cross += &stats.cross[ni][t - 1];
            s_prev += &stats.second[ni][t - 1];
        }
        a.push(ridged_solve(&s_prev, &s_cross, t)?);
    }

    // Per-t observation matrices, from observed cells only.
    let mut w = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut xs = DMatrix::zeros(d, l);
        let mut ss = DMatrix::zeros(l, l);
        let mut any = false;
        for ni in 0..n {
            if mask.is_observed(ni, t) {
                xs += &obs[ni][t] * stats.mean[ni][t].transpose();
                ss += &stats.second[ni][t];
                any = true;
            }
        }
        if any {
            w.push(ridged_solve(&ss, &xs, t)?);
        } else {
            w.push(old.w[t].clone());
        }
    }

    // Pooled process noise over t >= 1.
    let mut state_cov = DMatrix::zeros(l, l);
    for t in 1..t_len {
        let at = &a[t];
        for ni in 0..n {
            let cross = &stats.cross[ni][t - 1];
            state_cov += &stats.second[ni][t] - cross * at.transpose()
                - at * cross.transpose()
                + at * &stats.second[ni][t - 1] * at.transpose();
        }
    }
    if t_len > 1 {
        state_cov /= (n * (t_len - 1)) as f64;
    }
    symmetrize(&mut state_cov);
    clamp_psd(&mut state_cov);

    // Diagonal observation noise over observed cells.
    let mut obs_cov = DVector::zeros(d);
    let mut count = 0.0;
    for t in 0..t_len {
        let wt = &w[t];
        for ni in 0..n {
            if !mask.is_observed(ni, t) {
                continue;
            }
            let x = &obs[ni][t];
            let wmu = wt * &stats.mean[ni][t];
            let wsw = wt * &stats.second[ni][t] * wt.transpose();
            for i in 0..d {
                obs_cov[i] += x[i] * x[i] - 2.0 * x[i] * wmu[i] + wsw[(i, i)];
            }
            count += 1.0;
        }
    }
    obs_cov /= count;

    // Prior from t = 0 moments.
    let mut mu0 = DVector::zeros(l);
    for ni in 0..n {
        mu0 += &stats.mean[ni][0];
    }
    mu0 /= n as f64;
    let mut v0 = DMatrix::zeros(l, l);
    for ni in 0..n {
        let spread = &stats.mean[ni][0] - &mu0;
        v0 += &stats.second[ni][0] - &stats.mean[ni][0] * stats.mean[ni][0].transpose()
            + &spread * spread.transpose();
    }
    v0 /= n as f64;
    symmetrize(&mut v0);
    clamp_psd(&mut v0);

    Ok(LdsParams { a, w, state_cov, obs_cov_diag: obs_cov, prior_mean: mu0, prior_cov: v0 })
}

/// Clamps tiny negative eigenvalues arising from round-off.
fn clamp_psd(m: &mut DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return;
    }
    let clamped = DVector::from_fn(eig.eigenvalues.len(), |i, _| eig.eigenvalues[i].max(0.0));
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(m);
}

/// Fits the LDS by EM. Returns the final parameters and the observed-data
/// log-likelihood evaluated after each M-step, so the last trace entry
/// corresponds exactly to the returned parameters.
pub fn em_fit(
    obs: &[Vec<DVector<f64>>],
    mask: &ObservationMask,
    opts: &EmOptions,
) -> Result<(LdsParams, Vec<f64>)> {
    if opts.iterations == 0 {
        return Err(Error::InvalidArgument("at least one EM iteration required".into()));
    }
    if obs.is_empty() {
        return Err(Error::InvalidArgument("no observation sequences".into()));
    }
    mask.validate()?;
    let mut params = initialize(obs, mask, opts.latent_dim, opts.init_seed);
    let mut trace = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        let mut moments = kalman_filter(&params, obs, mask)?;
        rts_smooth(&params, &mut moments)?;
        let stats = collect_stats(&moments);
        let mut new_params = m_step(obs, mask, &stats, &params)?;
        for i in 0..new_params.obs_cov_diag.len() {
            new_params.obs_cov_diag[i] = new_params.obs_cov_diag[i].max(opts.obs_noise_floor);
        }
        params = new_params;
        trace.push(kalman_filter(&params, obs, mask)?.log_likelihood);
    }
    Ok((params, trace))
}

/// Smoothed reconstruction: x̂_{n,t} = W_t * smoothed state mean. Masked time
/// points are inferred through the state equation inside the filter/smoother.
pub fn reconstruct(
    params: &LdsParams,
    obs: &[Vec<DVector<f64>>],
    mask: &ObservationMask,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let mut moments = kalman_filter(params, obs, mask)?;
    rts_smooth(params, &mut moments)?;
    Ok(moments
        .smoothed_mean
        .iter()
        .map(|row| {
            row.iter().enumerate().map(|(t, s)| &params.w[t] * s).collect()
        })
        .collect())
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = DVector::from_fn(eig.eigenvalues.len(), |i, _| eig.eigenvalues[i].max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Draws sequences from the generative model; deterministic given `seed`.
pub fn sample(
    params: &LdsParams,
    n_sequences: usize,
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    params.validate()?;
    let l = params.latent_dim();
    let d = params.obs_dim();
    let t_len = params.seq_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior_sqrt = psd_sqrt(&params.prior_cov);
    let state_sqrt = psd_sqrt(&params.state_cov);
    let obs_sqrt = DVector::from_fn(d, |i, _| params.obs_cov_diag[i].max(0.0).sqrt());

    let standard_normal = |rng: &mut ChaCha8Rng, k: usize| {
        DVector::from_fn(k, |_, _| {
            // Box-Muller.
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    };

    let mut out = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut states = Vec::with_capacity(t_len);
        let mut xs = Vec::with_capacity(t_len);
        let mut s = &params.prior_mean + &prior_sqrt * standard_normal(&mut rng, l);
        for t in 0..t_len {
            if t > 0 {
                s = &params.a[t] * &s + &state_sqrt * standard_normal(&mut rng, l);
            }
            let noise = standard_normal(&mut rng, d);
            let x = &params.w[t] * &s
                + DVector::from_fn(d, |i, _| obs_sqrt[i] * noise[i]);
            states.push(s.clone());
            xs.push(x);
        }
        out.push(xs);
    }
    Ok(out)
}
