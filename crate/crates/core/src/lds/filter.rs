//! Kalman filtering (with the Joseph-form covariance update) and RTS
//! smoothing, mask-aware throughout: masked time points skip the measurement
//! step, so the filtered distribution equals the predicted one there.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lds::{symmetrize, LdsParams, ObservationMask, RIDGE_SCALE};

#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub predicted_mean: Vec<Vec<DVector<f64>>>,
    pub predicted_cov: Vec<Vec<DMatrix<f64>>>,
    pub filtered_mean: Vec<Vec<DVector<f64>>>,
    pub filtered_cov: Vec<Vec<DMatrix<f64>>>,
    pub smoothed_mean: Vec<Vec<DVector<f64>>>,
    pub smoothed_cov: Vec<Vec<DMatrix<f64>>>,
    /// `lag_one_cov[n][t]` is the smoothed Cov(s_{t+1}, s_t), length T-1.
    pub lag_one_cov: Vec<Vec<DMatrix<f64>>>,
    /// Observed-data log-likelihood accumulated from the filter innovations.
    pub log_likelihood: f64,
}

struct SequenceFilter {
    predicted_mean: Vec<DVector<f64>>,
    predicted_cov: Vec<DMatrix<f64>>,
    filtered_mean: Vec<DVector<f64>>,
    filtered_cov: Vec<DMatrix<f64>>,
    log_likelihood: f64,
}

fn ridge_for(m: &DMatrix<f64>) -> f64 {
    (RIDGE_SCALE * m.trace() / m.nrows() as f64).max(1e-300)
}

fn filter_sequence(
    params: &LdsParams,
    xs: &[DVector<f64>],
    observed: &[bool],
) -> Result<SequenceFilter> {
    let t_len = params.seq_len();
    let d = params.obs_dim();
    let l = params.latent_dim();
    let eye = DMatrix::<f64>::identity(l, l);

    let mut out = SequenceFilter {
        predicted_mean: Vec::with_capacity(t_len),
        predicted_cov: Vec::with_capacity(t_len),
        filtered_mean: Vec::with_capacity(t_len),
        filtered_cov: Vec::with_capacity(t_len),
        log_likelihood: 0.0,
    };

    for t in 0..t_len {
        let (pred_mean, pred_cov) = if t == 0 {
            (params.prior_mean.clone(), params.prior_cov.clone())
        } else {
            let a = &params.a[t];
            let mean = a * &out.filtered_mean[t - 1];
            let mut cov = a * &out.filtered_cov[t - 1] * a.transpose() + &params.state_cov;
            symmetrize(&mut cov);
            (mean, cov)
        };

        if !observed[t] {
            out.filtered_mean.push(pred_mean.clone());
            out.filtered_cov.push(pred_cov.clone());
            out.predicted_mean.push(pred_mean);
            out.predicted_cov.push(pred_cov);
            continue;
        }

        let w = &params.w[t];
        let x = &xs[t];
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("observation at t = {t}")));
        }

        // Innovation covariance P_t = W V Wt + obs_cov. The ridge is a
        // fallback for degenerate (near-zero-noise) systems only, so
        // well-conditioned systems stay exact.
        let mut p = w * &pred_cov * w.transpose();
        for i in 0..d {
            p[(i, i)] += params.obs_cov_diag[i];
        }
        symmetrize(&mut p);
        let (chol, ridge) = match Cholesky::new(p.clone()) {
            Some(c) => (c, 0.0),
            None => {
                let ridge = ridge_for(&p);
                for i in 0..d {
                    p[(i, i)] += ridge;
                }
                (Cholesky::new(p.clone()).ok_or(Error::SingularInnovation(t))?, ridge)
            }
        };

        let innovation = x - w * &pred_mean;
        // K = V Wt P^{-1}, via P X = W V.
        let gain = chol.solve(&(w * &pred_cov)).transpose();

        let filt_mean = &pred_mean + &gain * &innovation;
        // Joseph form keeps the covariance PSD under round-off.
        let i_kw = &eye - &gain * w;
        let mut filt_cov = &i_kw * &pred_cov * i_kw.transpose();
        let scaled_gain = DMatrix::from_fn(l, d, |r, c| {
            gain[(r, c)] * (params.obs_cov_diag[c] + ridge)
        });
        filt_cov += scaled_gain * gain.transpose();
        symmetrize(&mut filt_cov);

        // log N(innovation; 0, P)
        let logdet = 2.0 * (0..d).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
        let maha = innovation.dot(&chol.solve(&innovation));
        out.log_likelihood +=
            -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + maha);

        out.predicted_mean.push(pred_mean);
        out.predicted_cov.push(pred_cov);
        out.filtered_mean.push(filt_mean);
        out.filtered_cov.push(filt_cov);
    }
    Ok(out)
}

/// Forward pass over all sequences. Returns moments with the smoothed fields
/// initialized to the filtered ones; run [`rts_smooth`] to fill them in.
pub fn kalman_filter(
    params: &LdsParams,
    obs: &[Vec<DVector<f64>>],
    mask: &ObservationMask,
) -> Result<PosteriorMoments> {
    params.validate()?;
    mask.validate()?;
    let n = obs.len();
    if n == 0 || mask.observed.len() != n {
        return Err(Error::ShapeMismatch("observation/mask subject counts differ".into()));
    }
    for (row, mrow) in obs.iter().zip(mask.observed.iter()) {
        if row.len() != params.seq_len() || mrow.len() != params.seq_len() {
            return Err(Error::ShapeMismatch("sequence length differs from T".into()));
        }
    }

    let results: Vec<Result<SequenceFilter>> = obs
        .par_iter()
        .zip(mask.observed.par_iter())
        .map(|(xs, observed)| filter_sequence(params, xs, observed))
        .collect();

    let mut moments = PosteriorMoments {
        predicted_mean: Vec::with_capacity(n),
        predicted_cov: Vec::with_capacity(n),
        filtered_mean: Vec::with_capacity(n),
        filtered_cov: Vec::with_capacity(n),
        smoothed_mean: Vec::with_capacity(n),
        smoothed_cov: Vec::with_capacity(n),
        lag_one_cov: Vec::with_capacity(n),
        log_likelihood: 0.0,
    };
    for r in results {
        let seq = r?;
        moments.log_likelihood += seq.log_likelihood;
        moments.smoothed_mean.push(seq.filtered_mean.clone());
        moments.smoothed_cov.push(seq.filtered_cov.clone());
        moments.predicted_mean.push(seq.predicted_mean);
        moments.predicted_cov.push(seq.predicted_cov);
        moments.filtered_mean.push(seq.filtered_mean);
        moments.filtered_cov.push(seq.filtered_cov);
        moments.lag_one_cov.push(Vec::new());
    }
    Ok(moments)
}

/// Backward RTS pass; fills the smoothed moments and the lag-one
/// cross-covariances required by the M-step.
pub fn rts_smooth(params: &LdsParams, moments: &mut PosteriorMoments) -> Result<()> {
    let t_len = params.seq_len();
    let l = params.latent_dim();
    for n in 0..moments.filtered_mean.len() {
        let mut smoothed_mean = moments.filtered_mean[n].clone();
        let mut smoothed_cov = moments.filtered_cov[n].clone();
        let mut lag_one: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); t_len.saturating_sub(1)];

        for t in (0..t_len.saturating_sub(1)).rev() {
            let pred_cov_next = &moments.predicted_cov[n][t + 1];
            // Degenerate prediction (deterministic system): nothing to gain
            // from the future, J = 0.
            let j = if pred_cov_next.trace().abs() < 1e-14 {
                DMatrix::zeros(l, l)
            } else {
                let chol = match Cholesky::new(pred_cov_next.clone()) {
                    Some(c) => c,
                    None => {
                        let ridge = ridge_for(pred_cov_next);
                        let mut reg = pred_cov_next.clone();
                        for i in 0..l {
                            reg[(i, i)] += ridge;
                        }
                        Cholesky::new(reg).ok_or(Error::SingularPrediction(t + 1))?
                    }
                };
                // J_t = V_filt A_{t+1}t (V_pred_{t+1})^{-1}
                chol.solve(&(&params.a[t + 1] * &moments.filtered_cov[n][t])).transpose()
            };

            smoothed_mean[t] = &moments.filtered_mean[n][t]
                + &j * (&smoothed_mean[t + 1] - &moments.predicted_mean[n][t + 1]);
            let mut cov = &moments.filtered_cov[n][t]
                + &j * (&smoothed_cov[t + 1] - pred_cov_next) * j.transpose();
            symmetrize(&mut cov);
            smoothed_cov[t] = cov;
            // Cov(s_{t+1}, s_t | x_{1:T}) = V_smooth_{t+1} J_tᵀ
            lag_one[t] = &smoothed_cov[t + 1] * j.transpose();
        }

        moments.smoothed_mean[n] = smoothed_mean;
        moments.smoothed_cov[n] = smoothed_cov;
        moments.lag_one_cov[n] = lag_one;
    }
    Ok(())
}

/// Observed-data log-likelihood from the filter innovations.
pub fn log_likelihood(
    params: &LdsParams,
    obs: &[Vec<DVector<f64>>],
    mask: &ObservationMask,
) -> Result<f64> {
    Ok(kalman_filter(params, obs, mask)?.log_likelihood)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(a: f64, w: f64, q: f64, r: f64, mu0: f64, v0: f64, t: usize) -> LdsParams {
        LdsParams {
            a: (0..t).map(|_| DMatrix::from_element(1, 1, a)).collect(),
            w: (0..t).map(|_| DMatrix::from_element(1, 1, w)).collect(),
            state_cov: DMatrix::from_element(1, 1, q),
            obs_cov_diag: DVector::from_element(1, r),
            prior_mean: DVector::from_element(1, mu0),
            prior_cov: DMatrix::from_element(1, 1, v0),
        }
    }

    #[test]
    fn deterministic_identity_system() {
        let c = 3.7;
        let params = scalar_params(1.0, 1.0, 0.0, 0.0, c, 0.0, 5);
        let obs = vec![vec![DVector::from_element(1, c); 5]];
        let mask = ObservationMask::all_observed(1, 5);
        let m = kalman_filter(&params, &obs, &mask).unwrap();
        for t in 0..5 {
            assert!((m.filtered_mean[0][t][0] - c).abs() < 1e-9);
            assert!(m.filtered_cov[0][t][(0, 0)].abs() < 1e-9);
        }
    }

    #[test]
    fn masked_step_equals_prediction() {
        let params = scalar_params(0.9, 1.0, 0.2, 0.1, 0.0, 1.0, 3);
        let obs = vec![vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 99.0), // hidden
            DVector::from_element(1, 0.5),
        ]];
        let mask = ObservationMask { observed: vec![vec![true, false, true]] };
        let m = kalman_filter(&params, &obs, &mask).unwrap();
        assert_eq!(m.filtered_mean[0][1], m.predicted_mean[0][1]);
        assert_eq!(m.filtered_cov[0][1], m.predicted_cov[0][1]);
    }

    #[test]
    fn smoother_base_case_and_symmetry() {
        let params = scalar_params(0.8, 1.2, 0.3, 0.2, 0.1, 0.5, 4);
        let obs = vec![vec![
            DVector::from_element(1, 0.3),
            DVector::from_element(1, -0.1),
            DVector::from_element(1, 0.2),
            DVector::from_element(1, 0.7),
        ]];
        let mask = ObservationMask::all_observed(1, 4);
        let mut m = kalman_filter(&params, &obs, &mask).unwrap();
        rts_smooth(&params, &mut m).unwrap();
        // t = T: smoothed equals filtered.
        assert_eq!(m.smoothed_mean[0][3], m.filtered_mean[0][3]);
        assert_eq!(m.smoothed_cov[0][3], m.filtered_cov[0][3]);
        for t in 0..4 {
            let c = &m.smoothed_cov[0][t];
            assert!((c - c.transpose()).amax() < 1e-10);
        }
    }

    #[test]
    fn loglik_peaks_on_exact_fit() {
        let eps = 1e-3;
        let c = 0.7;
        let params = scalar_params(1.0, 1.0, 0.0, eps, c, 0.0, 4);
        let obs = vec![vec![DVector::from_element(1, c); 4]];
        let mask = ObservationMask::all_observed(1, 4);
        let ll = log_likelihood(&params, &obs, &mask).unwrap();
        // Zero innovations: ll = sum over t of log N(0; 0, eps).
        let expected: f64 =
            4.0 * -0.5 * ((2.0 * std::f64::consts::PI).ln() + eps.ln());
        assert!((ll - expected).abs() < 1e-9, "{ll} vs {expected}");
        // Doubling the observation noise strictly lowers the likelihood.
        let worse = scalar_params(1.0, 1.0, 0.0, 2.0 * eps, c, 0.0, 4);
        let ll2 = log_likelihood(&worse, &obs, &mask).unwrap();
        assert!(ll2 < ll);
    }

    #[test]
    fn joseph_form_stays_psd() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let l = rng.gen_range(1..=3);
            let d = rng.gen_range(1..=3);
            let t = 4;
            let rand_psd = |rng: &mut ChaCha8Rng, k: usize| {
                let m = DMatrix::from_fn(k, k, |_, _| rng.gen::<f64>() - 0.5);
                &m * m.transpose()
            };
            let params = LdsParams {
                a: (0..t)
                    .map(|_| DMatrix::from_fn(l, l, |_, _| rng.gen::<f64>() - 0.5))
                    .collect(),
                w: (0..t)
                    .map(|_| DMatrix::from_fn(d, l, |_, _| rng.gen::<f64>() - 0.5))
                    .collect(),
                state_cov: rand_psd(&mut rng, l),
                obs_cov_diag: DVector::from_fn(d, |_, _| rng.gen::<f64>() * 0.5),
                prior_mean: DVector::from_fn(l, |_, _| rng.gen::<f64>() - 0.5),
                prior_cov: rand_psd(&mut rng, l),
            };
            let obs =
                vec![(0..t).map(|_| DVector::from_fn(d, |_, _| rng.gen::<f64>())).collect()];
            let mask = ObservationMask::all_observed(1, t);
            let m = kalman_filter(&params, &obs, &mask).unwrap();
            for cov in &m.filtered_cov[0] {
                let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
                assert!(min_eig >= -1e-10, "min eigenvalue {min_eig}");
            }
        }
    }
}
