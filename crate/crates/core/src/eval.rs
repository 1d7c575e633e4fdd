//! Evaluation metrics for a fitted spatiotemporal shape model: full-sequence
//! generalization, partial-sequence reconstruction, specificity, and PCA
//! modes of variation. Cross-validation splits at the subject level.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::lds::{em_fit, reconstruct, sample, EmOptions, ObservationMask, Scaler};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    FullGeneralization,
    PartialReconstruction,
    Specificity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric_kind: MetricKind,
    pub per_timepoint_rmse: Vec<Option<f64>>,
    pub overall_rmse: Option<f64>,
    pub overall_std: Option<f64>,
    pub fold_id: Option<usize>,
    pub mask_fraction: Option<f64>,
    pub n_samples: Option<usize>,
}

/// Root mean square error pooled over every scalar entry of the two stacks.
pub fn rmse(x: &[Vec<DVector<f64>>], xhat: &[Vec<DVector<f64>>]) -> Result<f64> {
    let (sum, count) = sq_error_sum(x, xhat)?;
    if count == 0 {
        return Err(Error::ShapeMismatch("empty input".into()));
    }
    Ok((sum / count as f64).sqrt())
}

fn sq_error_sum(x: &[Vec<DVector<f64>>], xhat: &[Vec<DVector<f64>>]) -> Result<(f64, usize)> {
    if x.len() != xhat.len() {
        return Err(Error::ShapeMismatch("subject counts differ".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (row, rhat) in x.iter().zip(xhat.iter()) {
        if row.len() != rhat.len() {
            return Err(Error::ShapeMismatch("sequence lengths differ".into()));
        }
        for (a, b) in row.iter().zip(rhat.iter()) {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch("observation dimensions differ".into()));
            }
            sum += (a - b).norm_squared();
            count += a.len();
        }
    }
    Ok((sum, count))
}

fn per_timepoint_rmse(
    x: &[Vec<DVector<f64>>],
    xhat: &[Vec<DVector<f64>>],
    t_len: usize,
) -> Vec<Option<f64>> {
    (0..t_len)
        .map(|t| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (row, rhat) in x.iter().zip(xhat.iter()) {
                sum += (&row[t] - &rhat[t]).norm_squared();
                count += row[t].len();
            }
            if count == 0 { None } else { Some((sum / count as f64).sqrt()) }
        })
        .collect()
}

/// Flattened world-space observation stack of a cohort.
pub fn cohort_observations(pdm: &Cohort) -> Vec<Vec<DVector<f64>>> {
    pdm.shapes
        .iter()
        .map(|row| row.iter().map(|ps| ps.flatten()).collect())
        .collect()
}

/// Deterministic subject-level fold assignment: subject i goes to fold
/// i mod folds after a seeded shuffle.
pub fn fold_assignments(n_subjects: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_subjects];
    for (pos, &subject) in order.iter().enumerate() {
        assignment[subject] = pos % folds;
    }
    assignment
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub latent_dim: usize,
    pub em_iterations: usize,
    pub folds: usize,
}

impl Default for FitArgs {
    fn default() -> Self {
        Self { latent_dim: 64, em_iterations: 50, folds: 5 }
    }
}

/// Fits an LDS on each training fold and reports the reconstruction RMSE of
/// the held-out sequences.
pub fn full_sequence_generalization(
    pdm: &Cohort,
    args: &FitArgs,
    master_seed: u64,
) -> Result<Vec<MetricsReport>> {
    let n = pdm.n_subjects();
    if args.folds < 2 || n < args.folds {
        return Err(Error::InvalidArgument(format!(
            "need N >= folds >= 2, got N = {n}, folds = {}",
            args.folds
        )));
    }
    let obs = cohort_observations(pdm);
    let scaler = Scaler::fit(&obs);
    let scaled = scaler.scale_all(&obs);
    let assignment = fold_assignments(n, args.folds, seed::derive(master_seed, "folds"));

    let mut reports = Vec::with_capacity(args.folds);
    for fold in 0..args.folds {
        let train: Vec<Vec<DVector<f64>>> = (0..n)
            .filter(|&i| assignment[i] != fold)
            .map(|i| scaled[i].clone())
            .collect();
        let test: Vec<Vec<DVector<f64>>> = (0..n)
            .filter(|&i| assignment[i] == fold)
            .map(|i| scaled[i].clone())
            .collect();
        let train_mask = ObservationMask::all_observed(train.len(), pdm.n_timepoints());
        let opts = EmOptions {
            latent_dim: args.latent_dim,
            iterations: args.em_iterations,
            init_seed: seed::derive(master_seed, "em-init"),
            ..Default::default()
        };
        let (params, _) = em_fit(&train, &train_mask, &opts)?;
        let test_mask = ObservationMask::all_observed(test.len(), pdm.n_timepoints());
        let rec = reconstruct(&params, &test, &test_mask)?;
        let overall = rmse(&test, &rec)?;
        let per_t = per_timepoint_rmse(&test, &rec, pdm.n_timepoints());
        let std = spread_of_sequence_errors(&test, &rec);
        reports.push(MetricsReport {
            metric_kind: MetricKind::FullGeneralization,
            per_timepoint_rmse: per_t,
            overall_rmse: Some(overall),
            overall_std: Some(std),
            fold_id: Some(fold),
            mask_fraction: None,
            n_samples: None,
        });
    }
    Ok(reports)
}

fn spread_of_sequence_errors(x: &[Vec<DVector<f64>>], xhat: &[Vec<DVector<f64>>]) -> f64 {
    let per_seq: Vec<f64> = x
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| {
            rmse(std::slice::from_ref(a), std::slice::from_ref(b)).unwrap_or(f64::NAN)
        })
        .collect();
    let mean = per_seq.iter().sum::<f64>() / per_seq.len() as f64;
    (per_seq.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / per_seq.len() as f64).sqrt()
}

/// Masked-entry reconstruction error at each requested mask fraction.
/// Masking never removes t = 0; fractions yielding zero masked points report
/// an absent RMSE rather than zero.
pub fn partial_sequence_reconstruction(
    pdm: &Cohort,
    mask_fractions: &[f64],
    trials: usize,
    args: &FitArgs,
    master_seed: u64,
) -> Result<Vec<MetricsReport>> {
    for &f in mask_fractions {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidFraction(f));
        }
    }
    let n = pdm.n_subjects();
    let t_len = pdm.n_timepoints();
    let obs = cohort_observations(pdm);
    let scaler = Scaler::fit(&obs);
    let scaled = scaler.scale_all(&obs);
    let assignment = fold_assignments(n, args.folds, seed::derive(master_seed, "folds"));

    // One model per fold, shared across fractions and trials.
    let mut fold_models = Vec::with_capacity(args.folds);
    for fold in 0..args.folds {
        let train: Vec<Vec<DVector<f64>>> = (0..n)
            .filter(|&i| assignment[i] != fold)
            .map(|i| scaled[i].clone())
            .collect();
        let mask = ObservationMask::all_observed(train.len(), t_len);
        let opts = EmOptions {
            latent_dim: args.latent_dim,
            iterations: args.em_iterations,
            init_seed: seed::derive(master_seed, "em-init"),
            ..Default::default()
        };
        fold_models.push(em_fit(&train, &mask, &opts)?.0);
    }

    let mut reports = Vec::with_capacity(mask_fractions.len());
    for (fi, &fraction) in mask_fractions.iter().enumerate() {
        let n_masked = ((fraction * t_len as f64).floor() as usize).min(t_len - 1);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut per_t_sum = vec![0.0; t_len];
        let mut per_t_count = vec![0usize; t_len];
        let mut per_trial_rmse = Vec::new();

        for trial in 0..trials {
            let trial_seed =
                seed::derive(master_seed, &format!("partial-{fi}-{trial}"));
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            for subject in 0..n {
                let fold = assignment[subject];
                let params = &fold_models[fold];
                // t = 0 always observed.
                let mut candidates: Vec<usize> = (1..t_len).collect();
                candidates.shuffle(&mut rng);
                let masked: Vec<usize> = candidates.into_iter().take(n_masked).collect();
                if masked.is_empty() {
                    continue;
                }
                let mut observed = vec![true; t_len];
                for &t in &masked {
                    observed[t] = false;
                }
                let seq = vec![scaled[subject].clone()];
                let mask = ObservationMask { observed: vec![observed] };
                let rec = reconstruct(params, &seq, &mask)?;
                let mut trial_sum = 0.0;
                let mut trial_count = 0usize;
                for &t in &masked {
                    let err = (&seq[0][t] - &rec[0][t]).norm_squared();
                    sum += err;
                    count += seq[0][t].len();
                    per_t_sum[t] += err;
                    per_t_count[t] += seq[0][t].len();
                    trial_sum += err;
                    trial_count += seq[0][t].len();
                }
                per_trial_rmse.push((trial_sum / trial_count as f64).sqrt());
            }
        }

        let overall = if count == 0 { None } else { Some((sum / count as f64).sqrt()) };
        let std = if per_trial_rmse.is_empty() {
            None
        } else {
            let mean = per_trial_rmse.iter().sum::<f64>() / per_trial_rmse.len() as f64;
            Some(
                (per_trial_rmse.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
                    / per_trial_rmse.len() as f64)
                    .sqrt(),
            )
        };
        reports.push(MetricsReport {
            metric_kind: MetricKind::PartialReconstruction,
            per_timepoint_rmse: (0..t_len)
                .map(|t| {
                    if per_t_count[t] == 0 {
                        None
                    } else {
                        Some((per_t_sum[t] / per_t_count[t] as f64).sqrt())
                    }
                })
                .collect(),
            overall_rmse: overall,
            overall_std: std,
            fold_id: None,
            mask_fraction: Some(fraction),
            n_samples: None,
        });
    }
    Ok(reports)
}

/// Distance from model samples to the nearest training sequence: lower means
/// the model only generates sequences close to real ones.
pub fn specificity(
    params: &crate::lds::LdsParams,
    train: &[Vec<DVector<f64>>],
    n_samples: usize,
    seed_value: u64,
) -> Result<MetricsReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let t_len = params.seq_len();
    let draws = sample(params, n_samples, seed_value)?;
    let mut minima = Vec::with_capacity(n_samples);
    let mut per_t_sum = vec![0.0; t_len];
    for draw in &draws {
        // Exhaustive whole-sequence nearest neighbor.
        let mut best = f64::INFINITY;
        let mut best_idx = 0;
        for (i, seq) in train.iter().enumerate() {
            let d = rmse(std::slice::from_ref(draw), std::slice::from_ref(seq))?;
            if d < best {
                best = d;
                best_idx = i;
            }
        }
        minima.push(best);
        for t in 0..t_len {
            let d = &draw[t] - &train[best_idx][t];
            per_t_sum[t] += (d.norm_squared() / d.len() as f64).sqrt();
        }
    }
    let mean = minima.iter().sum::<f64>() / minima.len() as f64;
    let std =
        (minima.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / minima.len() as f64).sqrt();
    Ok(MetricsReport {
        metric_kind: MetricKind::Specificity,
        per_timepoint_rmse: per_t_sum
            .iter()
            .map(|s| Some(s / n_samples as f64))
            .collect(),
        overall_rmse: Some(mean),
        overall_std: Some(std),
        fold_id: None,
        mask_fraction: None,
        n_samples: Some(n_samples),
    })
}

#[derive(Debug, Clone)]
pub struct PcaModes {
    pub mean_shape: DVector<f64>,
    /// Orthonormal columns, leading eigenvector first.
    pub modes: DMatrix<f64>,
    /// Non-increasing eigenvalues of the pooled shape covariance.
    pub eigenvalues: Vec<f64>,
    /// For each kept mode, shapes at mean + j*sqrt(lambda) for j = -2..=2.
    pub sweep: Vec<Vec<DVector<f64>>>,
}

/// PCA over all aligned flattened point sets, pooled over subjects and time.
pub fn modes_of_variation(pdm: &Cohort, k: usize) -> Result<PcaModes> {
    let samples: Vec<DVector<f64>> = pdm
        .shapes
        .iter()
        .flat_map(|row| row.iter().map(|ps| ps.flatten()))
        .collect();
    let count = samples.len();
    if count < 2 {
        return Err(Error::DegenerateEnsemble("need at least two shapes for PCA".into()));
    }
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in &samples {
        mean += s;
    }
    mean /= count as f64;
    let mut centered = DMatrix::zeros(dim, count);
    for (j, s) in samples.iter().enumerate() {
        centered.set_column(j, &(s - &mean));
    }
    // Gram route: eigenvectors of the small count x count matrix.
    let gram = centered.transpose() * &centered / (count as f64 - 1.0);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let keep = k.min(count - 1).max(1);
    let mut modes = DMatrix::zeros(dim, keep);
    let mut eigenvalues = Vec::with_capacity(keep);
    for (col, &idx) in order.iter().take(keep).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        eigenvalues.push(lam);
        let v = &centered * eig.eigenvectors.column(idx);
        let norm = v.norm();
        if norm > 1e-12 {
            modes.set_column(col, &(v / norm));
        }
    }
    let sweep = (0..keep)
        .map(|i| {
            let sd = eigenvalues[i].sqrt();
            (-2..=2)
                .map(|j| &mean + DVector::from(modes.column(i) * (j as f64 * sd)))
                .collect()
        })
        .collect();
    Ok(PcaModes { mean_shape: mean, modes, eigenvalues, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::PointSet;
    use nalgebra::Point3;

    #[test]
    fn rmse_trivial_cases() {
        let x = vec![vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])]];
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        // One entry differing by 2 out of 4 entries: sqrt(4/4) = 1.
        let mut xhat = x.clone();
        xhat[0][1][1] += 2.0;
        assert_eq!(rmse(&x, &xhat).unwrap(), 1.0);
    }

    #[test]
    fn rmse_matches_two_pass_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<DVector<f64>>> {
            (0..3)
                .map(|_| {
                    (0..4).map(|_| DVector::from_fn(5, |_, _| rng.gen::<f64>())).collect()
                })
                .collect()
        };
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let got = rmse(&x, &y).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for n in 0..3 {
            for t in 0..4 {
                for i in 0..5 {
                    sum += (x[n][t][i] - y[n][t][i]).powi(2);
                    count += 1.0;
                }
            }
        }
        assert!((got - (sum / count).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pooling_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Vec<DVector<f64>>> = (0..2)
            .map(|_| (0..3).map(|_| DVector::from_fn(4, |_, _| rng.gen::<f64>())).collect())
            .collect();
        let y: Vec<Vec<DVector<f64>>> = (0..2)
            .map(|_| (0..3).map(|_| DVector::from_fn(4, |_, _| rng.gen::<f64>())).collect())
            .collect();
        let overall = rmse(&x, &y).unwrap();
        let per_t = per_timepoint_rmse(&x, &y, 3);
        // overall^2 equals the count-weighted mean of squared per-t RMSEs.
        let weighted: f64 =
            per_t.iter().map(|r| r.unwrap().powi(2) * 8.0).sum::<f64>() / 24.0;
        assert!((overall.powi(2) - weighted).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_subjects() {
        for folds in [2, 3, 5] {
            let assignment = fold_assignments(11, folds, 77);
            for fold in 0..folds {
                assert!(assignment.iter().any(|&f| f == fold));
            }
            assert_eq!(assignment.len(), 11);
        }
        // Leave-one-out: every subject in its own fold.
        let loo = fold_assignments(6, 6, 1);
        let mut seen: Vec<usize> = loo.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn invalid_fraction_rejected() {
        let ps = PointSet::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let pdm = Cohort::new(vec![vec![ps.clone(); 2]; 4]).unwrap();
        let args = FitArgs { latent_dim: 1, em_iterations: 1, folds: 2 };
        assert!(matches!(
            partial_sequence_reconstruction(&pdm, &[1.5], 1, &args, 0),
            Err(Error::InvalidFraction(_))
        ));
    }

    #[test]
    fn two_shape_pca() {
        let a = PointSet::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]);
        let b = PointSet::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)]);
        let pdm = Cohort::new(vec![vec![a], vec![b]]).unwrap();
        let modes = modes_of_variation(&pdm, 3).unwrap();
        // Exactly one nonzero eigenvalue; mode 1 is the difference direction.
        assert_eq!(modes.eigenvalues.len(), 1);
        assert!(modes.eigenvalues[0] > 0.0);
        let diff = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let cos = modes.modes.column(0).dot(&diff.normalize()).abs();
        assert!(cos > 0.999999);
    }

    #[test]
    fn eigenvalue_sum_equals_total_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shapes: Vec<Vec<PointSet>> = (0..3)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        PointSet::new(
                            (0..4)
                                .map(|_| {
                                    Point3::new(rng.gen(), rng.gen(), rng.gen())
                                })
                                .collect(),
                        )
                    })
                    .collect()
            })
            .collect();
        let pdm = Cohort::new(shapes).unwrap();
        let modes = modes_of_variation(&pdm, 5).unwrap();
        let obs = cohort_observations(&pdm);
        let flat: Vec<&DVector<f64>> = obs.iter().flatten().collect();
        let count = flat.len() as f64;
        let mean = &modes.mean_shape;
        let total: f64 =
            flat.iter().map(|s| (*s - mean).norm_squared()).sum::<f64>() / (count - 1.0);
        let sum: f64 = modes.eigenvalues.iter().sum();
        assert!((total - sum).abs() < 1e-9, "{total} vs {sum}");
    }

    #[test]
    fn specificity_zero_for_replicated_rollout() {
        use crate::lds::LdsParams;
        // Zero-covariance model whose rollout equals a training sequence.
        let t_len = 3;
        let params = LdsParams {
            a: (0..t_len).map(|_| DMatrix::from_element(1, 1, 1.1)).collect(),
            w: (0..t_len).map(|_| DMatrix::from_element(1, 1, 2.0)).collect(),
            state_cov: DMatrix::zeros(1, 1),
            obs_cov_diag: DVector::zeros(1),
            prior_mean: DVector::from_element(1, 0.5),
            prior_cov: DMatrix::zeros(1, 1),
        };
        let rollout: Vec<DVector<f64>> = {
            let mut s = 0.5;
            (0..t_len)
                .map(|t| {
                    if t > 0 {
                        s *= 1.1;
                    }
                    DVector::from_element(1, 2.0 * s)
                })
                .collect()
        };
        let train = vec![rollout];
        let rep = specificity(&params, &train, 5, 3).unwrap();
        assert!(rep.overall_rmse.unwrap() < 1e-12);
    }
}
