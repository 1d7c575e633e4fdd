//! Generalized Procrustes alignment: iterative rigid registration of every
//! shape in a cohort to the evolving mean shape. No scaling by default so
//! anatomical size and chirality are preserved; a similarity variant is
//! available behind an option.

use nalgebra::{Matrix3, Point3, Vector3, SVD};
use rayon::prelude::*;

use crate::cohort::{apply_transform, Cohort, PointSet, RigidTransform};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ProcrustesOptions {
    pub max_iters: usize,
    /// Frobenius tolerance on mean-shape change.
    pub tol: f64,
    /// Similarity (rotation + translation + isotropic scale) instead of rigid.
    pub with_scaling: bool,
}

impl Default for ProcrustesOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-8, with_scaling: false }
    }
}

#[derive(Debug, Clone)]
pub struct ProcrustesResult {
    /// Row-major N×T grid of configuration-to-world transforms.
    pub transforms: Vec<Vec<RigidTransform>>,
    pub aligned: Cohort,
    pub converged: bool,
    pub iterations: usize,
}

/// Optimal proper rigid motion mapping `source` onto `target` in the
/// least-squares sense (orthogonal Procrustes with determinant correction).
pub fn fit_rigid(source: &PointSet, target: &PointSet) -> Result<RigidTransform> {
    fit_similarity(source, target, false)
}

fn fit_similarity(source: &PointSet, target: &PointSet, with_scaling: bool) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch("point counts differ".into()));
    }
    let sc = source.centroid();
    let tc = target.centroid();
    let mut cross = Matrix3::zeros();
    let mut source_var = 0.0;
    for (p, q) in source.points.iter().zip(target.points.iter()) {
        let dp = p - sc;
        let dq = q - tc;
        cross += dq * dp.transpose();
        source_var += dp.norm_squared();
    }
    if source_var < 1e-24 {
        return Err(Error::DegenerateShape("all points coincident".into()));
    }
    let svd = SVD::new(cross, true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateShape("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateShape("svd failed".into()))?;
    let det = (u * v_t).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rotation = u * correction * v_t;
    let scale = if with_scaling {
        // Trace of the corrected singular values over the source variance.
        let s = svd.singular_values;
        (s[0] + s[1] + det.signum() * s[2]) / source_var
    } else {
        1.0
    };
    let rotation = rotation * scale;
    let translation = tc.coords - rotation * sc.coords;
    Ok(RigidTransform { rotation, translation })
}

fn mean_shape(shapes: &[PointSet]) -> PointSet {
    let m = shapes[0].len();
    let mut points = vec![Point3::origin(); m];
    for ps in shapes {
        for (acc, p) in points.iter_mut().zip(ps.points.iter()) {
            acc.coords += p.coords;
        }
    }
    let k = shapes.len() as f64;
    for p in &mut points {
        p.coords /= k;
    }
    PointSet::new(points)
}

fn center_at_origin(ps: &mut PointSet) {
    let c = ps.centroid();
    for p in &mut ps.points {
        p.coords -= c.coords;
    }
}

pub fn procrustes_align(cohort: &Cohort, max_iters: usize, tol: f64) -> Result<ProcrustesResult> {
    procrustes_align_with(cohort, &ProcrustesOptions { max_iters, tol, ..Default::default() })
}

pub fn procrustes_align_with(cohort: &Cohort, opts: &ProcrustesOptions) -> Result<ProcrustesResult> {
    let n = cohort.n_subjects();
    let t_len = cohort.n_timepoints();
    let flat: Vec<&PointSet> =
        cohort.shapes.iter().flat_map(|row| row.iter()).collect();

    // Initial reference: the first shape, centered.
    let mut reference = flat[0].clone();
    center_at_origin(&mut reference);

    let mut transforms: Vec<RigidTransform> = vec![RigidTransform::identity(); flat.len()];
    let mut aligned: Vec<PointSet> = flat.iter().map(|&ps| ps.clone()).collect();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let fits: Vec<Result<(RigidTransform, PointSet)>> = flat
            .par_iter()
            .map(|&ps| {
                let t = fit_similarity(ps, &reference, opts.with_scaling)?;
                Ok((t.clone(), apply_transform(&t, ps)))
            })
            .collect();
        for (i, fit) in fits.into_iter().enumerate() {
            let (t, moved) = fit?;
            transforms[i] = t;
            aligned[i] = moved;
        }
        let mut new_ref = mean_shape(&aligned);
        center_at_origin(&mut new_ref);
        let change = (new_ref.flatten() - reference.flatten()).norm();
        reference = new_ref;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let shapes: Vec<Vec<PointSet>> = (0..n)
        .map(|i| (0..t_len).map(|j| aligned[i * t_len + j].clone()).collect())
        .collect();
    let grid: Vec<Vec<RigidTransform>> = (0..n)
        .map(|i| (0..t_len).map(|j| transforms[i * t_len + j].clone()).collect())
        .collect();
    let mut out = Cohort::new(shapes)?;
    out.subject_ids = cohort.subject_ids.clone();
    out.time_labels = cohort.time_labels.clone();
    Ok(ProcrustesResult { transforms: grid, aligned: out, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::DIM;
    use nalgebra::Matrix3;
    use std::f64::consts::FRAC_PI_2;

    fn rot_z(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn tetra() -> PointSet {
        PointSet::new(vec![
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, -1.0, -1.0),
            Point3::new(-1.0, 1.0, -1.0),
            Point3::new(-1.0, -1.0, 1.0),
        ])
    }

    #[test]
    fn identical_shapes_align_to_identity_rotation() {
        let mut ps = tetra();
        for p in &mut ps.points {
            p.coords += Vector3::new(2.0, 0.0, -1.0);
        }
        let cohort = Cohort::new(vec![vec![ps.clone()], vec![ps.clone()], vec![ps]]).unwrap();
        let res = procrustes_align(&cohort, 100, 1e-10).unwrap();
        for row in &res.transforms {
            for t in row {
                assert!((t.rotation - Matrix3::identity()).norm() < 1e-8);
            }
        }
        // Aligned sets identical across the cohort and centered.
        let a = res.aligned.shapes[0][0].flatten();
        let b = res.aligned.shapes[2][0].flatten();
        assert!((a - b).norm() < 1e-10);
        let c = res.aligned.shapes[0][0].centroid();
        assert!(c.coords.norm() < 1e-10);
    }

    #[test]
    fn recovers_known_rotation() {
        let base = tetra();
        let rot = RigidTransform { rotation: rot_z(FRAC_PI_2), translation: Vector3::zeros() };
        let rotated = apply_transform(&rot, &base);
        let cohort = Cohort::new(vec![vec![base], vec![rotated]]).unwrap();
        let res = procrustes_align(&cohort, 200, 1e-12).unwrap();
        // Relative rotation between the two recovered transforms is the known 90°.
        let rel = res.transforms[1][0].rotation.transpose() * res.transforms[0][0].rotation;
        assert!((rel - rot_z(FRAC_PI_2)).norm() < 1e-8 || (rel - rot_z(-FRAC_PI_2)).norm() < 1e-8);
    }

    #[test]
    fn mirror_image_gets_best_proper_rotation() {
        // 3-point shape and its mirror. Brute-force over z-rotations of the
        // mirrored shape is the oracle for the best det=+1 fit.
        let base = PointSet::new(vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
        ]);
        let mirrored = PointSet::new(
            base.points.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect(),
        );
        let fit = fit_rigid(&mirrored, &base).unwrap();
        assert!(fit.is_proper(1e-9));
        let cost = |r: &Matrix3<f64>| -> f64 {
            let sc = mirrored.centroid();
            let tc = base.centroid();
            mirrored
                .points
                .iter()
                .zip(base.points.iter())
                .map(|(p, q)| ((r * (p - sc)) - (q - tc)).norm_squared())
                .sum()
        };
        let fitted_cost = cost(&fit.rotation);
        // Dense search over rotations about all three axes (the optimum for
        // planar shapes lies in this family).
        let mut best = f64::INFINITY;
        for axis in 0..3 {
            for k in 0..3600 {
                let a = k as f64 * std::f64::consts::TAU / 3600.0;
                let (s, c) = a.sin_cos();
                let r = match axis {
                    0 => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
                    1 => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
                    _ => rot_z(a),
                };
                best = best.min(cost(&r));
            }
        }
        assert!(fitted_cost <= best + 1e-6);
    }

    #[test]
    fn degenerate_shape_is_rejected() {
        let ps = PointSet::new(vec![Point3::new(1.0, 1.0, 1.0); 4]);
        let err = fit_rigid(&ps, &ps).unwrap_err();
        assert!(matches!(err, Error::DegenerateShape(_)));
    }

    #[test]
    fn alignment_is_rigid_and_idempotent() {
        let base = tetra();
        let rot = RigidTransform {
            rotation: rot_z(0.4),
            translation: Vector3::new(1.0, -2.0, 0.5),
        };
        let cohort =
            Cohort::new(vec![vec![base.clone()], vec![apply_transform(&rot, &base)]]).unwrap();
        let res = procrustes_align(&cohort, 100, 1e-10).unwrap();
        // Rigid: pairwise distances preserved.
        for (n, row) in res.aligned.shapes.iter().enumerate() {
            let orig = &cohort.shapes[n][0];
            let out = &row[0];
            for i in 0..orig.len() {
                for j in (i + 1)..orig.len() {
                    let d0 = (orig.points[i] - orig.points[j]).norm();
                    let d1 = (out.points[i] - out.points[j]).norm();
                    assert!((d0 - d1).abs() / d0 < 1e-9);
                }
            }
        }
        // Idempotent: realigning the output gives near-identity transforms.
        let again = procrustes_align(&res.aligned, 100, 1e-10).unwrap();
        for row in &again.transforms {
            for t in row {
                assert!((t.rotation - Matrix3::identity()).norm() < 1e-8);
                assert!(t.translation.norm() < 1e-8);
            }
        }
    }

    #[test]
    fn procrustes_objective_nonincreasing() {
        // Run with increasing iteration caps and check the objective trend.
        let base = tetra();
        let mut shapes = Vec::new();
        for k in 0..4 {
            let rot = RigidTransform {
                rotation: rot_z(0.3 * k as f64),
                translation: Vector3::new(k as f64, -(k as f64), 0.2),
            };
            let mut moved = apply_transform(&rot, &base);
            // Perturb so the mean actually evolves.
            moved.points[0].coords += Vector3::new(0.05 * k as f64, 0.0, 0.0);
            shapes.push(vec![moved]);
        }
        let cohort = Cohort::new(shapes).unwrap();
        let objective = |c: &Cohort| -> f64 {
            let all: Vec<&PointSet> = c.shapes.iter().flat_map(|r| r.iter()).collect();
            let m = mean_shape(&all.iter().map(|&p| p.clone()).collect::<Vec<_>>());
            all.iter().map(|ps| (ps.flatten() - m.flatten()).norm_squared()).sum()
        };
        let mut prev = f64::INFINITY;
        for iters in 1..8 {
            let res = procrustes_align(&cohort, iters, 0.0).unwrap();
            let obj = objective(&res.aligned);
            assert!(obj <= prev + 1e-9);
            prev = obj;
        }
    }

    #[test]
    fn flatten_dim_matches() {
        let base = tetra();
        assert_eq!(base.flatten().len(), DIM * 4);
    }
}
