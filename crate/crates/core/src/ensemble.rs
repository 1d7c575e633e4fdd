//! Centered ensemble matrices feeding the entropy objective.
//!
//! An ensemble collects the flattened world-space point sets of either all
//! subjects at a fixed time point (inter-subject) or all time points of a
//! fixed subject (intra-subject), minus their mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleAxis {
    /// Shapes across subjects at a fixed time point t (the variable Z_t).
    InterSubject,
    /// Shapes across time for a fixed subject n (the variable Z_n).
    IntraSubject,
}

#[derive(Debug, Clone)]
pub struct EnsembleMatrix {
    /// dM×K centered data matrix; column j is member j minus the mean.
    pub y: DMatrix<f64>,
    pub axis: EnsembleAxis,
    pub ensemble_mean: DVector<f64>,
}

impl EnsembleMatrix {
    pub fn n_members(&self) -> usize {
        self.y.ncols()
    }

    /// Reconstructs member j by adding the mean back.
    pub fn member(&self, j: usize) -> DVector<f64> {
        DVector::from(self.y.column(j) + &self.ensemble_mean)
    }
}

pub fn build_ensemble(aligned: &Cohort, axis: EnsembleAxis, index: usize) -> Result<EnsembleMatrix> {
    let members: Vec<DVector<f64>> = match axis {
        EnsembleAxis::InterSubject => {
            if index >= aligned.n_timepoints() {
                return Err(Error::IndexOutOfRange(format!(
                    "t={index} out of range for T={}",
                    aligned.n_timepoints()
                )));
            }
            (0..aligned.n_subjects()).map(|n| aligned.shapes[n][index].flatten()).collect()
        }
        EnsembleAxis::IntraSubject => {
            if index >= aligned.n_subjects() {
                return Err(Error::IndexOutOfRange(format!(
                    "n={index} out of range for N={}",
                    aligned.n_subjects()
                )));
            }
            aligned.shapes[index].iter().map(|ps| ps.flatten()).collect()
        }
    };
    let k = members.len();
    let dim = members[0].len();
    let mut mean = DVector::zeros(dim);
    for m in &members {
        mean += m;
    }
    mean /= k as f64;
    let mut y = DMatrix::zeros(dim, k);
    for (j, m) in members.iter().enumerate() {
        y.set_column(j, &(m - &mean));
    }
    Ok(EnsembleMatrix { y, axis, ensemble_mean: mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::PointSet;
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cohort(n: usize, t: usize, m: usize, seed: u64) -> Cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| {
                        PointSet::new(
                            (0..m)
                                .map(|_| {
                                    Point3::new(
                                        rng.gen::<f64>(),
                                        rng.gen::<f64>(),
                                        rng.gen::<f64>(),
                                    )
                                })
                                .collect(),
                        )
                    })
                    .collect()
            })
            .collect();
        Cohort::new(shapes).unwrap()
    }

    #[test]
    fn identical_shapes_give_zero_matrix() {
        let ps = PointSet::new(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(0.0, 1.0, 0.0)]);
        let cohort =
            Cohort::new(vec![vec![ps.clone(); 2], vec![ps.clone(); 2], vec![ps; 2]]).unwrap();
        let em = build_ensemble(&cohort, EnsembleAxis::InterSubject, 1).unwrap();
        assert_eq!(em.y.ncols(), 3);
        assert!(em.y.norm() < 1e-14);
    }

    #[test]
    fn two_member_columns_are_negatives() {
        let p = PointSet::new(vec![Point3::new(1.0, 0.0, 0.0)]);
        let q = PointSet::new(vec![Point3::new(3.0, 2.0, -1.0)]);
        let cohort = Cohort::new(vec![vec![p, q]]).unwrap();
        let em = build_ensemble(&cohort, EnsembleAxis::IntraSubject, 0).unwrap();
        assert_eq!(em.y.ncols(), 2);
        let sum = em.y.column(0) + em.y.column(1);
        assert!(sum.norm() < 1e-14);
    }

    #[test]
    fn columns_center_to_zero_and_members_reconstruct() {
        let cohort = random_cohort(2, 3, 5, 7);
        for t in 0..3 {
            let em = build_ensemble(&cohort, EnsembleAxis::InterSubject, t).unwrap();
            let mut rowsum = DVector::zeros(em.y.nrows());
            for j in 0..em.y.ncols() {
                rowsum += em.y.column(j);
            }
            assert!(rowsum.amax() < 1e-12);
            for (n, _) in cohort.shapes.iter().enumerate() {
                let rebuilt = em.member(n);
                let orig = cohort.shapes[n][t].flatten();
                assert!((rebuilt - orig).amax() < 1e-12);
            }
        }
        for n in 0..2 {
            let em = build_ensemble(&cohort, EnsembleAxis::IntraSubject, n).unwrap();
            assert_eq!(em.n_members(), 3);
        }
    }

    #[test]
    fn out_of_range_index_rejected() {
        let cohort = random_cohort(2, 3, 4, 1);
        assert!(matches!(
            build_ensemble(&cohort, EnsembleAxis::InterSubject, 3),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            build_ensemble(&cohort, EnsembleAxis::IntraSubject, 2),
            Err(Error::IndexOutOfRange(_))
        ));
    }
}
