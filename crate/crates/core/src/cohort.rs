//! Cohort and point-set types shared by the optimizer and the LDS layer.
//!
//! Coordinates are 3-d throughout. Flattened `3M`-vectors are point-major:
//! `(x, y, z)` of particle 0, then particle 1, and so on. The LDS observation
//! dimension depends on this ordering, so it is fixed here and nowhere else.

use nalgebra::{DVector, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIM: usize = 3;

/// An ordered set of correspondence particles on one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point3<f64>>,
    /// Index of the owning surface domain within the cohort grid, if any.
    pub domain_id: Option<usize>,
}

impl PointSet {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points, domain_id: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.coords.iter().all(|c| c.is_finite()))
    }

    pub fn centroid(&self) -> Point3<f64> {
        let mut sum = Vector3::zeros();
        for p in &self.points {
            sum += p.coords;
        }
        Point3::from(sum / self.points.len() as f64)
    }

    /// Point-major flattening into a `3M`-vector.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = DVector::zeros(DIM * self.points.len());
        for (m, p) in self.points.iter().enumerate() {
            v[DIM * m] = p.x;
            v[DIM * m + 1] = p.y;
            v[DIM * m + 2] = p.z;
        }
        v
    }

    pub fn from_flat(v: &DVector<f64>) -> Result<Self> {
        if v.len() % DIM != 0 {
            return Err(Error::ShapeMismatch(format!(
                "flat vector length {} not divisible by {DIM}",
                v.len()
            )));
        }
        let points = (0..v.len() / DIM)
            .map(|m| Point3::new(v[DIM * m], v[DIM * m + 1], v[DIM * m + 2]))
            .collect();
        Ok(Self { points, domain_id: None })
    }
}

/// Proper rigid motion: rotation (det = +1) followed by translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Frobenius departure from orthonormality, `‖RᵀR − I‖_F`.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        self.orthonormality_residual() <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Maps each point by rotation then translation.
pub fn apply_transform(t: &RigidTransform, p: &PointSet) -> PointSet {
    PointSet {
        points: p.points.iter().map(|q| t.apply_point(q)).collect(),
        domain_id: p.domain_id,
    }
}

/// An N×T grid of shape samples: N subjects, T time points each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    /// Row-major: `shapes[n][t]`.
    pub shapes: Vec<Vec<PointSet>>,
    pub subject_ids: Vec<String>,
    pub time_labels: Vec<String>,
}

impl Cohort {
    pub fn new(shapes: Vec<Vec<PointSet>>) -> Result<Self> {
        if shapes.is_empty() || shapes[0].is_empty() {
            return Err(Error::ShapeMismatch("empty cohort".into()));
        }
        let t_len = shapes[0].len();
        let m = shapes[0][0].len();
        for row in &shapes {
            if row.len() != t_len {
                return Err(Error::ShapeMismatch("ragged time axis".into()));
            }
            for ps in row {
                if ps.len() != m {
                    return Err(Error::ShapeMismatch("particle counts differ across shapes".into()));
                }
                if !ps.is_finite() {
                    return Err(Error::NonFinite("cohort contains non-finite coordinates".into()));
                }
            }
        }
        let subject_ids = (0..shapes.len()).map(|n| format!("subject{n}")).collect();
        let time_labels = (0..t_len).map(|t| format!("time{t}")).collect();
        Ok(Self { shapes, subject_ids, time_labels })
    }

    pub fn n_subjects(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn n_particles(&self) -> usize {
        self.shapes[0][0].len()
    }

    /// Observation dimension of the flattened shapes, `3M`.
    pub fn obs_dim(&self) -> usize {
        DIM * self.n_particles()
    }

    pub fn get(&self, n: usize, t: usize) -> Result<&PointSet> {
        self.shapes
            .get(n)
            .and_then(|row| row.get(t))
            .ok_or_else(|| Error::IndexOutOfRange(format!("(n={n}, t={t})")))
    }
}
