//! Surface domains as signed-distance fields, particle-to-surface projection,
//! and the synthetic ellipsoid cohort generator used for verification.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PointSet};
use crate::error::{Error, Result};

/// Fraction of the bounding-box diagonal used as the default surface tolerance.
pub const DEFAULT_SURFACE_TOL_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridVolume {
    pub dims: [usize; 3],
    pub spacing: Vector3<f64>,
    pub origin: Point3<f64>,
    /// Signed-distance samples, x fastest, then y, then z.
    pub values: Vec<f32>,
}

impl GridVolume {
    fn index(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.dims[1] + j) * self.dims[0] + i] as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainKind {
    Ellipsoid { center: Point3<f64>, radii: Vector3<f64> },
    Grid(GridVolume),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeDomain {
    pub kind: DomainKind,
    pub surface_tol: f64,
}

impl ShapeDomain {
    pub fn ellipsoid(center: Point3<f64>, radii: Vector3<f64>) -> Self {
        let kind = DomainKind::Ellipsoid { center, radii };
        let surface_tol = DEFAULT_SURFACE_TOL_FRACTION * bbox_diagonal(&kind);
        Self { kind, surface_tol }
    }

    pub fn sphere(center: Point3<f64>, radius: f64) -> Self {
        Self::ellipsoid(center, Vector3::new(radius, radius, radius))
    }

    pub fn from_grid(volume: GridVolume) -> Self {
        let kind = DomainKind::Grid(volume);
        let surface_tol = DEFAULT_SURFACE_TOL_FRACTION * bbox_diagonal(&kind);
        Self { kind, surface_tol }
    }

    /// Samples `source` on a regular grid covering `lo..hi`.
    pub fn sample_to_grid(
        source: &ShapeDomain,
        lo: Point3<f64>,
        hi: Point3<f64>,
        spacing: f64,
    ) -> Result<Self> {
        let dims = [
            ((hi.x - lo.x) / spacing).ceil() as usize + 1,
            ((hi.y - lo.y) / spacing).ceil() as usize + 1,
            ((hi.z - lo.z) / spacing).ceil() as usize + 1,
        ];
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = Point3::new(
                        lo.x + i as f64 * spacing,
                        lo.y + j as f64 * spacing,
                        lo.z + k as f64 * spacing,
                    );
                    let (v, _) = sdf_eval(source, &p)?;
                    values.push(v as f32);
                }
            }
        }
        Ok(Self::from_grid(GridVolume {
            dims,
            spacing: Vector3::new(spacing, spacing, spacing),
            origin: lo,
            values,
        }))
    }

    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        bounding_box(&self.kind)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.kind)
    }

    /// A point strictly inside the domain, used to seed particle placement.
    pub fn interior_reference(&self) -> Point3<f64> {
        match &self.kind {
            DomainKind::Ellipsoid { center, .. } => *center,
            DomainKind::Grid(_) => {
                let (lo, hi) = self.bounding_box();
                Point3::from((lo.coords + hi.coords) / 2.0)
            }
        }
    }
}

fn bounding_box(kind: &DomainKind) -> (Point3<f64>, Point3<f64>) {
    match kind {
        DomainKind::Ellipsoid { center, radii } => {
            let r = radii.max();
            let pad = Vector3::new(3.0 * r, 3.0 * r, 3.0 * r);
            (Point3::from(center.coords - pad), Point3::from(center.coords + pad))
        }
        DomainKind::Grid(g) => {
            let extent = Vector3::new(
                g.spacing.x * (g.dims[0] - 1) as f64,
                g.spacing.y * (g.dims[1] - 1) as f64,
                g.spacing.z * (g.dims[2] - 1) as f64,
            );
            (g.origin, Point3::from(g.origin.coords + extent))
        }
    }
}

fn bbox_diagonal(kind: &DomainKind) -> f64 {
    let (lo, hi) = bounding_box(kind);
    (hi - lo).norm()
}

fn in_box(p: &Point3<f64>, lo: &Point3<f64>, hi: &Point3<f64>) -> bool {
    (0..3).all(|i| p.coords[i] >= lo.coords[i] && p.coords[i] <= hi.coords[i])
}

/// Signed distance (negative inside) and its spatial gradient.
///
/// Ellipsoids use the analytic normal direction with a bounded Newton
/// correction so the returned value is a distance, not a raw implicit value.
pub fn sdf_eval(domain: &ShapeDomain, p: &Point3<f64>) -> Result<(f64, Vector3<f64>)> {
    let (lo, hi) = domain.bounding_box();
    if !in_box(p, &lo, &hi) {
        return Err(Error::OutOfBounds(p.x, p.y, p.z));
    }
    match &domain.kind {
        DomainKind::Ellipsoid { center, radii } => Ok(ellipsoid_sdf(center, radii, p)),
        DomainKind::Grid(g) => grid_sdf(g, p),
    }
}

fn ellipsoid_implicit(center: &Point3<f64>, radii: &Vector3<f64>, p: &Point3<f64>) -> (f64, Vector3<f64>) {
    let d = p - center;
    let scaled = Vector3::new(d.x / radii.x, d.y / radii.y, d.z / radii.z);
    let s = scaled.norm();
    let value = s - 1.0;
    let grad = if s > 1e-12 {
        Vector3::new(
            d.x / (radii.x * radii.x),
            d.y / (radii.y * radii.y),
            d.z / (radii.z * radii.z),
        ) / s
    } else {
        Vector3::zeros()
    };
    (value, grad)
}

fn ellipsoid_sdf(center: &Point3<f64>, radii: &Vector3<f64>, p: &Point3<f64>) -> (f64, Vector3<f64>) {
    let (g0, grad0) = ellipsoid_implicit(center, radii, p);
    if grad0.norm() < 1e-12 {
        // At the center the nearest surface point lies along the smallest axis.
        return (-radii.min(), Vector3::x());
    }
    // Newton-march the implicit to a nearby surface point.
    let mut q = *p;
    for _ in 0..12 {
        let (g, grad) = ellipsoid_implicit(center, radii, &q);
        let gn2 = grad.norm_squared();
        if gn2 < 1e-18 || g.abs() < 1e-14 {
            break;
        }
        q -= grad * (g / gn2);
    }
    let dist = (p - q).norm();
    let (_, normal_raw) = ellipsoid_implicit(center, radii, &q);
    let normal = normal_raw.normalize();
    (g0.signum() * dist, normal)
}

fn grid_sdf(g: &GridVolume, p: &Point3<f64>) -> Result<(f64, Vector3<f64>)> {
    let local = p - g.origin;
    let fx = (local.x / g.spacing.x).clamp(0.0, (g.dims[0] - 1) as f64);
    let fy = (local.y / g.spacing.y).clamp(0.0, (g.dims[1] - 1) as f64);
    let fz = (local.z / g.spacing.z).clamp(0.0, (g.dims[2] - 1) as f64);
    let i = (fx.floor() as usize).min(g.dims[0] - 2);
    let j = (fy.floor() as usize).min(g.dims[1] - 2);
    let k = (fz.floor() as usize).min(g.dims[2] - 2);
    let tx = fx - i as f64;
    let ty = fy - j as f64;
    let tz = fz - k as f64;

    let c = |di: usize, dj: usize, dk: usize| g.index(i + di, j + dj, k + dk);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;

    let v00 = lerp(c(0, 0, 0), c(1, 0, 0), tx);
    let v10 = lerp(c(0, 1, 0), c(1, 1, 0), tx);
    let v01 = lerp(c(0, 0, 1), c(1, 0, 1), tx);
    let v11 = lerp(c(0, 1, 1), c(1, 1, 1), tx);
    let v0 = lerp(v00, v10, ty);
    let v1 = lerp(v01, v11, ty);
    let value = lerp(v0, v1, tz);

    // Analytic trilinear gradient.
    let dx0 = lerp(c(1, 0, 0) - c(0, 0, 0), c(1, 1, 0) - c(0, 1, 0), ty);
    let dx1 = lerp(c(1, 0, 1) - c(0, 0, 1), c(1, 1, 1) - c(0, 1, 1), ty);
    let dx = lerp(dx0, dx1, tz) / g.spacing.x;
    let dy = lerp(v10 - v00, v11 - v01, tz) / g.spacing.y;
    let dz = (v1 - v0) / g.spacing.z;

    if !value.is_finite() {
        return Err(Error::NonFinite("grid sdf sample".into()));
    }
    Ok((value, Vector3::new(dx, dy, dz)))
}

/// Newton projection of `p` onto the zero level set.
pub fn project_to_surface(domain: &ShapeDomain, p: &Point3<f64>, max_steps: usize) -> Result<Point3<f64>> {
    let mut q = *p;
    let mut residual = f64::INFINITY;
    for _ in 0..max_steps {
        let (v, g) = sdf_eval(domain, &q)?;
        residual = v.abs();
        if residual <= domain.surface_tol {
            return Ok(q);
        }
        let gn2 = g.norm_squared();
        if gn2 < 1e-18 {
            return Err(Error::ProjectionFailure { steps: max_steps, residual });
        }
        q -= g * (v / gn2);
    }
    let (v, _) = sdf_eval(domain, &q)?;
    if v.abs() <= domain.surface_tol {
        return Ok(q);
    }
    Err(Error::ProjectionFailure { steps: max_steps, residual })
}

/// Deterministic quasi-uniform sample of the unit sphere (Fibonacci lattice).
pub fn unit_sphere_sample(m: usize) -> Vec<Vector3<f64>> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (0..m)
        .map(|i| {
            let z = if m == 1 { 0.0 } else { 1.0 - 2.0 * (i as f64 + 0.5) / m as f64 };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = std::f64::consts::TAU * (i as f64 / golden).fract();
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Synthetic cohort: per-subject ellipsoid radii drawn from a Gaussian,
/// modulated by one full sinusoidal period over the T frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_timepoints: usize,
    /// Number of ground-truth correspondence points per shape.
    pub n_truth_points: usize,
    pub radii_mean: [f64; 3],
    pub radii_stdev: [f64; 3],
    /// Per-axis relative amplitude of the temporal sinusoid.
    pub modulation_amplitude: [f64; 3],
    pub modulation_phase: [f64; 3],
    /// Stdev of additive per-(n,t)-axis radius jitter, world units.
    pub noise_stdev: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_timepoints == 0 || self.n_truth_points == 0 {
            return Err(Error::InvalidSpec("counts must be positive".into()));
        }
        for i in 0..3 {
            if self.radii_mean[i] <= 0.0 {
                return Err(Error::InvalidSpec(format!("radii_mean[{i}] must be positive")));
            }
            if self.radii_stdev[i] < 0.0 || self.noise_stdev < 0.0 {
                return Err(Error::InvalidSpec("stdevs must be nonnegative".into()));
            }
            if self.modulation_amplitude[i].abs() >= 1.0 {
                return Err(Error::InvalidSpec(
                    "modulation amplitude must keep radii positive (|a| < 1)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Radii of subject `n` (base) at time `t`, before jitter.
    pub fn modulated_radii(&self, base: &Vector3<f64>, t: usize) -> Vector3<f64> {
        let phase = std::f64::consts::TAU * t as f64 / self.n_timepoints as f64;
        Vector3::new(
            base.x * (1.0 + self.modulation_amplitude[0] * (phase + self.modulation_phase[0]).sin()),
            base.y * (1.0 + self.modulation_amplitude[1] * (phase + self.modulation_phase[1]).sin()),
            base.z * (1.0 + self.modulation_amplitude[2] * (phase + self.modulation_phase[2]).sin()),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    /// N×T grid of surface domains.
    pub domains: Vec<Vec<ShapeDomain>>,
    /// Ground-truth corresponding points on each domain.
    pub truth: Cohort,
    /// Per-subject base radii actually drawn.
    pub base_radii: Vec<Vector3<f64>>,
}

pub fn generate_synthetic_cohort(spec: &SynthSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sample = unit_sphere_sample(spec.n_truth_points);

    let mut base_radii = Vec::with_capacity(spec.n_subjects);
    for _ in 0..spec.n_subjects {
        // Rejection-resample until all radii stay positive at every frame.
        let radii = loop {
            let mut r = Vector3::zeros();
            for i in 0..3 {
                let dist = Normal::new(spec.radii_mean[i], spec.radii_stdev[i])
                    .map_err(|e| Error::InvalidSpec(e.to_string()))?;
                r[i] = dist.sample(&mut rng);
            }
            let all_positive = (0..spec.n_timepoints)
                .all(|t| spec.modulated_radii(&r, t).min() > 0.0);
            if all_positive {
                break r;
            }
        };
        base_radii.push(radii);
    }

    let noise = Normal::new(0.0, spec.noise_stdev.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut domains = Vec::with_capacity(spec.n_subjects);
    let mut truth_rows = Vec::with_capacity(spec.n_subjects);
    for base in &base_radii {
        let mut row_domains = Vec::with_capacity(spec.n_timepoints);
        let mut row_truth = Vec::with_capacity(spec.n_timepoints);
        for t in 0..spec.n_timepoints {
            let radii = loop {
                let mut r = spec.modulated_radii(base, t);
                if spec.noise_stdev > 0.0 {
                    for i in 0..3 {
                        r[i] += noise.sample(&mut rng);
                    }
                }
                if r.min() > 0.0 {
                    break r;
                }
            };
            let points = sample
                .iter()
                .map(|u| Point3::new(radii.x * u.x, radii.y * u.y, radii.z * u.z))
                .collect();
            let mut ps = PointSet::new(points);
            ps.domain_id = Some(row_domains.len());
            row_domains.push(ShapeDomain::ellipsoid(Point3::origin(), radii));
            row_truth.push(ps);
        }
        domains.push(row_domains);
        truth_rows.push(row_truth);
    }
    let truth = Cohort::new(truth_rows)?;
    Ok(SyntheticCohort { domains, truth, base_radii })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_sphere_outside_point() {
        let dom = ShapeDomain::sphere(Point3::origin(), 1.0);
        let (v, g) = sdf_eval(&dom, &Point3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-10);
        assert_relative_eq!(g.x, 1.0, epsilon = 1e-10);
        assert!(g.y.abs() < 1e-10 && g.z.abs() < 1e-10);
    }

    #[test]
    fn unit_sphere_center() {
        let dom = ShapeDomain::sphere(Point3::origin(), 1.0);
        let (v, _) = sdf_eval(&dom, &Point3::origin()).unwrap();
        assert_relative_eq!(v, -1.0, epsilon = 1e-10);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let dom = ShapeDomain::sphere(Point3::origin(), 1.0);
        assert!(matches!(
            sdf_eval(&dom, &Point3::new(100.0, 0.0, 0.0)),
            Err(Error::OutOfBounds(..))
        ));
    }

    #[test]
    fn grid_matches_analytic_sphere() {
        let sphere = ShapeDomain::sphere(Point3::origin(), 1.0);
        let grid = ShapeDomain::sample_to_grid(
            &sphere,
            Point3::new(-2.0, -2.0, -2.0),
            Point3::new(2.0, 2.0, 2.0),
            0.05,
        )
        .unwrap();
        let (v, _) = sdf_eval(&grid, &Point3::new(1.5, 0.0, 0.0)).unwrap();
        assert!((v - 0.5).abs() < 0.01);
        // Agreement within 2x voxel spacing across the interior.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Point3::new(
                rng.gen_range(-1.8..1.8),
                rng.gen_range(-1.8..1.8),
                rng.gen_range(-1.8..1.8),
            );
            let (va, _) = sdf_eval(&sphere, &p).unwrap();
            let (vg, _) = sdf_eval(&grid, &p).unwrap();
            assert!((va - vg).abs() < 0.1, "sdf mismatch at {p:?}: {va} vs {vg}");
        }
    }

    #[test]
    fn projection_on_sphere() {
        let dom = ShapeDomain::sphere(Point3::origin(), 1.0);
        let q = project_to_surface(&dom, &Point3::new(2.0, 0.0, 0.0), 50).unwrap();
        assert!((q - Point3::new(1.0, 0.0, 0.0)).norm() < 1e-6);
        // Fixed point: on-surface input stays put.
        let r = project_to_surface(&dom, &q, 50).unwrap();
        assert!((r - q).norm() <= dom.surface_tol);
    }

    #[test]
    fn projection_on_ellipsoid_matches_brute_force() {
        let dom = ShapeDomain::ellipsoid(Point3::origin(), Vector3::new(2.0, 1.0, 1.0));
        let p = Point3::new(0.0, 3.0, 0.0);
        let q = project_to_surface(&dom, &p, 100).unwrap();
        let (v, _) = sdf_eval(&dom, &q).unwrap();
        assert!(v.abs() <= 1e-6 || v.abs() <= dom.surface_tol);
        // Brute force: dense surface sampling for the nearest point.
        let mut best = f64::INFINITY;
        let mut best_q = Point3::origin();
        for i in 0..400 {
            for j in 0..200 {
                let theta = std::f64::consts::TAU * i as f64 / 400.0;
                let phi = std::f64::consts::PI * j as f64 / 199.0;
                let s = Point3::new(
                    2.0 * phi.sin() * theta.cos(),
                    1.0 * phi.sin() * theta.sin(),
                    1.0 * phi.cos(),
                );
                let d = (s - p).norm();
                if d < best {
                    best = d;
                    best_q = s;
                }
            }
        }
        assert!((q - best_q).norm() < 0.05, "{q:?} vs brute-force {best_q:?}");
    }

    #[test]
    fn projection_idempotent_at_radius() {
        let dom = ShapeDomain::sphere(Point3::origin(), 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            if (p - Point3::origin()).norm() < 1e-3 {
                continue;
            }
            let q = project_to_surface(&dom, &p, 100).unwrap();
            assert!(((q - Point3::origin()).norm() - 1.5).abs() < 1e-6);
            let q2 = project_to_surface(&dom, &q, 100).unwrap();
            assert!((q2 - q).norm() <= dom.surface_tol);
        }
    }

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_subjects: 2,
            n_timepoints: 4,
            n_truth_points: 16,
            radii_mean: [1.5, 1.0, 0.8],
            radii_stdev: [0.1, 0.05, 0.05],
            modulation_amplitude: [0.2, 0.0, 0.0],
            modulation_phase: [0.0, 0.0, 0.0],
            noise_stdev: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn static_spec_gives_constant_sequences() {
        let mut spec = small_spec();
        spec.modulation_amplitude = [0.0, 0.0, 0.0];
        let out = generate_synthetic_cohort(&spec).unwrap();
        for n in 0..spec.n_subjects {
            let first = out.truth.shapes[n][0].flatten();
            for t in 1..spec.n_timepoints {
                assert!((out.truth.shapes[n][t].flatten() - &first).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic_cohort(&spec).unwrap();
        let b = generate_synthetic_cohort(&spec).unwrap();
        for n in 0..spec.n_subjects {
            for t in 0..spec.n_timepoints {
                assert_eq!(a.truth.shapes[n][t].points, b.truth.shapes[n][t].points);
            }
        }
    }

    #[test]
    fn trajectory_matches_closed_form() {
        let mut spec = small_spec();
        spec.radii_stdev = [0.0, 0.0, 0.0];
        let out = generate_synthetic_cohort(&spec).unwrap();
        let sample = unit_sphere_sample(spec.n_truth_points);
        for t in 0..spec.n_timepoints {
            let r1 = spec.radii_mean[0]
                * (1.0 + 0.2 * (std::f64::consts::TAU * t as f64 / spec.n_timepoints as f64).sin());
            for (m, u) in sample.iter().enumerate() {
                let p = out.truth.shapes[0][t].points[m];
                assert_relative_eq!(p.x, r1 * u.x, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn truth_points_lie_on_their_domains() {
        let spec = small_spec();
        let out = generate_synthetic_cohort(&spec).unwrap();
        for n in 0..spec.n_subjects {
            for t in 0..spec.n_timepoints {
                let dom = &out.domains[n][t];
                for p in &out.truth.shapes[n][t].points {
                    let (v, _) = sdf_eval(dom, p).unwrap();
                    assert!(v.abs() <= 1e-9, "|sdf| = {}", v.abs());
                }
            }
        }
    }
}
