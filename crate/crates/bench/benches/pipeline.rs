//! Benchmarks for the hot paths of the pipeline: the correspondence
//! gradient, one Kalman filter pass, Procrustes alignment, and the sampling
//! repulsion sweep.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stssm_core::lds::{kalman_filter, LdsParams, ObservationMask};
use stssm_core::procrustes::procrustes_align;
use stssm_core::psm::{correspondence_gradient, sampling_gradient, OptimizerConfig};
use stssm_core::surfaces::ShapeDomain;
use stssm_core::{build_ensemble, Cohort, EnsembleAxis, PointSet};

fn random_cohort(n: usize, t: usize, m: usize, seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            (0..t)
                .map(|ti| {
                    let points = (0..m)
                        .map(|_| {
                            Point3::new(
                                rng.gen::<f64>() * 10.0,
                                rng.gen::<f64>() * 10.0,
                                rng.gen::<f64>() * 10.0,
                            )
                        })
                        .collect();
                    let mut ps = PointSet::new(points);
                    ps.domain_id = Some(ti);
                    ps
                })
                .collect()
        })
        .collect();
    Cohort::new(rows).unwrap()
}

fn bench_correspondence_gradient(c: &mut Criterion) {
    let cohort = random_cohort(10, 1, 256, 1);
    let ensemble = build_ensemble(&cohort, EnsembleAxis::InterSubject, 0).unwrap();
    c.bench_function("correspondence_gradient_256p_10s", |b| {
        b.iter(|| correspondence_gradient(std::hint::black_box(&ensemble), 0.1))
    });
}

fn bench_kalman_filter(c: &mut Criterion) {
    let (n, t, l, d) = (8usize, 10usize, 16usize, 48usize);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = LdsParams {
        a: (0..t).map(|_| DMatrix::identity(l, l)).collect(),
        w: (0..t)
            .map(|_| DMatrix::from_fn(d, l, |_, _| rng.gen::<f64>() - 0.5))
            .collect(),
        state_cov: DMatrix::identity(l, l) * 0.1,
        obs_cov_diag: DVector::from_element(d, 0.05),
        prior_mean: DVector::zeros(l),
        prior_cov: DMatrix::identity(l, l),
    };
    let obs: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|_| (0..t).map(|_| DVector::from_fn(d, |_, _| rng.gen::<f64>())).collect())
        .collect();
    let mask = ObservationMask::all_observed(n, t);
    c.bench_function("kalman_filter_8x10_l16_d48", |b| {
        b.iter(|| kalman_filter(std::hint::black_box(&params), &obs, &mask).unwrap())
    });
}

fn bench_procrustes(c: &mut Criterion) {
    let cohort = random_cohort(8, 4, 128, 3);
    c.bench_function("procrustes_align_32_shapes_128p", |b| {
        b.iter(|| procrustes_align(std::hint::black_box(&cohort), 50, 1e-8).unwrap())
    });
}

fn bench_sampling_gradient(c: &mut Criterion) {
    let cohort = random_cohort(1, 1, 256, 4);
    let shape = &cohort.shapes[0][0];
    let domain = ShapeDomain::ellipsoid(Point3::origin(), Vector3::new(12.0, 10.0, 8.0));
    let config = OptimizerConfig::default();
    c.bench_function("sampling_gradient_256p", |b| {
        b.iter(|| {
            sampling_gradient(std::hint::black_box(shape), Some(&domain), &config).unwrap()
        })
    });
}

fn all(c: &mut Criterion) {
    bench_correspondence_gradient(c);
    bench_kalman_filter(c);
    bench_procrustes(c);
    bench_sampling_gradient(c);
}

criterion_group!(benches, all);
criterion_main!(benches);
