//! Gradient-descent particle optimization with coarse-to-fine splitting.
//!
//! Particles live in configuration space (each domain's own coordinates).
//! Procrustes transforms are re-estimated on a fixed cadence; correspondence
//! gradients are computed in world space and mapped back through each shape's
//! rotation before the surface projection step.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PointSet, RigidTransform};
use crate::ensemble::{build_ensemble, EnsembleAxis};
use crate::error::{Error, Result};
use crate::procrustes::procrustes_align;
use crate::psm::entropy::{correspondence_gradient, shape_entropy};
use crate::psm::{ObjectiveBreakdown, ObjectiveMode, OptimizerConfig};
use crate::surfaces::{project_to_surface, ShapeDomain};

const PROJECT_MAX_STEPS: usize = 100;
const MAX_STEP_HALVINGS: usize = 5;

/// Resumable optimizer state at a split-level boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Configuration-space particles.
    pub particles: Cohort,
    /// Index of the next level to run.
    pub level: usize,
}

pub struct OptimizeOutcome {
    /// Configuration-space particle model.
    pub pdm: Cohort,
    pub trace: Vec<ObjectiveBreakdown>,
}

/// Number of split levels needed to reach `target` particles from one.
fn n_levels(target: usize) -> usize {
    target.trailing_zeros() as usize + 1
}

fn mean_bbox_diagonal(domains: &[Vec<ShapeDomain>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for row in domains {
        for d in row {
            sum += d.bbox_diagonal();
            count += 1;
        }
    }
    sum / count as f64
}

/// Seed placement: one particle per shape near the domain's interior
/// reference point, pushed onto the surface.
pub fn initial_particles(domains: &[Vec<ShapeDomain>]) -> Result<Cohort> {
    let mut rows = Vec::with_capacity(domains.len());
    for row in domains {
        let mut shapes = Vec::with_capacity(row.len());
        for (t, dom) in row.iter().enumerate() {
            let seed = dom.interior_reference() + Vector3::new(1e-6, 0.0, 0.0);
            let p = project_to_surface(dom, &seed, PROJECT_MAX_STEPS)?;
            let mut ps = PointSet::new(vec![p]);
            ps.domain_id = Some(t);
            shapes.push(ps);
        }
        rows.push(shapes);
    }
    Cohort::new(rows)
}

/// Doubles the particle count: each particle is duplicated with a small
/// random offset (identical per particle index across all shapes, so the
/// children are born in correspondence), then projected back to the surface.
pub fn split_particles(
    pdm: &Cohort,
    domains: &[Vec<ShapeDomain>],
    offset_scale: f64,
    seed: u64,
) -> Result<Cohort> {
    let m = pdm.n_particles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<Vector3<f64>> = (0..m)
        .map(|_| {
            let v = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            v.normalize() * offset_scale
        })
        .collect();

    let mut rows = Vec::with_capacity(pdm.n_subjects());
    for (n, row) in pdm.shapes.iter().enumerate() {
        let mut shapes = Vec::with_capacity(row.len());
        for (t, ps) in row.iter().enumerate() {
            let dom = &domains[n][t];
            let mut points = Vec::with_capacity(2 * m);
            for (idx, p) in ps.points.iter().enumerate() {
                points.push(*p);
                let child = project_to_surface(dom, &(p + offsets[idx]), PROJECT_MAX_STEPS)?;
                points.push(child);
            }
            let mut out = PointSet::new(points);
            out.domain_id = ps.domain_id;
            shapes.push(out);
        }
        rows.push(shapes);
    }
    Cohort::new(rows)
}

/// Copies reference-frame particles to every other time point of each
/// subject by surface projection. This is the index-tracked propagation used
/// to turn a cross-sectionally optimized frame into a full sequence model.
pub fn propagate_from_reference(
    pdm: &Cohort,
    domains: &[Vec<ShapeDomain>],
    reference_t: usize,
) -> Result<Cohort> {
    let mut rows = Vec::with_capacity(pdm.n_subjects());
    for (n, row) in pdm.shapes.iter().enumerate() {
        let reference = &row[reference_t];
        let mut shapes = Vec::with_capacity(row.len());
        for (t, _) in row.iter().enumerate() {
            if t == reference_t {
                shapes.push(reference.clone());
                continue;
            }
            let dom = &domains[n][t];
            let points = reference
                .points
                .iter()
                .map(|p| project_to_surface(dom, p, PROJECT_MAX_STEPS))
                .collect::<Result<Vec<_>>>()?;
            let mut ps = PointSet::new(points);
            ps.domain_id = Some(t);
            shapes.push(ps);
        }
        rows.push(shapes);
    }
    Cohort::new(rows)
}

/// Rigid transforms used while the particle count is too small for a stable
/// rotation solve: translation of each shape's centroid to the origin.
fn translation_alignment(particles: &Cohort) -> Vec<Vec<RigidTransform>> {
    particles
        .shapes
        .iter()
        .map(|row| {
            row.iter()
                .map(|ps| RigidTransform {
                    rotation: nalgebra::Matrix3::identity(),
                    translation: -ps.centroid().coords,
                })
                .collect()
        })
        .collect()
}

struct LevelContext<'a> {
    domains: &'a [Vec<ShapeDomain>],
    config: &'a OptimizerConfig,
    transforms: Vec<Vec<RigidTransform>>,
}

impl LevelContext<'_> {
    fn realign(&mut self, particles: &Cohort) -> Result<()> {
        if particles.n_particles() >= 4 {
            let res = procrustes_align(particles, 100, 1e-8)?;
            self.transforms = res.transforms;
        } else {
            self.transforms = translation_alignment(particles);
        }
        Ok(())
    }

    fn world_cohort(&self, particles: &Cohort) -> Result<Cohort> {
        let rows: Vec<Vec<PointSet>> = particles
            .shapes
            .iter()
            .zip(self.transforms.iter())
            .map(|(row, trow)| {
                row.iter()
                    .zip(trow.iter())
                    .map(|(ps, tr)| crate::cohort::apply_transform(tr, ps))
                    .collect()
            })
            .collect();
        Cohort::new(rows)
    }

    /// Objective pieces at the current particle positions.
    fn objective(
        &self,
        particles: &Cohort,
        alpha: f64,
        iteration: usize,
        step: f64,
    ) -> Result<ObjectiveBreakdown> {
        let world = self.world_cohort(particles)?;
        let (inter, intra) = match self.config.mode {
            ObjectiveMode::CrossSectional => {
                let em = build_ensemble(&world, EnsembleAxis::InterSubject, 0)?;
                (shape_entropy(&em, alpha), 0.0)
            }
            ObjectiveMode::Spatiotemporal => {
                let mut inter = 0.0;
                for t in 0..world.n_timepoints() {
                    let em = build_ensemble(&world, EnsembleAxis::InterSubject, t)?;
                    inter += shape_entropy(&em, alpha);
                }
                let mut intra = 0.0;
                for n in 0..world.n_subjects() {
                    let em = build_ensemble(&world, EnsembleAxis::IntraSubject, n)?;
                    intra += shape_entropy(&em, alpha);
                }
                (inter, intra)
            }
        };
        let mut sampling = 0.0;
        let shapes: Vec<&PointSet> = match self.config.mode {
            ObjectiveMode::CrossSectional => {
                particles.shapes.iter().map(|row| &row[0]).collect()
            }
            ObjectiveMode::Spatiotemporal => {
                particles.shapes.iter().flat_map(|row| row.iter()).collect()
            }
        };
        for ps in shapes {
            sampling += parzen_entropy(ps);
        }
        let b = ObjectiveBreakdown::combine(
            iteration,
            alpha,
            inter,
            intra,
            sampling,
            step,
            particles.n_particles(),
        );
        if !b.total.is_finite() {
            return Err(Error::NonFiniteObjective {
                iteration,
                detail: format!(
                    "inter={inter} intra={intra} sampling={sampling} alpha={alpha}"
                ),
            });
        }
        Ok(b)
    }
}

/// Parzen-window entropy estimate of a particle distribution, used for the
/// trace and step control.
fn parzen_entropy(ps: &PointSet) -> f64 {
    let m = ps.len();
    if m < 2 {
        return 0.0;
    }
    let mut dists: Vec<f64> = Vec::with_capacity(m);
    for i in 0..m {
        let mut nearest = f64::INFINITY;
        for j in 0..m {
            if i != j {
                nearest = nearest.min((ps.points[i] - ps.points[j]).norm());
            }
        }
        dists.push(nearest.max(1e-12));
    }
    // One shared bandwidth: the mean nearest-neighbor distance. A per-particle
    // bandwidth jumps whenever a neighbor relation flips, which makes the
    // traced objective too jittery to drive step control.
    let sigma = dists.iter().sum::<f64>() / m as f64;
    let mut h = 0.0;
    for i in 0..m {
        let mut density = 0.0;
        for j in 0..m {
            if i == j {
                continue;
            }
            let d2 = (ps.points[i] - ps.points[j]).norm_squared();
            density += (-d2 / (2.0 * sigma * sigma)).exp();
        }
        let norm = (m as f64 - 1.0) * (std::f64::consts::TAU * sigma * sigma).powf(1.5);
        h -= (density / norm).max(1e-300).ln();
    }
    h / m as f64
}

pub fn optimize(
    domains: &[Vec<ShapeDomain>],
    config: &OptimizerConfig,
) -> Result<OptimizeOutcome> {
    let state = OptimizerState { particles: initial_particles(domains)?, level: 0 };
    optimize_from(domains, config, state, |_| {})
}

/// Runs the optimization from a (possibly resumed) level boundary.
/// `on_level_complete` fires after each level with the state that a resumed
/// run would need to continue.
pub fn optimize_from(
    domains: &[Vec<ShapeDomain>],
    config: &OptimizerConfig,
    state: OptimizerState,
    mut on_level_complete: impl FnMut(&OptimizerState),
) -> Result<OptimizeOutcome> {
    config.validate()?;
    if domains.is_empty() || domains[0].is_empty() {
        return Err(Error::InvalidArgument("empty domain grid".into()));
    }
    let levels = n_levels(config.target_particles);
    let mut particles = state.particles;
    let mut trace = Vec::new();
    let offset_scale = config.split_offset_fraction * mean_bbox_diagonal(domains);

    let mut ctx = LevelContext {
        domains,
        config,
        transforms: translation_alignment(&particles),
    };

    let mut global_iter = state.level * config.iterations_per_split;
    for level in state.level..levels {
        // Alpha is piecewise-constant per level so the final level runs at
        // exactly alpha_end.
        let alpha = config.anneal_alpha(level, levels.saturating_sub(1));
        let mut step = config.step_size * config.step_decay.powi(level as i32);
        let mut halvings = 0;
        ctx.realign(&particles)?;
        let mut prev_total = f64::INFINITY;

        for it in 0..config.iterations_per_split {
            if it > 0 && it % config.procrustes_cadence == 0 {
                ctx.realign(&particles)?;
            }
            iterate_once(&ctx, &mut particles, alpha, step)?;
            let breakdown = ctx.objective(&particles, alpha, global_iter, step)?;
            let total = breakdown.total;
            trace.push(breakdown);
            let tol = 1e-6 * prev_total.abs().max(1.0);
            if total > prev_total + tol && halvings < MAX_STEP_HALVINGS {
                step *= 0.5;
                halvings += 1;
            }
            prev_total = total;
            global_iter += 1;
        }

        if particles.n_particles() < config.target_particles {
            particles = split_particles(
                &particles,
                domains,
                offset_scale,
                config.rng_seed.wrapping_add(level as u64 + 1),
            )?;
            ctx.realign(&particles)?;
        }
        on_level_complete(&OptimizerState { particles: particles.clone(), level: level + 1 });
    }

    Ok(OptimizeOutcome { pdm: particles, trace })
}

/// One synchronized descent sweep over every shape and particle.
fn iterate_once(
    ctx: &LevelContext<'_>,
    particles: &mut Cohort,
    alpha: f64,
    step: f64,
) -> Result<()> {
    let config = ctx.config;
    let world = ctx.world_cohort(particles)?;
    let n = particles.n_subjects();
    let t_len = particles.n_timepoints();
    let m = particles.n_particles();

    // Correspondence updates per shape, in world space, from the iteration
    // snapshot.
    let mut corr: Vec<Vec<Vec<Vector3<f64>>>> =
        vec![vec![vec![Vector3::zeros(); m]; t_len]; n];
    match config.mode {
        ObjectiveMode::CrossSectional => {
            let em = build_ensemble(&world, EnsembleAxis::InterSubject, 0)?;
            let g = correspondence_gradient(&em, alpha);
            for ni in 0..n {
                for mi in 0..m {
                    corr[ni][0][mi] = Vector3::new(
                        g[(3 * mi, ni)],
                        g[(3 * mi + 1, ni)],
                        g[(3 * mi + 2, ni)],
                    );
                }
            }
        }
        ObjectiveMode::Spatiotemporal => {
            for t in 0..t_len {
                let em = build_ensemble(&world, EnsembleAxis::InterSubject, t)?;
                let g = correspondence_gradient(&em, alpha);
                for ni in 0..n {
                    for mi in 0..m {
                        corr[ni][t][mi] += Vector3::new(
                            g[(3 * mi, ni)],
                            g[(3 * mi + 1, ni)],
                            g[(3 * mi + 2, ni)],
                        );
                    }
                }
            }
            for ni in 0..n {
                let em = build_ensemble(&world, EnsembleAxis::IntraSubject, ni)?;
                let g = correspondence_gradient(&em, alpha);
                for t in 0..t_len {
                    for mi in 0..m {
                        corr[ni][t][mi] += Vector3::new(
                            g[(3 * mi, t)],
                            g[(3 * mi + 1, t)],
                            g[(3 * mi + 2, t)],
                        );
                    }
                }
            }
        }
    }

    // Per-shape updates are independent given the snapshot.
    let updated: Vec<Result<Vec<(usize, usize, PointSet)>>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut row_out = Vec::new();
            for t in 0..t_len {
                if config.mode == ObjectiveMode::CrossSectional && t != 0 {
                    continue;
                }
                let dom = &ctx.domains[ni][t];
                let rot_inv = ctx.transforms[ni][t].rotation.transpose();
                let mut ps = particles.shapes[ni][t].clone();
                // Gauss-Seidel within the shape: the sampling term sees
                // already-moved particles, in fixed index order.
                for mi in 0..m {
                    let (sampling, _) =
                        crate::psm::sampling::repulsion_for(&ps, mi, Some(dom), config)?;
                    // Descend the weighted ensemble-entropy terms, ascend the
                    // per-shape sampling entropy.
                    let delta = -alpha * (rot_inv * corr[ni][t][mi]) + sampling;
                    let moved = Point3::from(ps.points[mi].coords + step * delta);
                    ps.points[mi] = project_to_surface(dom, &moved, PROJECT_MAX_STEPS)?;
                }
                row_out.push((ni, t, ps));
            }
            Ok(row_out)
        })
        .collect();

    for row in updated {
        for (ni, t, ps) in row? {
            particles.shapes[ni][t] = ps;
        }
    }
    Ok(())
}
