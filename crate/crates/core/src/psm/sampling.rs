//! Per-shape particle repulsion maximizing the Parzen-window entropy of the
//! particle distribution on a surface.

use nalgebra::Vector3;

use crate::cohort::PointSet;
use crate::error::{Error, Result};
use crate::psm::OptimizerConfig;
use crate::surfaces::{sdf_eval, ShapeDomain};

/// Repulsion update for every particle of one shape.
///
/// Each particle receives a Gaussian-weighted sum of unit offsets from its
/// k nearest neighbors. The adaptive bandwidth sigma_m is the distance to the
/// ceil(k/2)-th neighbor, clamped to the configured bounds, and the update
/// magnitude is bounded by sigma_m. Nearest-neighbor ties break toward the
/// lowest particle index. With a domain, each update is projected onto the
/// surface tangent plane at the particle; the normal component only moves
/// particles off the surface and is removed again by re-projection anyway.
pub fn sampling_gradient(
    shape: &PointSet,
    domain: Option<&ShapeDomain>,
    config: &OptimizerConfig,
) -> Result<Vec<Vector3<f64>>> {
    let m = shape.len();
    if m < 2 {
        return Ok(vec![Vector3::zeros(); m]);
    }
    let mut updates = Vec::with_capacity(m);
    let mut distinct = false;
    for i in 0..m {
        let (u, saw_distinct) = repulsion_for(shape, i, domain, config)?;
        distinct |= saw_distinct;
        updates.push(u);
    }
    if !distinct {
        return Err(Error::DegenerateConfiguration("all particles coincident".into()));
    }
    Ok(updates)
}

/// Repulsion update for a single particle. The boolean reports whether any
/// neighbor was at a distinct position.
pub(crate) fn repulsion_for(
    shape: &PointSet,
    i: usize,
    domain: Option<&ShapeDomain>,
    config: &OptimizerConfig,
) -> Result<(Vector3<f64>, bool)> {
    let m = shape.len();
    if m < 2 {
        return Ok((Vector3::zeros(), true));
    }
    let kernel = &config.sampling_kernel;
    let k = kernel.neighbors.min(m - 1).max(1);

    // k nearest neighbors by distance, ties by lowest index.
    let mut neigh: Vec<(f64, usize)> = (0..m)
        .filter(|&j| j != i)
        .map(|j| ((shape.points[j] - shape.points[i]).norm(), j))
        .collect();
    neigh.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    neigh.truncate(k);

    let sigma_idx = (k + 1) / 2 - 1;
    let sigma = neigh[sigma_idx].0.clamp(kernel.sigma_min, kernel.sigma_max);

    let mut update = Vector3::zeros();
    let mut weight_sum = 0.0;
    let mut distinct = false;
    for &(d, j) in &neigh {
        if d < 1e-14 {
            continue;
        }
        distinct = true;
        let w = (-d * d / (2.0 * sigma * sigma)).exp();
        update += (shape.points[i] - shape.points[j]) / d * w;
        weight_sum += w;
    }
    if weight_sum > 0.0 {
        update /= weight_sum;
    }
    if let Some(domain) = domain {
        let (_, normal) = sdf_eval(domain, &shape.points[i])?;
        let n2 = normal.norm_squared();
        if n2 > 1e-20 {
            update -= normal * (update.dot(&normal) / n2);
        }
    }
    let norm = update.norm();
    if norm > sigma {
        update *= sigma / norm;
    }
    Ok((update, distinct))
}
