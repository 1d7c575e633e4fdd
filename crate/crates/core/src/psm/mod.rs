//! Particle-based shape model optimization with a disentangled
//! spatiotemporal entropy objective.

mod entropy;
mod optimizer;
mod sampling;

pub use entropy::{correspondence_gradient, shape_entropy};
pub use optimizer::{
    initial_particles, optimize, optimize_from, propagate_from_reference, split_particles,
    OptimizeOutcome,
    OptimizerState,
};
pub use sampling::sampling_gradient;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Only the t=0 ensemble and t=0 shapes participate.
    CrossSectional,
    /// Full disentangled objective over both ensemble axes.
    Spatiotemporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    Geometric,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingKernel {
    /// Neighbor count for the Parzen repulsion term.
    pub neighbors: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for SamplingKernel {
    fn default() -> Self {
        // Covering every particle at typical particle counts keeps the
        // pairwise forces symmetric; truncated neighborhoods make the force
        // field non-conservative and visibly degrade sampling uniformity.
        Self { neighbors: 256, sigma_min: 1e-6, sigma_max: f64::INFINITY }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub alpha_schedule: AlphaSchedule,
    pub iterations_per_split: usize,
    /// Must be a power of two.
    pub target_particles: usize,
    pub step_size: f64,
    /// Multiplies the step at each split level, in (0, 1].
    pub step_decay: f64,
    pub sampling_kernel: SamplingKernel,
    /// Re-run Procrustes every this many iterations (and after every split).
    pub procrustes_cadence: usize,
    pub mode: ObjectiveMode,
    pub rng_seed: u64,
    /// Offset scale for particle splitting, as a fraction of the bbox diagonal.
    pub split_offset_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha_start: 100.0,
            alpha_end: 0.1,
            alpha_schedule: AlphaSchedule::Geometric,
            iterations_per_split: 64,
            target_particles: 256,
            step_size: 0.05,
            step_decay: 1.0,
            sampling_kernel: SamplingKernel::default(),
            procrustes_cadence: 32,
            mode: ObjectiveMode::Spatiotemporal,
            rng_seed: 0,
            split_offset_fraction: 0.02,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start >= self.alpha_end && self.alpha_end > 0.0) {
            return Err(Error::InvalidArgument("require alpha_start >= alpha_end > 0".into()));
        }
        if !self.target_particles.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "target_particles = {} is not a power of two",
                self.target_particles
            )));
        }
        if self.iterations_per_split == 0 || self.procrustes_cadence == 0 {
            return Err(Error::InvalidArgument("iteration counts must be positive".into()));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::InvalidArgument("step_decay must be in (0, 1]".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        Ok(())
    }

    /// Annealed weight at global iteration `iteration` of `total_iterations`.
    pub fn anneal_alpha(&self, iteration: usize, total_iterations: usize) -> f64 {
        anneal_alpha(self, iteration, total_iterations)
    }
}

/// Annealing schedule for the correspondence weight. The geometric schedule
/// hits both endpoints exactly: alpha(0) = alpha_start, alpha(total) = alpha_end.
pub fn anneal_alpha(config: &OptimizerConfig, iteration: usize, total_iterations: usize) -> f64 {
    debug_assert!(iteration <= total_iterations);
    if total_iterations == 0 {
        return config.alpha_end;
    }
    let f = iteration as f64 / total_iterations as f64;
    match config.alpha_schedule {
        AlphaSchedule::Geometric => {
            config.alpha_start * (config.alpha_end / config.alpha_start).powf(f)
        }
        AlphaSchedule::Linear => config.alpha_start + (config.alpha_end - config.alpha_start) * f,
    }
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub iteration: usize,
    pub alpha: f64,
    /// alpha * (inter + intra) - sampling, exactly as combined.
    pub total: f64,
    pub inter_subject_entropy_sum: f64,
    pub intra_subject_entropy_sum: f64,
    pub sampling_entropy_sum: f64,
    pub step: f64,
    pub n_particles: usize,
}

impl ObjectiveBreakdown {
    pub fn combine(
        iteration: usize,
        alpha: f64,
        inter: f64,
        intra: f64,
        sampling: f64,
        step: f64,
        n_particles: usize,
    ) -> Self {
        Self {
            iteration,
            alpha,
            total: alpha * (inter + intra) - sampling,
            inter_subject_entropy_sum: inter,
            intra_subject_entropy_sum: intra,
            sampling_entropy_sum: sampling,
            step,
            n_particles,
        }
    }
}
