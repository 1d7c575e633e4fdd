//! Spatiotemporal particle-based shape modeling.
//!
//! Pipeline: generate or load a cohort of surfaces ([`surfaces`]), align it
//! ([`procrustes`]), optimize correspondence particles ([`psm`]), fit a
//! time-varying linear dynamical system to the flattened particle
//! trajectories ([`lds`]), and score the result ([`eval`]).

pub mod cohort;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod io;
pub mod lds;
pub mod procrustes;
pub mod psm;
pub mod seed;
pub mod surfaces;

pub use cohort::{apply_transform, Cohort, PointSet, RigidTransform, DIM};
pub use ensemble::{build_ensemble, EnsembleAxis, EnsembleMatrix};
pub use error::{Error, Result};
