//! Shape-space entropy and its particle-position gradient.
//!
//! The ensemble covariance is estimated through the K×K Gram matrix YᵀY
//! (dM is much larger than K), with convention Σ = YYᵀ/(K−1). Eigenvalues
//! below the regularization floor are clamped before the log so the entropy
//! stays finite for degenerate ensembles.

use nalgebra::DMatrix;

use crate::ensemble::EnsembleMatrix;

/// ½ Σ log λ over the compact K-dimensional spectrum of Σ = YYᵀ/(K−1),
/// with eigenvalues floored at `alpha`.
pub fn shape_entropy(ensemble: &EnsembleMatrix, alpha: f64) -> f64 {
    let y = &ensemble.y;
    let k = y.ncols();
    let gram = y.transpose() * y;
    let eig = gram.symmetric_eigen();
    let denom = (k as f64 - 1.0).max(1.0);
    eig.eigenvalues
        .iter()
        .map(|&g| 0.5 * (g / denom).max(alpha).ln())
        .sum()
}

/// Entropy gradient distributed back to the particles: Y (YᵀY + αI)⁻¹.
/// Column j is the gradient with respect to ensemble member j; descent on
/// the entropy term negates it.
pub fn correspondence_gradient(ensemble: &EnsembleMatrix, alpha: f64) -> DMatrix<f64> {
    let y = &ensemble.y;
    let k = y.ncols();
    let mut gram = y.transpose() * y;
    for i in 0..k {
        gram[(i, i)] += alpha;
    }
    let inv = gram
        .try_inverse()
        .expect("YtY + alpha*I is positive definite for alpha > 0");
    y * inv
}
