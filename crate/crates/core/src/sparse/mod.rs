//! Connectivity masks: Erdős–Rényi initialization, density accounting and
//! the prune/grow strategies of the dynamic sparse update.

pub mod er;
pub mod mask;
pub mod model;
pub mod ops;

pub use er::{calibrate_epsilon, er_initialize, er_probability};
pub use mask::Mask;
pub use model::{MaskableLayer, SparseModel};
pub use ops::{
    grow_gradient, grow_random, magnitude_prune_count, prune_magnitude, prune_threshold, quantile_threshold,
    sparse_update, GrowStrategy, Position, PruneStrategy, SparseUpdate, StrategyPair,
};

/// Density of maskable weights: `Σ ||M^k||₀ / Σ size(W^k)`.
pub fn sparsity(model: &SparseModel) -> f64 {
    model.sparsity()
}
