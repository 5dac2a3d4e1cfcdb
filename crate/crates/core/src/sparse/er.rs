//! Erdős–Rényi mask initialization.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::{assemble_target, TargetSpec};
use crate::rng::StreamRng;

use super::mask::Mask;
use super::model::SparseModel;

/// Redraws allowed before giving up on a spec.
pub const MAX_REDRAWS: usize = 20;
/// Relative density deviation accepted from the raw Bernoulli draw.
pub const DRAW_TOLERANCE: f64 = 0.10;

/// Connection probability of an `n_k × n_prev` layer, clipped to 1.
pub fn er_probability(epsilon: f64, n_k: usize, n_prev: usize) -> f64 {
    let raw = epsilon * (n_k + n_prev) as f64 / (n_k as f64 * n_prev as f64);
    raw.min(1.0)
}

fn expected_density(dims: &[(usize, usize)], epsilon: f64) -> f64 {
    let total: f64 = dims.iter().map(|&(a, b)| (a * b) as f64).sum();
    let kept: f64 = dims
        .iter()
        .map(|&(a, b)| er_probability(epsilon, a, b) * (a * b) as f64)
        .sum();
    kept / total
}

/// Finds ε whose expected density hits `omega`.
pub fn calibrate_epsilon(layer_dims: &[(usize, usize)], omega: f64) -> Result<f64> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InvalidArgument(format!("omega must lie in (0, 1], got {omega}")));
    }
    if layer_dims.is_empty() || layer_dims.iter().any(|&(a, b)| a == 0 || b == 0) {
        return Err(Error::InvalidArgument("calibration needs non-empty layers".into()));
    }
    let size: f64 = layer_dims.iter().map(|&(a, b)| (a * b) as f64).sum();
    let perimeter: f64 = layer_dims.iter().map(|&(a, b)| (a + b) as f64).sum();
    let closed = omega * size / perimeter;
    let clips = layer_dims
        .iter()
        .any(|&(a, b)| closed * (a + b) as f64 / (a as f64 * b as f64) > 1.0);
    if !clips {
        return Ok(closed);
    }
    let mut hi = closed;
    while expected_density(layer_dims, hi) < omega {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_density(layer_dims, mid) >= omega {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(hi)
}

/// Builds the target architecture with ER masks at density `omega`.
///
/// Masks are drawn per entry with the calibrated layer probability and
/// redrawn until the global density lands within 10% of `omega`; random
/// flips then bring the active count to `round(omega · total)`. Surviving
/// weights are He-normal, biases start at zero.
pub fn er_initialize(spec: &TargetSpec, omega: f64, rng: &mut StreamRng) -> Result<SparseModel> {
    let mut model = assemble_target(spec, omega)?;
    if model.maskable.is_empty() {
        return Err(Error::InvalidArgument("target has no maskable layer".into()));
    }
    let dims: Vec<(usize, usize)> = model.maskable.iter().map(|m| (m.n_out, m.n_in)).collect();
    let epsilon = calibrate_epsilon(&dims, omega)?;
    model.epsilon = epsilon;
    let total: usize = dims.iter().map(|&(a, b)| a * b).sum();
    let target = ((omega * total as f64).round() as usize).clamp(1, total);

    let mut masks = None;
    for _ in 0..MAX_REDRAWS {
        let drawn: Vec<Vec<bool>> = dims
            .iter()
            .map(|&(a, b)| {
                let p = er_probability(epsilon, a, b);
                (0..a * b).map(|_| p >= 1.0 || rng.random::<f64>() < p).collect()
            })
            .collect();
        let count: usize = drawn.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        let realized = count as f64 / total as f64;
        // Tiny layers cannot always land inside the band; one weight of slack
        // keeps them drawable.
        if (realized - omega).abs() <= DRAW_TOLERANCE * omega || count.abs_diff(target) <= 1 {
            masks = Some(drawn);
            break;
        }
    }
    let mut masks = masks.ok_or(Error::RedrawExhausted(MAX_REDRAWS))?;

    // Flip uniformly chosen positions until the exact count is reached.
    let flat: Vec<(usize, usize)> = masks
        .iter()
        .enumerate()
        .flat_map(|(k, m)| (0..m.len()).map(move |i| (k, i)))
        .collect();
    let count: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if count != target {
        let want_active = count < target;
        let pool: Vec<(usize, usize)> = flat
            .iter()
            .copied()
            .filter(|&(k, i)| masks[k][i] != want_active)
            .collect();
        let flips = count.abs_diff(target);
        for j in sample(rng, pool.len(), flips) {
            let (k, i) = pool[j];
            masks[k][i] = want_active;
        }
    }

    for (k, bits) in masks.into_iter().enumerate() {
        let layer = model.maskable[k];
        // Convolution filters are viewed as out × (in·kh·kw), so n_in is the fan-in.
        let normal = Normal::new(0.0, (2.0 / layer.n_in as f64).sqrt()).expect("positive std");
        let p = model.store.get_mut(layer.param);
        for (v, &active) in p.value.data_mut().iter_mut().zip(&bits) {
            *v = if active { normal.sample(rng) } else { 0.0 };
        }
        p.mask = Some(Mask::from_bits(bits));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TargetSpec;
    use crate::rng;

    #[test]
    fn probability_examples() {
        assert!((er_probability(1.0, 4, 6) - 10.0 / 24.0).abs() < 1e-15);
        assert!((er_probability(1.0, 100, 100) - 0.02).abs() < 1e-15);
        assert!(er_probability(1.0, 100, 100) < er_probability(1.0, 4, 6));
        assert_eq!(er_probability(5.0, 2, 2), 1.0);
    }

    #[test]
    fn probability_shrinks_with_layer_size() {
        for n in 1..40 {
            for m in 1..40 {
                let base = er_probability(0.3, n, m);
                // Growing either side raises n·m faster than n+m.
                assert!(er_probability(0.3, n + 1, m) <= base);
                if base < 1.0 {
                    assert!(er_probability(0.3, n + 1, m) < base);
                }
            }
        }
    }

    #[test]
    fn calibration_examples() {
        assert!((calibrate_epsilon(&[(4, 6)], 0.5).unwrap() - 1.2).abs() < 1e-12);
        let eps = calibrate_epsilon(&[(4, 6)], 1.0).unwrap();
        assert_eq!(expected_density(&[(4, 6)], eps), 1.0);

        let dims = [(10, 10), (100, 100)];
        let expected = 0.05 * (100.0 + 10000.0) / (20.0 + 200.0);
        let eps = calibrate_epsilon(&dims, 0.05).unwrap();
        assert!((eps - expected).abs() < 1e-12);
        assert!((eps - 2.2955).abs() < 1e-4);
        assert!((expected_density(&dims, eps) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn calibration_with_clipping_hits_target() {
        // The 3x3 layer saturates well before the big one reaches 0.5.
        let dims = [(3, 3), (200, 300)];
        let eps = calibrate_epsilon(&dims, 0.5).unwrap();
        assert_eq!(er_probability(eps, 3, 3), 1.0);
        assert!((expected_density(&dims, eps) - 0.5).abs() / 0.5 < 1e-6);
    }

    #[test]
    fn init_examples() {
        let spec = TargetSpec::mlp(vec![784], vec![300, 100], 10);
        let mut r = rng::stream(1, &[0]);
        let m = er_initialize(&spec, 0.05, &mut r).unwrap();
        let d = m.sparsity();
        assert!((0.0495..=0.0505).contains(&d), "density {d}");
        assert!(m.is_consistent());

        let spec = TargetSpec::mlp(vec![8], vec![6], 3);
        let m = er_initialize(&spec, 1.0, &mut rng::stream(2, &[0])).unwrap();
        assert_eq!(m.active_count(), m.maskable_count());

        let a = er_initialize(&spec, 0.3, &mut rng::stream(5, &[0])).unwrap();
        let b = er_initialize(&spec, 0.3, &mut rng::stream(5, &[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn realized_density_tracks_omega_tightly() {
        let spec = TargetSpec::mlp(vec![784], vec![300, 100], 10);
        let m = er_initialize(&spec, 0.1, &mut rng::stream(9, &[0])).unwrap();
        assert!((0.099..=0.101).contains(&m.sparsity()));
    }

    #[test]
    fn empty_masks_have_zero_density() {
        let spec = TargetSpec::mlp(vec![5], vec![4], 2);
        let mut m = er_initialize(&spec, 0.5, &mut rng::stream(1, &[0])).unwrap();
        for k in 0..m.num_layers() {
            let n = m.mask(k).len();
            *m.mask_mut(k) = Mask::zeros(n);
        }
        assert_eq!(m.sparsity(), 0.0);
    }
}
