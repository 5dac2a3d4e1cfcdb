//! Prune and grow strategies plus the count-preserving update.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::StreamRng;

use super::model::SparseModel;

/// A weight position: maskable layer index plus flat row-major offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub layer: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    Magnitude,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowStrategy {
    Gradient,
    Random,
}

/// One prune strategy crossed with one growth strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StrategyPair {
    pub prune: PruneStrategy,
    pub grow: GrowStrategy,
}

impl StrategyPair {
    pub const fn new(prune: PruneStrategy, grow: GrowStrategy) -> Self {
        Self { prune, grow }
    }

    /// The four pairs in their fixed order.
    pub fn all() -> Vec<StrategyPair> {
        use GrowStrategy::*;
        use PruneStrategy::*;
        vec![
            Self::new(Magnitude, Gradient),
            Self::new(Magnitude, Random),
            Self::new(Threshold, Gradient),
            Self::new(Threshold, Random),
        ]
    }
}

impl fmt::Display for StrategyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.prune {
            PruneStrategy::Magnitude => "magnitude",
            PruneStrategy::Threshold => "threshold",
        };
        let g = match self.grow {
            GrowStrategy::Gradient => "gradient",
            GrowStrategy::Random => "random",
        };
        write!(f, "{p}/{g}")
    }
}

fn check_counts(model: &SparseModel, counts: &[usize]) -> Result<()> {
    if counts.len() != model.num_layers() {
        return Err(Error::Sparse(format!(
            "{} counts for {} maskable layers",
            counts.len(),
            model.num_layers()
        )));
    }
    Ok(())
}

/// Active indices of `layer` sorted by ascending magnitude, ties by index.
fn active_by_magnitude(model: &SparseModel, layer: usize) -> Vec<usize> {
    let w = model.weights(layer).data();
    let mut idx: Vec<usize> = model.mask(layer).active_indices().collect();
    idx.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    idx
}

fn deactivate(model: &mut SparseModel, layer: usize, indices: &[usize]) -> Vec<Position> {
    for &i in indices {
        model.mask_mut(layer).set(i, false);
        model.weights_mut(layer).data_mut()[i] = 0.0;
    }
    indices.iter().map(|&index| Position { layer, index }).collect()
}

fn activate(model: &mut SparseModel, layer: usize, indices: &[usize]) -> Vec<Position> {
    for &i in indices {
        model.mask_mut(layer).set(i, true);
        model.weights_mut(layer).data_mut()[i] = 0.0;
    }
    indices.iter().map(|&index| Position { layer, index }).collect()
}

/// Deactivates the `counts[k]` smallest-magnitude active weights per layer.
pub fn prune_magnitude(model: &mut SparseModel, counts: &[usize]) -> Result<Vec<Position>> {
    check_counts(model, counts)?;
    for (k, &c) in counts.iter().enumerate() {
        if c > model.layer_active(k) {
            return Err(Error::Sparse(format!(
                "cannot prune {c} of {} active weights in layer {k}",
                model.layer_active(k)
            )));
        }
    }
    let mut out = Vec::new();
    for (k, &c) in counts.iter().enumerate() {
        let order = active_by_magnitude(model, k);
        out.extend(deactivate(model, k, &order[..c]));
    }
    Ok(out)
}

/// Active indices of `layer` with `|w| < tau`, ascending by magnitude.
fn below_threshold(model: &SparseModel, layer: usize, tau: f64) -> Vec<usize> {
    let w = model.weights(layer).data();
    active_by_magnitude(model, layer)
        .into_iter()
        .take_while(|&i| w[i].abs() < tau)
        .collect()
}

/// Deactivates every active weight whose magnitude is below `tau`.
pub fn prune_threshold(model: &mut SparseModel, tau: f64) -> Result<Vec<Position>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {tau}")));
    }
    let mut out = Vec::new();
    for k in 0..model.num_layers() {
        let idx = below_threshold(model, k, tau);
        out.extend(deactivate(model, k, &idx));
    }
    Ok(out)
}

fn growable(model: &SparseModel, layer: usize, exclude: &HashSet<Position>) -> Vec<usize> {
    model
        .mask(layer)
        .inactive_indices()
        .filter(|&index| !exclude.contains(&Position { layer, index }))
        .collect()
}

fn check_room(layer: usize, wanted: usize, available: usize) -> Result<()> {
    if wanted > available {
        return Err(Error::Sparse(format!(
            "cannot grow {wanted} weights in layer {layer}: only {available} positions free"
        )));
    }
    Ok(())
}

/// Activates the inactive positions with the largest gradient magnitude.
/// Grown weights start at zero; `exclude` positions are never chosen.
pub fn grow_gradient(
    model: &mut SparseModel,
    dense_gradients: &[Tensor],
    counts: &[usize],
    exclude: &[Position],
) -> Result<Vec<Position>> {
    check_counts(model, counts)?;
    if dense_gradients.len() != model.num_layers()
        || dense_gradients
            .iter()
            .enumerate()
            .any(|(k, g)| g.len() != model.mask(k).len())
    {
        return Err(Error::Shape("dense gradients do not match maskable layers".into()));
    }
    let exclude: HashSet<Position> = exclude.iter().copied().collect();
    let mut plans = Vec::with_capacity(counts.len());
    for (k, &c) in counts.iter().enumerate() {
        let mut free = growable(model, k, &exclude);
        check_room(k, c, free.len())?;
        let g = dense_gradients[k].data();
        free.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
        free.truncate(c);
        plans.push(free);
    }
    Ok(plans
        .iter()
        .enumerate()
        .flat_map(|(k, idx)| activate(model, k, idx))
        .collect())
}

/// Activates uniformly sampled inactive positions, without replacement.
pub fn grow_random(
    model: &mut SparseModel,
    counts: &[usize],
    exclude: &[Position],
    rng: &mut StreamRng,
) -> Result<Vec<Position>> {
    check_counts(model, counts)?;
    let exclude: HashSet<Position> = exclude.iter().copied().collect();
    let mut plans = Vec::with_capacity(counts.len());
    for (k, &c) in counts.iter().enumerate() {
        let free = growable(model, k, &exclude);
        check_room(k, c, free.len())?;
        let mut chosen: Vec<usize> = sample(rng, free.len(), c).into_iter().map(|j| free[j]).collect();
        chosen.sort_unstable();
        plans.push(chosen);
    }
    Ok(plans
        .iter()
        .enumerate()
        .flat_map(|(k, idx)| activate(model, k, idx))
        .collect())
}

/// Number of weights magnitude pruning removes from a layer: `floor(rate ·
/// active)`, at least one when more than one weight is active, and never
/// more than the layer has free positions to regrow into.
pub fn magnitude_prune_count(active: usize, size: usize, prune_rate: f64) -> usize {
    let mut count = (prune_rate * active as f64).floor() as usize;
    if active > 1 {
        count = count.max(1);
    }
    count.min(size - active)
}

/// Outcome of one count-preserving prune-and-regrow step.
#[derive(Clone, Debug)]
pub struct SparseUpdate {
    pub model: SparseModel,
    pub pruned: Vec<Position>,
    pub grown: Vec<Position>,
}

/// Prunes then regrows a deep copy of `model` so every layer keeps its
/// exact active count. Positions pruned here are not regrown in the same step.
pub fn sparse_update(
    model: &SparseModel,
    pair: StrategyPair,
    prune_rate: f64,
    tau: f64,
    dense_gradients: &[Tensor],
    rng: &mut StreamRng,
) -> Result<SparseUpdate> {
    if !(prune_rate > 0.0 && prune_rate < 1.0) {
        return Err(Error::InvalidArgument(format!("prune rate must lie in (0, 1), got {prune_rate}")));
    }
    let mut cand = model.clone();
    let before: Vec<usize> = (0..cand.num_layers()).map(|k| cand.layer_active(k)).collect();

    let pruned = match pair.prune {
        PruneStrategy::Magnitude => {
            let counts: Vec<usize> = before
                .iter()
                .enumerate()
                .map(|(k, &a)| magnitude_prune_count(a, cand.mask(k).len(), prune_rate))
                .collect();
            prune_magnitude(&mut cand, &counts)?
        }
        PruneStrategy::Threshold => {
            if !(tau >= 0.0) {
                return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {tau}")));
            }
            let mut out = Vec::new();
            for (k, &a) in before.iter().enumerate() {
                let mut idx = below_threshold(&cand, k, tau);
                idx.truncate(cand.mask(k).len() - a);
                if a > 0 && idx.len() == a {
                    return Err(Error::DegenerateCandidate(format!(
                        "threshold {tau:.3e} removes every active weight of layer {k}"
                    )));
                }
                out.extend(deactivate(&mut cand, k, &idx));
            }
            out
        }
    };

    let mut counts = vec![0usize; cand.num_layers()];
    for p in &pruned {
        counts[p.layer] += 1;
    }
    let grown = match pair.grow {
        GrowStrategy::Gradient => grow_gradient(&mut cand, dense_gradients, &counts, &pruned)?,
        GrowStrategy::Random => grow_random(&mut cand, &counts, &pruned, rng)?,
    };

    for (k, &b) in before.iter().enumerate() {
        if cand.layer_active(k) != b {
            return Err(Error::Sparse(format!(
                "layer {k} active count drifted from {b} to {}",
                cand.layer_active(k)
            )));
        }
    }
    Ok(SparseUpdate {
        model: cand,
        pruned,
        grown,
    })
}

/// Magnitude at the `prune_rate` quantile of all active weights.
pub fn quantile_threshold(model: &SparseModel, prune_rate: f64) -> f64 {
    let mut mags: Vec<f64> = (0..model.num_layers())
        .flat_map(|k| {
            let w = model.weights(k).data();
            model.mask(k).active_indices().map(move |i| w[i].abs()).collect::<Vec<_>>()
        })
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let at = ((prune_rate * mags.len() as f64).floor() as usize).min(mags.len() - 1);
    mags[at]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{assemble_target, build_target, TargetSpec};
    use crate::rng;
    use proptest::prelude::*;

    /// Single `n_out × n_in` maskable layer with the given weights, all active.
    fn layer(n_in: usize, n_out: usize, weights: &[f64]) -> SparseModel {
        let mut m = assemble_target(&TargetSpec::mlp(vec![n_in], vec![], n_out), 1.0).unwrap();
        m.weights_mut(0).data_mut().copy_from_slice(weights);
        m
    }

    fn indices(set: &[Position]) -> Vec<usize> {
        let mut v: Vec<usize> = set.iter().map(|p| p.index).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn magnitude_examples() {
        let mut m = layer(2, 2, &[0.5, -0.01, 0.3, 0.002]);
        assert_eq!(indices(&prune_magnitude(&mut m, &[2]).unwrap()), vec![1, 3]);
        assert!(m.is_consistent());

        let mut m = layer(1, 3, &[0.5, 0.5, 0.1]);
        assert_eq!(indices(&prune_magnitude(&mut m, &[1]).unwrap()), vec![2]);

        let mut m = layer(1, 2, &[0.2, -0.2]);
        assert_eq!(indices(&prune_magnitude(&mut m, &[1]).unwrap()), vec![0]);

        let mut m = layer(1, 2, &[0.2, -0.2]);
        assert!(prune_magnitude(&mut m, &[3]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let w = [0.5, -0.01, 0.3, 0.002];
        let mut m = layer(2, 2, &w);
        assert_eq!(indices(&prune_threshold(&mut m, 0.05).unwrap()), vec![1, 3]);
        let mut m = layer(2, 2, &w);
        assert!(prune_threshold(&mut m, 0.0).unwrap().is_empty());
        let mut m = layer(2, 2, &w);
        assert_eq!(prune_threshold(&mut m, f64::INFINITY).unwrap().len(), 4);
        assert_eq!(m.active_count(), 0);
    }

    #[test]
    fn gradient_growth_examples() {
        let mut m = layer(1, 3, &[0.0; 3]);
        for i in 0..3 {
            m.mask_mut(0).set(i, false);
        }
        let grads = vec![Tensor::new(vec![3, 1], vec![0.9, -1.2, 0.05]).unwrap()];
        let grown = grow_gradient(&mut m, &grads, &[2], &[]).unwrap();
        assert_eq!(indices(&grown), vec![0, 1]);
        assert!(m.weights(0).data().iter().all(|&w| w == 0.0));
        assert!(grow_gradient(&mut m, &grads, &[0], &[]).unwrap().is_empty());
        assert!(grow_gradient(&mut m, &grads, &[2], &[]).is_err());
    }

    #[test]
    fn random_growth_examples() {
        let mut m = layer(2, 2, &[1.0; 4]);
        m.mask_mut(0).set(2, false);
        m.weights_mut(0).data_mut()[2] = 0.0;
        let grown = grow_random(&mut m, &[1], &[], &mut rng::stream(1, &[0])).unwrap();
        assert_eq!(grown, vec![Position { layer: 0, index: 2 }]);
        assert!(grow_random(&mut m, &[0], &[], &mut rng::stream(1, &[0])).unwrap().is_empty());

        let base = build_target(&TargetSpec::mlp(vec![10], vec![8], 3), 0.3, &mut rng::stream(2, &[0])).unwrap();
        let counts: Vec<usize> = vec![5, 2];
        let mut a = base.clone();
        let mut b = base.clone();
        let ga = grow_random(&mut a, &counts, &[], &mut rng::stream(3, &[0])).unwrap();
        let gb = grow_random(&mut b, &counts, &[], &mut rng::stream(3, &[0])).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn rate_arithmetic() {
        assert_eq!(magnitude_prune_count(10, 100, 0.2), 2);
        assert_eq!(magnitude_prune_count(3, 100, 0.2), 1);
        assert_eq!(magnitude_prune_count(1, 100, 0.2), 0);
        assert_eq!(magnitude_prune_count(10, 11, 0.5), 1);

        // Ten active weights somewhere in a 5×4 layer.
        let mut w = vec![0.0; 20];
        for (i, v) in w.iter_mut().enumerate().take(10) {
            *v = (i + 1) as f64;
        }
        let mut m = layer(4, 5, &w);
        for i in 10..20 {
            m.mask_mut(0).set(i, false);
        }
        let pair = StrategyPair::new(PruneStrategy::Magnitude, GrowStrategy::Random);
        let up = sparse_update(&m, pair, 0.2, 0.0, &[], &mut rng::stream(1, &[0])).unwrap();
        assert_eq!(up.pruned.len(), 2);
        assert_eq!(up.grown.len(), 2);
        assert_eq!(up.model.layer_active(0), 10);
        assert_eq!(m.layer_active(0), 10, "parent untouched");
    }

    #[test]
    fn four_distinct_pairs() {
        let all = StrategyPair::all();
        assert_eq!(all.len(), 4);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, all);
    }

    #[test]
    fn threshold_wiping_a_layer_is_degenerate() {
        let m = build_target(&TargetSpec::mlp(vec![6], vec![5], 3), 0.4, &mut rng::stream(1, &[0])).unwrap();
        let pair = StrategyPair::new(PruneStrategy::Threshold, GrowStrategy::Random);
        let err = sparse_update(&m, pair, 0.2, 1e9, &[], &mut rng::stream(1, &[1])).unwrap_err();
        assert!(matches!(err, Error::DegenerateCandidate(_)));
    }

    fn random_model(seed: u64) -> SparseModel {
        let mut r = rng::stream(seed, &[99]);
        use rand::Rng;
        let n_in = r.random_range(2..12);
        let hidden = r.random_range(2..12);
        let classes = r.random_range(2..5);
        let omega = r.random_range(0.1..0.9);
        build_target(&TargetSpec::mlp(vec![n_in], vec![hidden], classes), omega, &mut r).unwrap()
    }

    fn random_grads(m: &SparseModel, seed: u64) -> Vec<Tensor> {
        use rand::Rng;
        let mut r = rng::stream(seed, &[100]);
        (0..m.num_layers())
            .map(|k| {
                let shape = m.weights(k).shape().to_vec();
                let n = m.weights(k).len();
                Tensor::new(shape, (0..n).map(|_| r.random::<f64>() - 0.5).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn preservation_over_many_triples() {
        let pairs = StrategyPair::all();
        for t in 0..1000u64 {
            let m = random_model(t);
            let pair = pairs[(t % 4) as usize];
            let grads = random_grads(&m, t);
            let tau = quantile_threshold(&m, 0.2);
            let before: Vec<usize> = (0..m.num_layers()).map(|k| m.layer_active(k)).collect();
            match sparse_update(&m, pair, 0.2, tau, &grads, &mut rng::stream(t, &[5])) {
                Ok(up) => {
                    let after: Vec<usize> = (0..up.model.num_layers()).map(|k| up.model.layer_active(k)).collect();
                    assert_eq!(before, after, "triple {t} {pair}");
                    assert!(up.model.is_consistent());
                    let pruned: HashSet<_> = up.pruned.iter().collect();
                    assert!(up.grown.iter().all(|p| !pruned.contains(p)));
                }
                Err(Error::DegenerateCandidate(_)) => {}
                Err(e) => panic!("triple {t}: {e}"),
            }
        }
    }

    proptest! {
        #[test]
        fn magnitude_matches_sort_oracle(w in prop::collection::vec(-1.0f64..1.0, 1..=12), frac in 0.0f64..1.0) {
            let n = w.len();
            let count = (frac * n as f64) as usize;
            let mut m = layer(1, n.max(2), &{
                let mut v = w.clone();
                v.resize(n.max(2), 5.0);
                v
            });
            let got = indices(&prune_magnitude(&mut m, &[count]).unwrap());
            let mut order: Vec<usize> = (0..n.max(2)).collect();
            let padded: Vec<f64> = { let mut v = w.clone(); v.resize(n.max(2), 5.0); v };
            // Exhaustive reference: rank by (|w|, index).
            order.sort_by(|&a, &b| padded[a].abs().partial_cmp(&padded[b].abs()).unwrap().then(a.cmp(&b)));
            let mut want = order[..count].to_vec();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn gradient_growth_matches_sort_oracle(
            g in prop::collection::vec(-1.0f64..1.0, 2..=12),
            active in prop::collection::vec(any::<bool>(), 12),
            frac in 0.0f64..1.0,
        ) {
            let n = g.len();
            let mut m = layer(1, n, &vec![0.0; n]);
            for i in 0..n {
                m.mask_mut(0).set(i, active[i]);
            }
            let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
            let count = (frac * free.len() as f64) as usize;
            let grads = vec![Tensor::new(vec![n, 1], g.clone()).unwrap()];
            let got = indices(&grow_gradient(&mut m, &grads, &[count], &[]).unwrap());
            let mut order = free.clone();
            order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap().then(a.cmp(&b)));
            let mut want = order[..count].to_vec();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn operation_sequences_stay_consistent(seed in 0u64..10_000, steps in 1usize..6) {
            let mut m = random_model(seed);
            let start = m.active_count();
            let pairs = StrategyPair::all();
            for s in 0..steps {
                let grads = random_grads(&m, seed + s as u64);
                let pair = pairs[(seed as usize + s) % 4];
                if let Ok(up) = sparse_update(&m, pair, 0.3, 0.05, &grads, &mut rng::stream(seed, &[s as u64])) {
                    m = up.model;
                }
                prop_assert!(m.is_consistent());
                prop_assert_eq!(m.active_count(), start);
            }
        }
    }
}
