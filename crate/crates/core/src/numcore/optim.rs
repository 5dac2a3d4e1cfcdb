use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Plain SGD without momentum. Masked-out positions never move.
pub fn sgd_step(store: &mut ParamStore, learning_rate: f64) -> Result<()> {
    for p in store.iter() {
        if !p.trainable {
            continue;
        }
        for (i, (&v, &g)) in p.value.data().iter().zip(p.grad.data()).enumerate() {
            if p.is_active(i) && !(v - learning_rate * g).is_finite() {
                return Err(Error::NonFinite("sgd update".into()));
            }
        }
    }
    for p in store.iter_mut() {
        if p.trainable {
            let mask = p.mask.as_ref();
            for (i, (v, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                if mask.is_none_or(|m| m.is_active(i)) {
                    *v -= learning_rate * g;
                }
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

/// First/second moment accumulators for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Bias-corrected Adam update applied at mask-active positions.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Shape("adam state does not match parameters".into()));
    }
    let t = state.step + 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut updates = Vec::with_capacity(store.len());
    for (k, p) in store.iter().enumerate() {
        let m = &state.first[k];
        let v = &state.second[k];
        let mut new_m = m.clone();
        let mut new_v = v.clone();
        let mut new_w = p.value.clone();
        if p.trainable {
            for i in 0..p.value.len() {
                if !p.is_active(i) {
                    continue;
                }
                let g = p.grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                new_m.data_mut()[i] = mi;
                new_v.data_mut()[i] = vi;
                new_w.data_mut()[i] -= learning_rate * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        new_w.ensure_finite("adam update")?;
        updates.push((new_m, new_v, new_w));
    }
    for (k, (p, (m, v, w))) in store.iter_mut().zip(updates).enumerate() {
        state.first[k] = m;
        state.second[k] = v;
        p.value = w;
        p.grad.fill(0.0);
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::param::Parameter;
    use crate::sparse::Mask;

    fn single(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.push(Parameter::new(Tensor::scalar(w)));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn sgd_examples() {
        let mut s = single(1.0, 0.5);
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.iter().next().unwrap().value.item() - 0.95).abs() < 1e-15);
        assert_eq!(s.iter().next().unwrap().grad.item(), 0.0);

        let mut s = single(1.0, 0.5);
        sgd_step(&mut s, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn sgd_leaves_masked_positions_at_zero() {
        let mut s = ParamStore::new();
        let id = s.push(Parameter::masked(
            Tensor::new(vec![2], vec![0.3, 0.7]).unwrap(),
            Mask::from_bits(vec![true, false]),
        ));
        s.get_mut(id).grad = Tensor::new(vec![2], vec![1.0, 5.0]).unwrap();
        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(id).value.data()[1], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = single(0.0, 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.001).unwrap();
        assert!((s.iter().next().unwrap().value.item() + 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = single(0.4, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.001).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 0.4);
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        // Scalar recurrence evaluated independently of the optimizer.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.001);
        let (mut m, mut v, mut w) = (0.0, 0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((-0.002..=-0.0019).contains(&w));

        let mut s = single(0.0, 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, lr).unwrap();
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        adam_step(&mut s, &mut st, lr).unwrap();
        let got = s.iter().next().unwrap().value.item();
        assert!((got - w).abs() < 1e-15);
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let mut s = single(f64::MAX, -f64::MAX);
        assert!(sgd_step(&mut s, 10.0).is_err());
    }
}
