//! Central finite-difference verification of the autodiff engine.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::{training_loss, EntropyConfig, LossVariant};
use crate::numcore::{Graph, Layer, NodeId, Padding, ParamId, ParamStore, Parameter, Sequential, Tensor};
use crate::rng::StreamRng;
use crate::sparse::Mask;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const ABS_FLOOR: f64 = 1e-6;

type LossFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>;

/// A named scalar function of a parameter store.
pub struct GradCase {
    pub name: String,
    pub store: ParamStore,
    pub loss: LossFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        store: ParamStore,
        loss: impl Fn(&mut Graph, &ParamStore) -> Result<NodeId> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            store,
            loss: Box::new(loss),
        }
    }

    fn eval(&self, store: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let l = (self.loss)(&mut g, store)?;
        Ok(g.value(l).item())
    }

    /// Largest relative discrepancy between autodiff and central differences.
    /// Masked positions are probed with the mask bit temporarily set so the
    /// dense-gradient contract is checked too.
    pub fn max_relative_error(&self) -> Result<f64> {
        let mut analytic = self.store.clone();
        let mut g = Graph::new();
        let l = (self.loss)(&mut g, &analytic)?;
        g.backward(l, &mut analytic)?;

        let mut probe = self.store.clone();
        let mut worst = 0.0f64;
        for k in 0..probe.len() {
            let id = ParamId(k);
            if !probe.get(id).trainable {
                continue;
            }
            for i in 0..probe.get(id).value.len() {
                let was_active = probe.get(id).is_active(i);
                if let Some(m) = probe.get_mut(id).mask.as_mut() {
                    m.set(i, true);
                }
                let orig = probe.get(id).value.data()[i];
                probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
                let plus = self.eval(&probe)?;
                probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
                let minus = self.eval(&probe)?;
                probe.get_mut(id).value.data_mut()[i] = orig;
                if let Some(m) = probe.get_mut(id).mask.as_mut() {
                    m.set(i, was_active);
                }
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let auto = analytic.get(id).grad.data()[i];
                let denom = auto.abs().max(numeric.abs()).max(ABS_FLOOR);
                worst = worst.max((auto - numeric).abs() / denom);
            }
        }
        Ok(worst)
    }
}

/// Per-case outcome of a gradient-check run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub cases: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

/// Runs every case; fails on the first one above [`TOLERANCE`].
pub fn run_gradcheck(cases: &[GradCase]) -> Result<GradCheckReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("gradient check registry is empty".into()));
    }
    let mut report = GradCheckReport { cases: Vec::new() };
    for case in cases {
        let err = case.max_relative_error()?;
        if err > TOLERANCE {
            return Err(Error::GradCheck {
                case: case.name.clone(),
                error: err,
                tolerance: TOLERANCE,
            });
        }
        report.cases.push((case.name.clone(), err));
    }
    Ok(report)
}

fn normal_tensor(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

fn push_normal(store: &mut ParamStore, rng: &mut StreamRng, shape: &[usize], scale: f64) -> ParamId {
    store.push(Parameter::new(normal_tensor(rng, shape, scale)))
}

fn random_labels(rng: &mut StreamRng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn softmax_ce_case(name: &str, net: Sequential, store: ParamStore, x: Tensor, labels: Vec<usize>, variant: LossVariant) -> GradCase {
    let cfg = EntropyConfig {
        beta: 0.1,
        variant,
        ..EntropyConfig::default()
    };
    GradCase::new(name, store, move |g, s| {
        let input = g.input(x.clone())?;
        let out = net.forward(g, s, input)?;
        training_loss(g, out, &labels, &cfg)
    })
}

fn mlp(store: &mut ParamStore, rng: &mut StreamRng, widths: &[usize]) -> Sequential {
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let weight = push_normal(store, rng, &[w[1], w[0]], 0.7);
        let bias = push_normal(store, rng, &[w[1]], 0.1);
        layers.push(Layer::Linear { weight, bias });
        if i + 2 < widths.len() {
            layers.push(Layer::Relu);
        }
    }
    layers.push(Layer::Softmax);
    Sequential::new(layers)
}

/// Registry covering every layer type and every training loss.
pub fn standard_cases(rng: &mut StreamRng) -> Vec<GradCase> {
    let mut cases = Vec::new();

    for (name, variant) in [
        ("mlp/cross_entropy", LossVariant::None),
        ("mlp/re1", LossVariant::Re1),
        ("mlp/re2", LossVariant::Re2),
    ] {
        let mut store = ParamStore::new();
        let net = mlp(&mut store, rng, &[5, 7, 3]);
        let x = normal_tensor(rng, &[6, 5], 1.0);
        let labels = random_labels(rng, 6, 3);
        cases.push(softmax_ce_case(name, net, store, x, labels, variant));
    }

    {
        let mut store = ParamStore::new();
        let net = mlp(&mut store, rng, &[4, 6, 3]);
        let w0 = net.layers[0].weight().unwrap();
        let bits = (0..24).map(|i| i % 3 != 0).collect();
        let value = store.get(w0).value.clone();
        *store.get_mut(w0) = Parameter::masked(value, Mask::from_bits(bits));
        let x = normal_tensor(rng, &[5, 4], 1.0);
        let labels = random_labels(rng, 5, 3);
        cases.push(softmax_ce_case("masked_linear", net, store, x, labels, LossVariant::Re2));
    }

    let convs = [("conv2d_same+maxpool", Padding::Same), ("conv2d_valid", Padding::Valid)];
    let losses = [("cross_entropy", LossVariant::None), ("re1", LossVariant::Re1), ("re2", LossVariant::Re2)];
    for ((conv, padding), (loss, variant)) in convs.into_iter().flat_map(|c| losses.map(|l| (c, l))) {
        let name = format!("{conv}/{loss}");
        let mut store = ParamStore::new();
        let cw = push_normal(&mut store, rng, &[3, 2, 3, 3], 0.5);
        let cb = push_normal(&mut store, rng, &[3], 0.1);
        let flat = match padding {
            Padding::Same => 3 * 3 * 3,
            Padding::Valid => 3 * 4 * 4,
        };
        let fw = push_normal(&mut store, rng, &[4, flat], 0.3);
        let fb = push_normal(&mut store, rng, &[4], 0.1);
        let mut layers = vec![Layer::Conv2d { weight: cw, bias: cb, padding }, Layer::Relu];
        if padding == Padding::Same {
            layers.push(Layer::MaxPool2);
        }
        layers.extend([Layer::Flatten, Layer::Linear { weight: fw, bias: fb }, Layer::Softmax]);
        let x = normal_tensor(rng, &[3, 2, 6, 6], 1.0);
        let labels = random_labels(rng, 3, 4);
        cases.push(softmax_ce_case(&name, Sequential::new(layers), store, x, labels, variant));
    }

    {
        // Two streams fused through concatenation, mirroring the attacker.
        let mut store = ParamStore::new();
        let cw = push_normal(&mut store, rng, &[4, 1, 5], 0.5);
        let cb = push_normal(&mut store, rng, &[4], 0.1);
        let lo = (23 - 5) / 3 + 1;
        let gw = push_normal(&mut store, rng, &[6, 4 * lo], 0.3);
        let gb = push_normal(&mut store, rng, &[6], 0.1);
        let pw = push_normal(&mut store, rng, &[6, 3], 0.5);
        let pb = push_normal(&mut store, rng, &[6], 0.1);
        let ow = push_normal(&mut store, rng, &[1, 12], 0.5);
        let ob = push_normal(&mut store, rng, &[1], 0.1);
        let grad_stream = Sequential::new(vec![
            Layer::Reshape(vec![1, 23]),
            Layer::Conv1d { weight: cw, bias: cb, stride: 3 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear { weight: gw, bias: gb },
            Layer::Relu,
        ]);
        let prob_stream = Sequential::new(vec![Layer::Linear { weight: pw, bias: pb }, Layer::Relu]);
        let head = Sequential::new(vec![Layer::Linear { weight: ow, bias: ob }, Layer::Sigmoid]);
        let xg = normal_tensor(rng, &[4, 23], 1.0);
        let xp = normal_tensor(rng, &[4, 3], 1.0);
        let targets: Vec<f64> = (0..4).map(|i| (i % 2) as f64).collect();
        cases.push(GradCase::new("conv1d+concat+sigmoid/bce", store, move |g, s| {
            let a = g.input(xg.clone())?;
            let a = grad_stream.forward(g, s, a)?;
            let b = g.input(xp.clone())?;
            let b = prob_stream.forward(g, s, b)?;
            let fused = g.concat(&[a, b])?;
            let out = head.forward(g, s, fused)?;
            g.binary_cross_entropy(out, &targets)
        }));
    }

    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn standard_registry_passes() {
        let mut r = rng::stream(11, &[0]);
        let report = run_gradcheck(&standard_cases(&mut r)).unwrap();
        assert!(report.max_error() < TOLERANCE, "{report:?}");
        assert!(report.cases.len() >= 7);
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert!(matches!(run_gradcheck(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn corrupted_adjoint_is_caught_and_named() {
        let mut r = rng::stream(3, &[0]);
        let mut store = ParamStore::new();
        let net = mlp(&mut store, &mut r, &[3, 4, 2]);
        let x = normal_tensor(&mut r, &[4, 3], 1.0);
        let case = GradCase::new("corrupted-linear", store, move |g, s| {
            let input = g.input(x.clone())?;
            let out = net.forward(g, s, input)?;
            let bent = g.grad_scale(out, 1.5)?;
            g.cross_entropy(bent, &[0, 1, 1, 0])
        });
        match run_gradcheck(&[case]) {
            Err(Error::GradCheck { case, .. }) => assert_eq!(case, "corrupted-linear"),
            other => panic!("expected gradient-check failure, got {other:?}"),
        }
    }
}
