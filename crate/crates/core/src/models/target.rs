use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Layer, Padding, Parameter, ParamStore, Sequential, Tensor};
use crate::rng::StreamRng;
use crate::sparse::{er_initialize, Mask, MaskableLayer, SparseModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Mlp,
    Cnn,
}

/// Architecture of a target classifier.
///
/// An MLP applies `hidden` fully connected ReLU layers. A CNN first applies
/// one block per entry of `channels` (3×3 same conv → ReLU → 2×2 max-pool),
/// flattens, then the same fully connected head. Both end in a softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub kind: TargetKind,
    /// Shape of one sample: `[d]` for an MLP, `[c, h, w]` for a CNN.
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl TargetSpec {
    pub fn mlp(input_shape: Vec<usize>, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: TargetKind::Mlp,
            input_shape,
            hidden,
            channels: Vec::new(),
            num_classes,
        }
    }

    pub fn cnn(input_shape: Vec<usize>, channels: Vec<usize>, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: TargetKind::Cnn,
            input_shape,
            hidden,
            channels,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("invalid input shape {:?}", self.input_shape));
        }
        if self.hidden.contains(&0) || self.channels.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.kind == TargetKind::Cnn {
            if self.input_shape.len() != 3 {
                return bad("cnn input shape must be [channels, height, width]".into());
            }
            let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
            for _ in &self.channels {
                if h < 2 || w < 2 {
                    return bad("too many pooling blocks for the input size".into());
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }
}

/// The target architecture with zero weights and fully dense masks.
pub fn assemble_target(spec: &TargetSpec, omega: f64) -> Result<SparseModel> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut maskable = Vec::new();

    let mut push = |store: &mut ParamStore, shape: Vec<usize>, n_out: usize, n_in: usize| {
        let size = n_out * n_in;
        let weight = store.push(Parameter::masked(Tensor::zeros(&shape), Mask::ones(size)));
        let bias = store.push(Parameter::new(Tensor::zeros(&[n_out])));
        maskable.push(MaskableLayer { param: weight, n_out, n_in });
        (weight, bias)
    };

    let mut width = match spec.kind {
        TargetKind::Mlp => {
            if spec.input_shape.len() > 1 {
                layers.push(Layer::Flatten);
            }
            spec.input_shape.iter().product()
        }
        TargetKind::Cnn => {
            let (mut c, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
            for &out in &spec.channels {
                let (weight, bias) = push(&mut store, vec![out, c, 3, 3], out, c * 9);
                layers.push(Layer::Conv2d {
                    weight,
                    bias,
                    padding: Padding::Same,
                });
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2);
                c = out;
                h /= 2;
                w /= 2;
            }
            layers.push(Layer::Flatten);
            c * h * w
        }
    };
    for &h in &spec.hidden {
        let (weight, bias) = push(&mut store, vec![h, width], h, width);
        layers.push(Layer::Linear { weight, bias });
        layers.push(Layer::Relu);
        width = h;
    }
    let (weight, bias) = push(&mut store, vec![spec.num_classes, width], spec.num_classes, width);
    layers.push(Layer::Linear { weight, bias });
    layers.push(Layer::Softmax);

    Ok(SparseModel {
        spec: spec.clone(),
        store,
        net: Sequential::new(layers),
        maskable,
        omega,
        epsilon: 0.0,
    })
}

/// ER-initialized target honoring the density budget `omega`.
pub fn build_target(spec: &TargetSpec, omega: f64, rng: &mut StreamRng) -> Result<SparseModel> {
    er_initialize(spec, omega, rng)
}

/// Anything that maps a batch of samples to class posteriors.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Posterior rows, one per sample.
    fn predict(&self, batch: &Tensor) -> Result<Tensor>;

    /// Length of the flattened last-layer gradient (weights then bias).
    fn last_layer_len(&self) -> Option<usize> {
        None
    }

    /// Per-sample cross-entropy and the gradient of that single sample's
    /// loss with respect to the last fully connected layer, row-major.
    fn per_sample_gradients(&self, _batch: &Tensor, _labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        Err(Error::Attack("classifier exposes no internals for white-box features".into()))
    }
}

impl SparseModel {
    fn last_linear(&self) -> Option<usize> {
        self.net.layers.iter().rposition(|l| matches!(l, Layer::Linear { .. }))
    }
}

impl Classifier for SparseModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.posteriors(batch)
    }

    fn last_layer_len(&self) -> Option<usize> {
        let idx = self.last_linear()?;
        match &self.net.layers[idx] {
            Layer::Linear { weight, bias } => Some(self.store.get(*weight).value.len() + self.store.get(*bias).value.len()),
            _ => None,
        }
    }

    /// With `z = W·h + b` feeding a softmax, one sample's cross-entropy has
    /// `∂L/∂z = p − e_y`, so `∂L/∂W = (p − e_y)·hᵀ` and `∂L/∂b = p − e_y`.
    fn per_sample_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let idx = self
            .last_linear()
            .ok_or_else(|| Error::Attack("target has no fully connected layer".into()))?;
        if !matches!(self.net.layers.get(idx + 1), Some(Layer::Softmax)) || idx + 2 != self.net.layers.len() {
            return Err(Error::Attack("target must end in linear → softmax".into()));
        }
        if labels.len() != batch.rows() {
            return Err(Error::Shape("one label per sample required".into()));
        }
        self.check_input(batch)?;
        let mut g = Graph::new();
        let mut x = g.input(batch.clone())?;
        for layer in &self.net.layers[..idx] {
            x = layer.apply(&mut g, &self.store, x)?;
        }
        let hidden = g.value(x).clone();
        let out = self.net.layers[idx].apply(&mut g, &self.store, x)?;
        let p = self.net.layers[idx + 1].apply(&mut g, &self.store, out)?;
        let probs = g.value(p);
        let c = self.spec.num_classes;
        let hw = hidden.row_len();
        let glen = c * hw + c;
        let mut losses = Vec::with_capacity(labels.len());
        let mut grads = vec![0.0; labels.len() * glen];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::InvalidArgument(format!("label {y} outside [0, {c})")));
            }
            let p = probs.row(i);
            losses.push(-p[y].max(crate::numcore::LOG_CLAMP).ln());
            let h = hidden.row(i);
            let out = &mut grads[i * glen..(i + 1) * glen];
            for j in 0..c {
                let delta = p[j] - if j == y { 1.0 } else { 0.0 };
                for (o, &hv) in out[j * hw..(j + 1) * hw].iter_mut().zip(h) {
                    *o = delta * hv;
                }
                out[c * hw + j] = delta;
            }
        }
        Ok((losses, Tensor::new(vec![labels.len(), glen], grads)?))
    }
}
