use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{AdamState, Graph, Layer, NodeId, Parameter, ParamStore, Sequential, Tensor};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    #[default]
    Blackbox,
    Whitebox,
}

/// Hidden sizes of the attack network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerWidths {
    pub stream_hidden: usize,
    pub embedding: usize,
    pub fusion_hidden: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Standard deviation of the normal weight initializer.
    pub init_std: f64,
}

impl Default for AttackerWidths {
    fn default() -> Self {
        Self {
            stream_hidden: 128,
            embedding: 64,
            fusion_hidden: 256,
            conv_filters: 8,
            conv_kernel: 5,
            conv_stride: 3,
            init_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub mode: AttackMode,
    pub num_classes: usize,
    /// Flattened last-layer gradient length; white-box only.
    pub gradient_len: usize,
    pub widths: AttackerWidths,
}

impl AttackerSpec {
    pub fn blackbox(num_classes: usize) -> Self {
        Self {
            mode: AttackMode::Blackbox,
            num_classes,
            gradient_len: 0,
            widths: AttackerWidths::default(),
        }
    }

    pub fn whitebox(num_classes: usize, gradient_len: usize) -> Self {
        Self {
            mode: AttackMode::Whitebox,
            num_classes,
            gradient_len,
            widths: AttackerWidths::default(),
        }
    }

    /// Width of one attack example: posteriors and one-hot label, plus the
    /// loss and the last-layer gradient in white-box mode.
    pub fn feature_len(&self) -> usize {
        match self.mode {
            AttackMode::Blackbox => 2 * self.num_classes,
            AttackMode::Whitebox => 2 * self.num_classes + 1 + self.gradient_len,
        }
    }
}

/// Which slice of an attack example feeds a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamInput {
    Posteriors { ranked: bool },
    Label,
    Loss,
    Gradient,
}

/// Membership classifier: per-stream embeddings fused into one probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Attacker {
    pub spec: AttackerSpec,
    pub store: ParamStore,
    pub streams: Vec<(StreamInput, Sequential)>,
    pub fusion: Sequential,
    pub adam: AdamState,
}

struct Builder<'a> {
    store: ParamStore,
    normal: Normal<f64>,
    rng: &'a mut StreamRng,
}

impl Builder<'_> {
    fn weights(&mut self, shape: &[usize]) -> crate::numcore::ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(self.rng)).collect();
        self.store
            .push(Parameter::new(Tensor::new(shape.to_vec(), data).expect("finite init")))
    }

    fn linear(&mut self, n_out: usize, n_in: usize) -> Layer {
        let weight = self.weights(&[n_out, n_in]);
        let bias = self.store.push(Parameter::new(Tensor::zeros(&[n_out])));
        Layer::Linear { weight, bias }
    }

    /// `n_in → hidden… → out`, ReLU after every layer.
    fn mlp(&mut self, n_in: usize, widths: &[usize]) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut width = n_in;
        for &w in widths {
            layers.push(self.linear(w, width));
            layers.push(Layer::Relu);
            width = w;
        }
        layers
    }
}

fn build(spec: &AttackerSpec, rng: &mut StreamRng) -> Result<Attacker> {
    let w = &spec.widths;
    if spec.num_classes < 2 {
        return Err(Error::InvalidArgument("attacker needs at least 2 classes".into()));
    }
    if !(w.init_std > 0.0) || w.stream_hidden == 0 || w.embedding == 0 || w.fusion_hidden == 0 {
        return Err(Error::InvalidArgument("attacker widths must be positive".into()));
    }
    let normal = Normal::new(0.0, w.init_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut b = Builder {
        store: ParamStore::new(),
        normal,
        rng,
    };
    let c = spec.num_classes;
    let mut streams = Vec::new();
    let ranked = spec.mode == AttackMode::Whitebox;
    streams.push((
        StreamInput::Posteriors { ranked },
        Sequential::new(b.mlp(c, &[w.stream_hidden, w.embedding])),
    ));
    if spec.mode == AttackMode::Whitebox {
        streams.push((StreamInput::Loss, Sequential::new(b.mlp(1, &[w.embedding]))));
        let g = spec.gradient_len;
        if w.conv_kernel == 0 || w.conv_stride == 0 || w.conv_filters == 0 {
            return Err(Error::InvalidArgument("gradient stream convolution must be non-empty".into()));
        }
        if g < w.conv_kernel {
            return Err(Error::InvalidArgument(format!(
                "gradient length {g} shorter than the kernel size {}",
                w.conv_kernel
            )));
        }
        let steps = (g - w.conv_kernel) / w.conv_stride + 1;
        let weight = b.weights(&[w.conv_filters, 1, w.conv_kernel]);
        let bias = b.store.push(Parameter::new(Tensor::zeros(&[w.conv_filters])));
        let mut layers = vec![
            Layer::Reshape(vec![1, g]),
            Layer::Conv1d {
                weight,
                bias,
                stride: w.conv_stride,
            },
            Layer::Relu,
            Layer::Flatten,
        ];
        layers.extend(b.mlp(w.conv_filters * steps, &[w.embedding]));
        streams.push((StreamInput::Gradient, Sequential::new(layers)));
    }
    streams.push((StreamInput::Label, Sequential::new(b.mlp(c, &[w.stream_hidden, w.embedding]))));

    let mut fusion = b.mlp(streams.len() * w.embedding, &[w.fusion_hidden, w.embedding]);
    fusion.push(b.linear(1, w.embedding));
    fusion.push(Layer::Sigmoid);

    let store = b.store;
    let adam = AdamState::new(&store);
    Ok(Attacker {
        spec: spec.clone(),
        store,
        streams,
        fusion: Sequential::new(fusion),
        adam,
    })
}

/// Three-stream attacker over posteriors and the one-hot label.
pub fn build_blackbox_attacker(spec: &AttackerSpec, rng: &mut StreamRng) -> Result<Attacker> {
    if spec.mode != AttackMode::Blackbox {
        return Err(Error::Attack("black-box builder given a white-box spec".into()));
    }
    build(spec, rng)
}

/// Five-stream attacker that also sees the loss and last-layer gradient.
pub fn build_whitebox_attacker(spec: &AttackerSpec, rng: &mut StreamRng) -> Result<Attacker> {
    if spec.mode != AttackMode::Whitebox {
        return Err(Error::Attack("white-box builder given a black-box spec".into()));
    }
    if spec.gradient_len == 0 {
        return Err(Error::InvalidArgument("white-box attacker needs a gradient length".into()));
    }
    build(spec, rng)
}

pub fn build_attacker(spec: &AttackerSpec, rng: &mut StreamRng) -> Result<Attacker> {
    match spec.mode {
        AttackMode::Blackbox => build_blackbox_attacker(spec, rng),
        AttackMode::Whitebox => build_whitebox_attacker(spec, rng),
    }
}

/// Sorts each row in descending order.
pub fn rank_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let w = t.row_len();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        row.sort_by(|a, b| b.total_cmp(a));
    }
    out
}

impl Attacker {
    /// Input handed to one stream.
    pub fn stream_input(&self, input: StreamInput, features: &Tensor) -> Tensor {
        let c = self.spec.num_classes;
        match input {
            StreamInput::Posteriors { ranked } => {
                let p = features.columns(0, c);
                if ranked {
                    rank_rows(&p)
                } else {
                    p
                }
            }
            StreamInput::Label => features.columns(c, 2 * c),
            StreamInput::Loss => features.columns(2 * c, 2 * c + 1),
            StreamInput::Gradient => features.columns(2 * c + 1, features.row_len()),
        }
    }

    /// Records the forward pass; the output node is `[N, 1]` in (0, 1).
    pub fn forward(&self, features: &Tensor) -> Result<(Graph, NodeId)> {
        if features.shape().len() != 2 || features.rows() == 0 || features.row_len() != self.spec.feature_len() {
            return Err(Error::Shape(format!(
                "attacker expects [N, {}] features, got {:?}",
                self.spec.feature_len(),
                features.shape()
            )));
        }
        let mut g = Graph::new();
        let mut embeddings = Vec::with_capacity(self.streams.len());
        for (input, net) in &self.streams {
            let x = g.input(self.stream_input(*input, features))?;
            embeddings.push(net.forward(&mut g, &self.store, x)?);
        }
        let joined = g.concat(&embeddings)?;
        let out = self.fusion.forward(&mut g, &self.store, joined)?;
        Ok((g, out))
    }

    /// Membership probabilities, evaluated in chunks.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        const CHUNK: usize = 2048;
        let mut out = Vec::with_capacity(features.rows());
        let indices: Vec<usize> = (0..features.rows()).collect();
        for chunk in indices.chunks(CHUNK) {
            let part = if chunk.len() == features.rows() {
                features.clone()
            } else {
                features.select_rows(chunk)
            };
            let (g, node) = self.forward(&part)?;
            out.extend_from_slice(g.value(node).data());
        }
        Ok(out)
    }
}
