use super::graph::{Graph, NodeId, Padding};
use super::param::{ParamId, ParamStore};
use crate::error::Result;

/// One stage of a feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear { weight: ParamId, bias: ParamId },
    Conv2d { weight: ParamId, bias: ParamId, padding: Padding },
    Conv1d { weight: ParamId, bias: ParamId, stride: usize },
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2,
    Flatten,
    /// Reshapes each sample to the given per-sample shape.
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Conv1d { .. } => "conv1d",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
            Layer::Reshape(_) => "reshape",
        }
    }

    /// Weight parameter of a parametrized layer.
    pub fn weight(&self) -> Option<ParamId> {
        match self {
            Layer::Linear { weight, .. } | Layer::Conv2d { weight, .. } | Layer::Conv1d { weight, .. } => {
                Some(*weight)
            }
            _ => None,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        match self {
            Layer::Linear { weight, bias } => {
                let (w, b) = (g.param(store, *weight)?, g.param(store, *bias)?);
                g.linear(x, w, b)
            }
            Layer::Conv2d { weight, bias, padding } => {
                let (w, b) = (g.param(store, *weight)?, g.param(store, *bias)?);
                g.conv2d(x, w, b, *padding)
            }
            Layer::Conv1d { weight, bias, stride } => {
                let (w, b) = (g.param(store, *weight)?, g.param(store, *bias)?);
                g.conv1d(x, w, b, *stride)
            }
            Layer::Relu => g.relu(x),
            Layer::Sigmoid => g.sigmoid(x),
            Layer::Softmax => g.softmax(x),
            Layer::MaxPool2 => g.max_pool2(x),
            Layer::Flatten => g.flatten(x),
            Layer::Reshape(per_sample) => {
                let mut shape = vec![g.value(x).rows()];
                shape.extend_from_slice(per_sample);
                g.reshape(x, shape)
            }
        }
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.apply(g, store, x)?;
        }
        Ok(x)
    }
}
