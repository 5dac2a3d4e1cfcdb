use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{training_loss, EntropyConfig};
use crate::models::TargetSpec;
use crate::numcore::{Graph, NodeId, ParamId, ParamStore, Sequential, Tensor};

use super::mask::Mask;

/// A weight tensor under a connectivity mask, viewed as `n_out × n_in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskableLayer {
    pub param: ParamId,
    pub n_out: usize,
    pub n_in: usize,
}

impl MaskableLayer {
    pub fn size(&self) -> usize {
        self.n_out * self.n_in
    }
}

/// A target network whose weight tensors carry binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel {
    pub spec: TargetSpec,
    pub store: ParamStore,
    pub net: Sequential,
    pub maskable: Vec<MaskableLayer>,
    /// Density budget Ω.
    pub omega: f64,
    /// Erdős–Rényi coefficient used at initialization.
    pub epsilon: f64,
}

impl SparseModel {
    pub fn num_layers(&self) -> usize {
        self.maskable.len()
    }

    pub fn mask(&self, layer: usize) -> &Mask {
        self.store
            .get(self.maskable[layer].param)
            .mask
            .as_ref()
            .expect("maskable layers carry masks")
    }

    pub(crate) fn mask_mut(&mut self, layer: usize) -> &mut Mask {
        self.store
            .get_mut(self.maskable[layer].param)
            .mask
            .as_mut()
            .expect("maskable layers carry masks")
    }

    pub fn weights(&self, layer: usize) -> &Tensor {
        &self.store.get(self.maskable[layer].param).value
    }

    pub(crate) fn weights_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.store.get_mut(self.maskable[layer].param).value
    }

    pub fn layer_active(&self, layer: usize) -> usize {
        self.mask(layer).active_count()
    }

    pub fn active_count(&self) -> usize {
        (0..self.num_layers()).map(|k| self.layer_active(k)).sum()
    }

    pub fn maskable_count(&self) -> usize {
        self.maskable.iter().map(MaskableLayer::size).sum()
    }

    /// Fraction of maskable weights that are active.
    pub fn sparsity(&self) -> f64 {
        let total = self.maskable_count();
        if total == 0 {
            0.0
        } else {
            self.active_count() as f64 / total as f64
        }
    }

    /// True when every mask-inactive weight is exactly zero.
    pub fn is_consistent(&self) -> bool {
        (0..self.num_layers()).all(|k| {
            let m = self.mask(k);
            self.weights(k)
                .data()
                .iter()
                .enumerate()
                .all(|(i, &w)| m.is_active(i) || w == 0.0)
        })
    }

    pub(crate) fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() < 2 || batch.rows() == 0 {
            return Err(Error::Shape("batch needs at least one row".into()));
        }
        if batch.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects samples shaped {:?}, got {:?}",
                self.spec.input_shape,
                &batch.shape()[1..]
            )));
        }
        Ok(())
    }

    /// Records a forward pass; the returned node holds softmax posteriors.
    pub fn forward(&self, batch: &Tensor) -> Result<(Graph, NodeId)> {
        self.check_input(batch)?;
        let mut g = Graph::new();
        let x = g.input(batch.clone())?;
        let out = self.net.forward(&mut g, &self.store, x)?;
        Ok((g, out))
    }

    /// Posteriors for every row, evaluated in chunks.
    pub fn posteriors(&self, batch: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 1024;
        if batch.rows() <= CHUNK {
            let (g, out) = self.forward(batch)?;
            return Ok(g.value(out).clone());
        }
        let mut data = Vec::with_capacity(batch.rows() * self.spec.num_classes);
        let indices: Vec<usize> = (0..batch.rows()).collect();
        for chunk in indices.chunks(CHUNK) {
            let (g, out) = self.forward(&batch.select_rows(chunk))?;
            data.extend_from_slice(g.value(out).data());
        }
        Tensor::new(vec![batch.rows(), self.spec.num_classes], data)
    }

    /// Loss on `data` plus dense gradients of every maskable weight, including
    /// inactive positions.
    pub fn dense_gradients(&self, data: &Dataset, loss: &EntropyConfig) -> Result<(f64, Vec<Tensor>)> {
        let mut scratch = self.store.clone();
        let (mut g, out) = self.forward(&data.features)?;
        let l = training_loss(&mut g, out, &data.labels, loss)?;
        let value = g.value(l).item();
        g.backward(l, &mut scratch)?;
        let grads = self
            .maskable
            .iter()
            .map(|m| scratch.get(m.param).grad.clone())
            .collect();
        Ok((value, grads))
    }
}
