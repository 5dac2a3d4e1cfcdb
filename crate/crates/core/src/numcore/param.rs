use super::tensor::Tensor;
use crate::sparse::Mask;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient buffer and optional sparsity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Present on maskable weights only; biases stay dense.
    pub mask: Option<Mask>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
            mask: None,
        }
    }

    pub fn masked(value: Tensor, mask: Mask) -> Self {
        assert_eq!(value.len(), mask.len(), "mask length must match weight size");
        let mut p = Self::new(value);
        p.mask = Some(mask);
        p.apply_mask();
        p
    }

    /// Zeroes every weight at a mask-inactive position.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &active) in self.value.data_mut().iter_mut().zip(mask.bits()) {
                if !active {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.is_active(index))
    }
}

/// Flat owner of every parameter in one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Parameter) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
