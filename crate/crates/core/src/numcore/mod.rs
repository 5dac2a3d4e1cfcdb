//! Dense tensors, reverse-mode differentiation, layers and optimizers.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod param;
pub mod schedule;
pub mod tensor;

pub use graph::{row_entropy, Graph, NodeId, Padding, LOG_CLAMP};
pub use layers::{Layer, Sequential};
pub use optim::{adam_step, sgd_step, AdamState};
pub use param::{ParamId, ParamStore, Parameter};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
