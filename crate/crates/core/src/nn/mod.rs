//! Minimal deterministic training core: tensors, a small convolutional
//! classifier, softmax cross-entropy with analytic gradients, and Adam.

mod model;
mod optim;
mod spec;
mod tensor;

pub use model::{forward, forward_with, loss_and_grad, loss_and_grad_with, predict_proba, softmax};
pub use optim::{adam_step, AdamState, LrSchedule, BETA1, BETA2, EPSILON};
pub use spec::{Layer, ModelSpec, ParamVector, Shape3, PARAM_MAGIC, PARAM_VERSION};
pub use tensor::Tensor;
