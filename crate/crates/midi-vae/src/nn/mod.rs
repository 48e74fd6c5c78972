//! Self-contained differentiable compute core: tensors, a reverse-mode
//! tape, GRU cells, losses, the ADAM optimizer and gradient checking.
//! No BLAS, no GPU — just the fixed set of operations this model needs,
//! deterministic under a seed.

pub mod func;
pub mod gradcheck;
pub mod gru;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use func::{argmax, cross_entropy, kl_diag_gaussian, mse, reparameterize, softmax};
pub use gradcheck::{grad_check, relative_error};
pub use gru::{gru_stack_step, gru_step, GruLayerParams};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Activation, Grads, NodeId, Tape};
pub use tensor::Tensor;
