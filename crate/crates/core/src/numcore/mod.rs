//! Tensor math, autodiff, optimization, and the named-array container.

pub mod container;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod tensor;

pub use container::NamedArrays;
pub use optim::AdamW;
pub use param::{GradSession, Param, ParamId, ParamStore};
pub use tensor::{numel, sigmoid, softplus, Tape, Tensor};
