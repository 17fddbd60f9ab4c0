//! Numeric substrate: tensors, the reverse-mode tape, coordinate MLPs,
//! the optimizer, and checkpoint serialization.

pub mod checkpoint;
pub mod fast_math;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{numeric_gradient, sigmoid_scalar, softplus_scalar, Gradients, GraphError, NodeId, Tape};
pub use mlp::{Activation, BoundMlp, EncodingSpec, Mlp, MlpTrace};
pub use optim::{Adam, LrSchedule, OptimError};
pub use tensor::Tensor;
