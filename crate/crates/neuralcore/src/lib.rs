//! Minimal dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Forward computations are recorded on a [`Graph`]; every operation stores
//! the inputs and cached intermediates it needs to propagate adjoints. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and leaves
//! gradients on every leaf that requires them. Learnable tensors live in a
//! [`ParamSet`] and are bound into a graph with [`Graph::param`]; after the
//! backward pass [`Graph::export_grads`] folds leaf gradients back into the set
//! so that [`Adam`] can update it.
//!
//! Only the kernels needed by the candlestick encoders and the Q-head are
//! provided: linear, batch normalization, valid 1-D convolution, GRU cell,
//! element-wise activations, and the Huber loss.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, Section};
pub use graph::{Graph, Var};
pub use layers::{BatchNorm1d, Conv1d, GruCell, Linear, Mode, RunningStats};
pub use optim::{Adam, AdamConfig};
pub use tensor::{ParamSet, Tensor};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("batch normalization in train mode needs at least 2 rows, got {batch}")]
    DegenerateBatch { batch: usize },

    #[error("{op}: sequence of length {len} is shorter than kernel of size {kernel}")]
    InsufficientLength {
        op: &'static str,
        len: usize,
        kernel: usize,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("parameter `{name}` has no populated gradient")]
    MissingGrad { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },

    #[error("duplicate parameter `{name}`")]
    DuplicateParam { name: String },

    #[error("parameter sets are not sync-compatible: {detail}")]
    Incompatible { detail: String },

    #[error("invalid hyperparameter {name} = {value}")]
    Hyperparameter { name: &'static str, value: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
