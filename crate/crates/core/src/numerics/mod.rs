//! Dense `f64` tensors, a reverse-mode tape, parameters, optimizers and the
//! checkpoint container.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, Checkpoint};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, RecordHeader};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{
    truncated_normal, Linear, Norm, ParamGrads, ParamId, ParamStore, Parameter, Session,
    LAYER_NORM_EPS,
};
pub use tape::{softmax_slice, Gradients, Tape, Var};
pub use tensor::Tensor;

