//! Minimal reverse-mode autodiff over dense f64 matrices, with the layers,
//! optimiser, gradient checker and checkpoint codec built on it.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic,
    CheckpointMeta, TensorEntry, CHECKPOINT_SCHEMA,
};
pub use gradcheck::{
    check_gradients, finite_diff_check, relative_error, GradCheckReport, ParamCheck,
};
pub use layers::{BiGru, Embedding, GruCell, Linear, Mlp, MultiHeadAttention, SetPooler};
pub use optim::{Adam, LinearSchedule};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
