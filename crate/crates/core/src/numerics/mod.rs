//! Array engine: tensors, the differentiation tape, and the optimizer.

pub mod adamw;
pub mod gradcheck;
pub mod kernels;
pub mod stft;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use kernels::{BiquadSection, ResampleMap};
pub use stft::StftKernel;
pub use tape::{BnStats, OpKind, Tape, Var, BCE_CLAMP, BN_EPS};
pub use tensor::Tensor;
