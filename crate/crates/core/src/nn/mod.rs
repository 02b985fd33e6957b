//! Minimal CPU neural-network engine: NCHW tensors, layers with explicit
//! backward passes, a taped sequential container and Adam.

pub mod init;
pub mod ops;
pub mod optim;
pub mod param;
pub mod sequential;
pub mod tensor;

pub use ops::{BatchNorm2d, Conv2d, Linear, Switches};
pub use optim::{Adam, AdamConfig};
pub use param::{digest_params, Param};
pub use sequential::{BnMode, Op, Sequential};
pub use tensor::Tensor;
