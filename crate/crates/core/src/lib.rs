//! Face completion with an encoder/decoder generator, local and global
//! adversarial critics, and a semantic parsing regularizer.

pub mod checkpoint;
pub mod completion;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod masking;
pub mod networks;
pub mod nn;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use imaging::ImageTensor;
pub use masking::{MaskSpec, Rect};
