//! Small CPU convolutional-network toolkit: a U-Net generator and a patch
//! discriminator with hand-written backward passes, two optimizers, and a
//! named-parameter archive format.

pub mod archive;
pub mod error;
pub mod layers;
pub mod optim;
pub mod param;
pub mod patch;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use archive::{Archive, ArchiveTensor};
pub use error::{NnError, Result};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use param::{Param, Parameterized};
pub use patch::{PatchConfig, PatchDiscriminator, PatchTape};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{noise_rng, UNet, UNetConfig, UNetTape};
