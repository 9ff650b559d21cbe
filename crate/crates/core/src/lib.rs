//! Engine for fully binarized (1-bit weight, 1-bit activation) diffusion models.
//!
//! - [`autograd`]: dense tensors with a reverse-mode tape and straight-through nodes.
//! - [`binarize`]: weight/activation binarizers and the scaled XNOR convolution.
//! - [`bitkernel`]: bit-packed sign tensors and XNOR/popcount inference convolution.
//! - [`diffusion`]: noise schedules, DDIM, and a small U-Net in full-precision or W1A1 form.
//! - [`tbs`]: cross-timestep feature blending with a per-step feature cache.
//! - [`spd`]: patch-wise attention distillation loss.
//! - [`efficiency`]: BOPs / FLOPs / OPs and storage accounting.

pub mod autograd;
pub mod binarize;
pub mod bitkernel;
pub mod conv;
pub mod diffusion;
pub mod efficiency;
pub mod error;
pub mod optim;
pub mod params;
pub mod spd;
pub mod tbs;
pub mod tensor;

pub use autograd::{concat, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
