//! Input-scaled EDM diffusion for redundant (video) data.
//!
//! The crate implements a rewritten variance-exploding diffusion framework
//! in which the clean signal is divided by an input scaling factor
//! `sigma_in` before noise is applied, keeping the signal-to-noise ratio of
//! block-averaged video identical to the image setting the original EDM
//! parameters were designed for. On top of it sit:
//!
//! - [`tensor`]: a minimal dense tensor engine with reverse-mode
//!   differentiation and a finite-difference oracle,
//! - [`diffusion`]: both framework variants (plain EDM and the input-scaled
//!   form), their scaling functions, losses and recovery identities,
//! - [`snr`]: Monte-Carlo reproduction of the block-averaging SNR analysis,
//! - [`fit`]: the FIT denoiser (patch tokens, groupwise read/write
//!   cross-attention against latent tokens, global latent self-attention),
//! - [`sampler`]: the deterministic second-order sampler with input-scaling
//!   corrections, classifier-free guidance, dynamic thresholding and
//!   reconstruction-guided hierarchical generation,
//! - [`train`]: a desk-scale joint image/video training loop over a
//!   procedural moving-sprite dataset,
//! - [`io`]: run configuration, checkpoint and media serialization,
//! - [`verify`]: the executable identity suite behind `snapdiff verify`.

pub mod diffusion;
pub mod error;
pub mod fit;
pub mod io;
pub mod sampler;
pub mod snr;
pub mod tensor;
pub mod threads;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Gradients, Tensor};
