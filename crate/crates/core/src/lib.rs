//! Desk-scale latent-diffusion UNet compression toolkit.
//!
//! The crate bundles a small reverse-mode tensor core ([`diffkit`]), a
//! configurable miniature UNet ([`unet`]), static parameter/FLOP accounting
//! ([`profiler`]), the structural compression pipeline ([`compress`]:
//! layer pruning, block recombination with freeze masks, multi-expert
//! CondConv inheritance), DDIM sampling with multi-UNet schedules
//! ([`sampler`]), two-stage distillation ([`distill`]), a procedural dataset
//! ([`data`]) and the on-disk formats used by the command-line tool ([`io`]).

pub mod compress;
pub mod data;
pub mod diffkit;
pub mod distill;
mod error;
pub mod io;
pub mod profiler;
pub mod rng;
pub mod sampler;
pub mod unet;

pub use error::{Error, Result};
