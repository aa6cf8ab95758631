//! Attention distillation for example-based image synthesis.
//!
//! The crate computes the attention distillation (AD) loss inside the
//! self-attention layers of a denoising backbone and uses it two ways:
//! as the objective of a direct latent optimization ([`optimize`]) and as an
//! Adam-managed guidance term inside DDIM sampling ([`sample`]).
//!
//! Everything here is `no_std` + `alloc`. File formats, checkpoints and the
//! command-line front end live in the `attndistill` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod attention;
pub mod backbone;
pub mod error;
pub mod graph;
pub mod image;
pub mod optimize;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod synthetic;
pub mod tensor;

pub use attention::{
    ad_loss, attention, build_guidance_mask, content_loss, masked_ad_loss, total_loss,
    AttentionTaps, GuidanceMask, LayerGrid, LayerMask, LayerSelector, LayerTap,
};
pub use backbone::{Backbone, Codec, Conditioning, Denoiser, LatentImage, ToyConfig, ToyUnet};
pub use error::{Error, Result};
pub use graph::{Gradients, Tape, Var};
pub use image::{Image, LabelMap};
pub use optimize::{
    content_preserving_optimize, controlled_texture_optimize, region_fill, texture_optimize,
    timestep_schedule, OptimizeConfig, OptimizeOutcome,
};
pub use sample::{
    adain, ddim_sample, expand_texture, guided_sample, sdedit_init, tiled_predict, GuidedSampler,
    SampleOutcome, SamplerConfig, TilingSpec,
};
pub use schedule::{add_noise, ddim_step, DiffusionSchedule};
pub use tensor::Tensor;
