//! Denoising backbones behind one interface.
//!
//! A [`Backbone`] bundles a noise predictor ([`Denoiser`]), its latent
//! [`Codec`] and the [`DiffusionSchedule`]. Forward passes run on a
//! caller-owned [`Tape`], so attention taps are plain return values rather
//! than hook state and a pass never leaks features into another.

mod codec;
mod toy;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

pub use codec::{Codec, DecoderFinetune, DecoderWeights};
pub use toy::{BlockWeights, ToyConfig, ToyUnet, ToyWeights};

use crate::attention::{AttentionTaps, LayerGrid, LayerSelector, TapVars};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::image::Image;
use crate::schedule::{self, DiffusionSchedule};
use crate::tensor::Tensor;

/// Text prompt plus an optional structural condition (depth, edges, ...)
/// given at latent resolution as `[channels, h, w]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    pub prompt: &'a str,
    pub structure: Option<&'a Tensor>,
}

impl<'a> Conditioning<'a> {
    pub fn prompt(prompt: &'a str) -> Self {
        Self {
            prompt,
            structure: None,
        }
    }

    pub fn unconditional() -> Self {
        Self::default()
    }
}

/// Output of one denoiser pass.
pub struct DenoiserOutput {
    /// Predicted noise, same shape as the input latent.
    pub noise: Var,
    /// Features of the requested layers, in increasing layer order.
    pub taps: Vec<TapVars>,
}

/// A noise predictor `ε_θ(z_t, t, y)` with a registry of self-attention layers.
pub trait Denoiser: Send + Sync {
    fn latent_channels(&self) -> usize;

    /// Number of self-attention layers, ids `0..n`.
    fn attention_layers(&self) -> usize;

    /// Downsampling of `layer`'s token grid relative to the latent grid.
    fn layer_stride(&self, layer: usize) -> usize;

    fn accepts_condition(&self) -> bool {
        false
    }

    /// Runs the network on `z` (`[channels, h, w]`), returning predicted noise
    /// and the taps of `tap_layers`.
    fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        t: usize,
        cond: &Conditioning<'_>,
        tap_layers: &[usize],
    ) -> Result<DenoiserOutput>;

    /// Digest of the network weights; equal digests mean bitwise-equal weights.
    fn weights_digest(&self) -> u64 {
        0
    }
}

/// A latent tensor `[channels, h, w]` plus the codec parameters it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    tensor: Tensor,
    spatial_factor: usize,
    scaling: f64,
}

impl LatentImage {
    pub fn new(tensor: Tensor, spatial_factor: usize, scaling: f64) -> Result<Self> {
        tensor.dims3()?;
        Ok(Self {
            tensor,
            spatial_factor,
            scaling,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// Spatial size `(h, w)` in latent units.
    pub fn hw(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }

    pub fn spatial_factor(&self) -> usize {
        self.spatial_factor
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    /// Same codec metadata, new values.
    pub fn with_tensor(&self, tensor: Tensor) -> Result<Self> {
        Self::new(tensor, self.spatial_factor, self.scaling)
    }
}

pub struct Backbone {
    denoiser: Box<dyn Denoiser>,
    codec: Codec,
    schedule: DiffusionSchedule,
    taps: Option<Vec<usize>>,
    forward_passes: AtomicUsize,
}

impl Backbone {
    pub fn new(denoiser: Box<dyn Denoiser>, codec: Codec, schedule: DiffusionSchedule) -> Result<Self> {
        if denoiser.attention_layers() == 0 {
            return Err(Error::config("backbone", "no self-attention layers registered"));
        }
        if codec.latent_channels() != denoiser.latent_channels() {
            return Err(Error::config(
                "codec",
                format!(
                    "codec produces {} channels, denoiser expects {}",
                    codec.latent_channels(),
                    denoiser.latent_channels()
                ),
            ));
        }
        Ok(Self {
            denoiser,
            codec,
            schedule,
            taps: None,
            forward_passes: AtomicUsize::new(0),
        })
    }

    /// The seeded toy backbone, with taps registered for the default selector.
    pub fn toy(config: ToyConfig) -> Result<Self> {
        let schedule = DiffusionSchedule::scaled_linear(config.t_max)?;
        let codec = Codec::toy(config.seed, config.codec_factor, config.latent_channels)?;
        let unet = ToyUnet::new(config)?;
        let mut backbone = Self::new(Box::new(unet), codec, schedule)?;
        backbone.register_taps(&LayerSelector::default())?;
        Ok(backbone)
    }

    pub fn register_taps(&mut self, selector: &LayerSelector) -> Result<()> {
        self.taps = Some(selector.resolve(self.denoiser.attention_layers())?);
        Ok(())
    }

    pub fn tapped_layers(&self) -> Result<&[usize]> {
        self.taps.as_deref().ok_or(Error::UnregisteredTaps)
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        self.denoiser.as_ref()
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    /// Swaps in another codec with the same latent layout (e.g. a fine-tuned decoder).
    pub fn set_codec(&mut self, codec: Codec) -> Result<()> {
        if codec.latent_channels() != self.codec.latent_channels() || codec.factor() != self.codec.factor() {
            return Err(Error::config("codec", "replacement codec changes the latent layout"));
        }
        self.codec = codec;
        Ok(())
    }

    /// Number of denoiser passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Token grid of `layer` for a latent of spatial size `latent_hw`.
    pub fn layer_grid(&self, layer: usize, latent_hw: (usize, usize)) -> Result<(usize, usize)> {
        let s = self.denoiser.layer_stride(layer);
        if latent_hw.0 % s != 0 || latent_hw.1 % s != 0 {
            return Err(Error::Resolution {
                height: latent_hw.0,
                width: latent_hw.1,
                factor: s,
            });
        }
        Ok((latent_hw.0 / s, latent_hw.1 / s))
    }

    /// Source/target token grids of every tapped layer.
    pub fn layer_grids(&self, source_hw: (usize, usize), target_hw: (usize, usize)) -> Result<Vec<LayerGrid>> {
        self.tapped_layers()?
            .iter()
            .map(|&l| {
                Ok(LayerGrid {
                    source: self.layer_grid(l, source_hw)?,
                    target: self.layer_grid(l, target_hw)?,
                })
            })
            .collect()
    }

    pub fn encode(&self, image: &Image) -> Result<LatentImage> {
        self.codec.encode(image)
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Image> {
        self.codec.decode(latent)
    }

    pub fn add_noise(&self, z0: &LatentImage, t: usize, noise: &Tensor) -> Result<LatentImage> {
        z0.with_tensor(schedule::add_noise(z0.tensor(), t, noise, &self.schedule)?)
    }

    /// One counted denoiser pass on `tape`. With `with_taps`, the registered
    /// layers are returned as gradient-carrying taps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        t: usize,
        cond: &Conditioning<'_>,
        with_taps: bool,
    ) -> Result<DenoiserOutput> {
        self.schedule.alpha_bar(t)?;
        if cond.structure.is_some() && !self.denoiser.accepts_condition() {
            return Err(Error::ConditionUnsupported);
        }
        let layers: &[usize] = if with_taps { self.tapped_layers()? } else { &[] };
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        self.denoiser.forward(tape, z, t, cond, layers)
    }

    /// Taps of `z` (already on `tape`) for the registered layers.
    pub fn extract_on(&self, tape: &mut Tape, z: Var, t: usize, prompt: &str) -> Result<Vec<TapVars>> {
        Ok(self.forward(tape, z, t, &Conditioning::prompt(prompt), true)?.taps)
    }

    /// Detached taps of one forward pass; the predicted noise is discarded.
    pub fn extract(&self, latent: &LatentImage, t: usize, prompt: &str) -> Result<AttentionTaps> {
        let mut tape = Tape::new();
        let z = tape.constant(latent.tensor().clone());
        let taps = self.extract_on(&mut tape, z, t, prompt)?;
        AttentionTaps::detach(&tape, &taps)
    }

    fn predict_once(&self, z: &Tensor, t: usize, cond: &Conditioning<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, zv, t, cond, false)?;
        Ok(tape.value(out.noise).clone())
    }

    /// Noise prediction with classifier-free guidance:
    /// `ε_u + s·(ε_c − ε_u)` for a non-empty prompt and `s ≠ 1`.
    pub fn predict_noise(
        &self,
        z: &LatentImage,
        t: usize,
        prompt: &str,
        cfg_scale: f64,
        condition: Option<&Tensor>,
    ) -> Result<Tensor> {
        if condition.is_some() && !self.denoiser.accepts_condition() {
            return Err(Error::ConditionUnsupported);
        }
        let uncond = Conditioning {
            prompt: "",
            structure: condition,
        };
        if prompt.is_empty() {
            return self.predict_once(z.tensor(), t, &uncond);
        }
        if !(cfg_scale >= 1.0) {
            return Err(Error::config("cfg_scale", format!("must be >= 1 with a prompt, got {cfg_scale}")));
        }
        let cond = Conditioning {
            prompt,
            structure: condition,
        };
        let eps_c = self.predict_once(z.tensor(), t, &cond)?;
        if cfg_scale == 1.0 {
            return Ok(eps_c);
        }
        let eps_u = self.predict_once(z.tensor(), t, &uncond)?;
        guidance_mix(&eps_u, &eps_c, cfg_scale)
    }
}

/// `uncond + scale · (cond − uncond)`.
pub fn guidance_mix(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    uncond.zip_map(cond, |u, c| u + scale * (c - u))
}
