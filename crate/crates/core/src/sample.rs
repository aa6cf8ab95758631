//! DDIM sampling steered by the attention distillation loss.
//!
//! Each DDIM step is followed by an optional AdaIN modulation toward the
//! noised style latent and `M` Adam updates of the latent on the AD loss.
//! The same loop runs over oversized latents by fusing per-window noise
//! predictions and averaging per-window AD losses.

use alloc::format;
use alloc::vec::Vec;

use crate::adam::{Adam, AdamConfig};
use crate::attention::{ad_loss_on, content_loss_on, AttentionTaps};
use crate::backbone::{Backbone, LatentImage};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::image::Image;
use crate::rng::{self, Stream};
use crate::schedule::ddim_step;
use crate::tensor::Tensor;

/// Overlapping-window layout for oversized latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TilingSpec {
    /// Square window side in latent units.
    pub window: usize,
    /// Offset between neighbouring windows; half the window when `None`.
    pub stride: Option<usize>,
    /// Upper bound on windows per step.
    pub max_windows: usize,
}

impl TilingSpec {
    pub const DEFAULT_MAX_WINDOWS: usize = 1024;

    pub fn new(window: usize) -> Self {
        Self {
            window,
            stride: None,
            max_windows: Self::DEFAULT_MAX_WINDOWS,
        }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Self {
            stride: Some(stride),
            ..self
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }
}

/// A `height × width` latent window at `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Window {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

fn axis_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + window < len {
        out.push(pos);
        pos += stride;
    }
    out.push(len - window);
    out
}

/// Windows covering every position of a `latent_hw` grid. The last window on
/// each axis is aligned to the far edge.
pub fn tile_windows(latent_hw: (usize, usize), spec: &TilingSpec) -> Result<Vec<Window>> {
    let (h, w) = latent_hw;
    let stride = spec.stride();
    if spec.window == 0 || stride == 0 || stride > spec.window {
        return Err(Error::config(
            "tiling",
            format!("need 0 < stride ({stride}) <= window ({})", spec.window),
        ));
    }
    if spec.window > h || spec.window > w {
        return Err(Error::config(
            "tiling.window",
            format!("window {} exceeds latent {h}x{w}", spec.window),
        ));
    }
    let count = |s: usize| axis_offsets(h, spec.window, s).len() * axis_offsets(w, spec.window, s).len();
    let n = count(stride);
    if n > spec.max_windows {
        let suggested_stride = (stride..=spec.window)
            .find(|&s| count(s) <= spec.max_windows)
            .unwrap_or(spec.window);
        return Err(Error::TooManyWindows {
            windows: n,
            limit: spec.max_windows,
            suggested_stride,
        });
    }
    let ys = axis_offsets(h, spec.window, stride);
    let xs = axis_offsets(w, spec.window, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| Window {
                y,
                x,
                height: spec.window,
                width: spec.window,
            })
        })
        .collect())
}

/// Noise prediction fused over overlapping windows with uniform weights.
pub fn tiled_predict(
    backbone: &Backbone,
    z: &LatentImage,
    t: usize,
    prompt: &str,
    cfg_scale: f64,
    tiling: &TilingSpec,
) -> Result<Tensor> {
    let windows = tile_windows(z.hw(), tiling)?;
    predict_windows(backbone, z, t, prompt, cfg_scale, None, &windows)
}

fn is_whole(windows: &[Window], hw: (usize, usize)) -> bool {
    windows.len() == 1 && windows[0].height == hw.0 && windows[0].width == hw.1
}

fn predict_windows(
    backbone: &Backbone,
    z: &LatentImage,
    t: usize,
    prompt: &str,
    cfg_scale: f64,
    condition: Option<&Tensor>,
    windows: &[Window],
) -> Result<Tensor> {
    let (h, w) = z.hw();
    if windows.is_empty() || is_whole(windows, (h, w)) {
        return backbone.predict_noise(z, t, prompt, cfg_scale, condition);
    }
    if condition.is_some() {
        return Err(Error::config("tiling", "structure conditions are not tiled"));
    }
    let c = z.channels();
    let mut sum = Tensor::zeros([c, h, w]);
    let mut count = alloc::vec![0u32; h * w];
    for win in windows {
        let tile = z.with_tensor(z.tensor().crop(win.y, win.x, win.height, win.width)?)?;
        let eps = backbone.predict_noise(&tile, t, prompt, cfg_scale, None)?;
        let e = eps.data();
        let s = sum.data_mut();
        for ch in 0..c {
            for y in 0..win.height {
                for x in 0..win.width {
                    s[ch * h * w + (win.y + y) * w + win.x + x] += e[(ch * win.height + y) * win.width + x];
                }
            }
        }
        for y in 0..win.height {
            for x in 0..win.width {
                count[(win.y + y) * w + win.x + x] += 1;
            }
        }
    }
    let s = sum.data_mut();
    for (i, v) in s.iter_mut().enumerate() {
        *v /= count[i % (h * w)] as f64;
    }
    Ok(sum)
}

/// Per-channel mean and population standard deviation of a `[c, h, w]` tensor.
pub fn channel_stats(z: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (c, h, w) = z.dims3()?;
    let n = (h * w) as f64;
    Ok(z.data()
        .chunks(h * w)
        .take(c)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, libm::sqrt(var))
        })
        .collect())
}

/// Per-channel mean/std modulation of `z` toward `reference`. Spatial sizes
/// may differ. A constant channel of `z` becomes the reference mean.
pub fn adain(z: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let (c, h, w) = z.dims3()?;
    if reference.dims3()?.0 != c {
        return Err(Error::shape(
            "adain",
            format!("{c} vs {} channels", reference.shape()[0]),
        ));
    }
    let src = channel_stats(z)?;
    let dst = channel_stats(reference)?;
    let mut out = z.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let ((mu, sd), (mu_r, sd_r)) = (src[ch], dst[ch]);
        for v in chunk.iter_mut() {
            *v = if sd > 0.0 { (*v - mu) / sd * sd_r + mu_r } else { mu_r };
        }
    }
    Ok(out)
}

/// Largest per-channel gap in mean or std between `z` and `reference`,
/// skipping channels of `z` that are constant.
pub fn adain_deviation(z: &Tensor, reference: &Tensor) -> Result<f64> {
    let a = channel_stats(z)?;
    let b = channel_stats(reference)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(&(m, s), &(mr, sr))| {
            let dm = libm::fabs(m - mr);
            if s > 0.0 || sr == 0.0 {
                dm.max(libm::fabs(s - sr))
            } else {
                dm
            }
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Adam updates per DDIM step (`M`).
    pub inner_steps: usize,
    pub lr: f64,
    /// Weight of the query content loss when a content image is supplied.
    pub content_weight: f64,
    /// Start from a noised layout at `round(s·T)`.
    pub sdedit_strength: Option<f64>,
    pub tiling: Option<TilingSpec>,
    pub seed: u64,
    pub adain: bool,
    /// Recreate the inner Adam state at every DDIM step. When `false` one
    /// optimizer carries its moments across the whole trajectory.
    pub reset_adam_per_step: bool,
    /// Re-evaluate the AD loss after each inner loop.
    pub trace_losses: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::text_to_image()
    }
}

impl SamplerConfig {
    pub fn text_to_image() -> Self {
        Self {
            steps: 50,
            cfg_scale: 7.0,
            inner_steps: 2,
            lr: 0.015,
            content_weight: 0.0,
            sdedit_strength: None,
            tiling: None,
            seed: 0,
            adain: true,
            reset_adam_per_step: true,
            trace_losses: false,
        }
    }

    pub fn expansion(window: usize) -> Self {
        Self {
            cfg_scale: 1.0,
            inner_steps: 3,
            lr: 0.05,
            tiling: Some(TilingSpec::new(window)),
            ..Self::text_to_image()
        }
    }

    pub fn layout_texture() -> Self {
        Self {
            cfg_scale: 1.0,
            lr: 0.05,
            sdedit_strength: Some(0.6),
            ..Self::text_to_image()
        }
    }

    /// Sampling with every guidance feature off.
    pub fn plain(steps: usize, cfg_scale: f64, seed: u64) -> Self {
        Self {
            steps,
            cfg_scale,
            inner_steps: 0,
            adain: false,
            seed,
            ..Self::text_to_image()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.content_weight >= 0.0) || !self.content_weight.is_finite() {
            return Err(Error::config(
                "content_weight",
                format!("must be >= 0, got {}", self.content_weight),
            ));
        }
        if let Some(s) = self.sdedit_strength {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::config("sdedit_strength", format!("must lie in (0, 1), got {s}")));
            }
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.adain || self.inner_steps > 0
    }
}

/// Diagnostics for one DDIM step.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    /// AD loss at the first inner update.
    pub ad_before: Option<f64>,
    /// AD loss after the last inner update (with `trace_losses`).
    pub ad_after: Option<f64>,
    /// Statistic gap left by AdaIN (see [`adain_deviation`]).
    pub adain_deviation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub latent: LatentImage,
    pub steps: Vec<StepRecord>,
    pub t_start: usize,
    pub windows: Vec<Window>,
}

impl SampleOutcome {
    /// Steps where the inner loop raised the AD loss by more than `tol`.
    pub fn loss_increases(&self, tol: f64) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|r| match (r.ad_before, r.ad_after) {
                (Some(b), Some(a)) if a > b + tol => Some(r.step),
                _ => None,
            })
            .collect()
    }
}

/// Seeded Gaussian start latent.
pub fn initial_latent(backbone: &Backbone, latent_hw: (usize, usize), seed: u64) -> Result<LatentImage> {
    let c = backbone.codec().latent_channels();
    let z = rng::normal(&mut rng::stream(seed, Stream::InitialLatent), [c, latent_hw.0, latent_hw.1]);
    LatentImage::new(z, backbone.codec().factor(), backbone.codec().scaling())
}

/// Encodes `layout` and noises it to `t_start = round(s·T)`.
pub fn sdedit_init(backbone: &Backbone, layout: &Image, strength: f64, seed: u64) -> Result<(LatentImage, usize)> {
    if !(strength > 0.0 && strength < 1.0) {
        return Err(Error::config(
            "sdedit_strength",
            format!("must lie in (0, 1), got {strength}"),
        ));
    }
    let t_start = libm::round(strength * backbone.schedule().t_max() as f64) as usize;
    let z0 = backbone.encode(layout)?;
    let eps = rng::normal(&mut rng::stream(seed, Stream::SdEdit), z0.tensor().shape().to_vec());
    Ok((backbone.add_noise(&z0, t_start, &eps)?, t_start))
}

/// Deterministic DDIM from seeded noise with classifier-free guidance only.
/// Guidance fields of `cfg` are ignored; tiling is honoured.
pub fn ddim_sample(
    backbone: &Backbone,
    prompt: &str,
    latent_hw: (usize, usize),
    cfg: &SamplerConfig,
) -> Result<LatentImage> {
    let mut z = initial_latent(backbone, latent_hw, cfg.seed)?;
    for (t, t_prev) in backbone.schedule().ddim_timesteps(cfg.steps) {
        let eps = match &cfg.tiling {
            Some(spec) => tiled_predict(backbone, &z, t, prompt, cfg.cfg_scale, spec)?,
            None => backbone.predict_noise(&z, t, prompt, cfg.cfg_scale, None)?,
        };
        z = z.with_tensor(ddim_step(z.tensor(), t, t_prev, &eps, backbone.schedule())?)?;
    }
    Ok(z)
}

/// Builder for one guided sampling run.
pub struct GuidedSampler<'a> {
    backbone: &'a Backbone,
    cfg: &'a SamplerConfig,
    prompt: &'a str,
    style: Option<&'a Image>,
    content: Option<&'a Image>,
    layout: Option<&'a Image>,
    latent_hw: Option<(usize, usize)>,
    condition: Option<&'a Tensor>,
}

struct Guidance<'a> {
    backbone: &'a Backbone,
    windows: &'a [Window],
    tiled: bool,
    content_weight: f64,
}

impl Guidance<'_> {
    /// Returns `(ad, total, grad)` at `z`.
    fn evaluate(
        &self,
        z: &Tensor,
        t: usize,
        reference: &AttentionTaps,
        content: Option<&AttentionTaps>,
        want_grad: bool,
    ) -> Result<(f64, f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let zv = if want_grad {
            tape.leaf(z.clone())
        } else {
            tape.constant(z.clone())
        };
        let rv = reference.to_tape(&mut tape)?;
        let ad = if self.tiled {
            let mut parts = Vec::with_capacity(self.windows.len());
            for win in self.windows {
                let tile = tape.crop(zv, win.y, win.x, win.height, win.width)?;
                let target = self.backbone.extract_on(&mut tape, tile, t, "")?;
                parts.push(ad_loss_on(&mut tape, &target, &rv, None)?);
            }
            let sum = tape.sum_scalars(&parts)?;
            tape.scale(sum, 1.0 / parts.len() as f64)
        } else {
            let target = self.backbone.extract_on(&mut tape, zv, t, "")?;
            let mut total: Var = ad_loss_on(&mut tape, &target, &rv, None)?;
            if let Some(c) = content {
                let cv = c.to_tape(&mut tape)?;
                let cl = content_loss_on(&mut tape, &target, &cv)?;
                let weighted = tape.scale(cl, self.content_weight);
                let ad = total;
                total = tape.add(ad, weighted)?;
                let grad = if want_grad {
                    Some(tape.backward(total)?.get_or_zeros(zv, z))
                } else {
                    None
                };
                return Ok((tape.value(ad).item(), tape.value(total).item(), grad));
            }
            total
        };
        let grad = if want_grad {
            Some(tape.backward(ad)?.get_or_zeros(zv, z))
        } else {
            None
        };
        let v = tape.value(ad).item();
        Ok((v, v, grad))
    }
}

impl<'a> GuidedSampler<'a> {
    pub fn new(backbone: &'a Backbone, cfg: &'a SamplerConfig) -> Self {
        Self {
            backbone,
            cfg,
            prompt: "",
            style: None,
            content: None,
            layout: None,
            latent_hw: None,
            condition: None,
        }
    }

    pub fn prompt(mut self, prompt: &'a str) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn style(mut self, style: &'a Image) -> Self {
        self.style = Some(style);
        self
    }

    /// Adds `λ·L_content` to the inner loop.
    pub fn content(mut self, content: &'a Image) -> Self {
        self.content = Some(content);
        self
    }

    /// Layout for SDEdit initialization (needs `sdedit_strength`).
    pub fn layout(mut self, layout: &'a Image) -> Self {
        self.layout = Some(layout);
        self
    }

    /// Output size in latent units; defaults to the layout, then the style latent.
    pub fn latent_hw(mut self, hw: (usize, usize)) -> Self {
        self.latent_hw = Some(hw);
        self
    }

    /// Structure map passed to the denoiser's condition hook.
    pub fn condition(mut self, condition: &'a Tensor) -> Self {
        self.condition = Some(condition);
        self
    }

    pub fn run(self) -> Result<SampleOutcome> {
        let cfg = self.cfg;
        cfg.validate()?;
        let bb = self.backbone;
        let z_style = match self.style {
            Some(s) => Some(bb.encode(s)?),
            None if cfg.guided() => {
                return Err(Error::config("style", "guided sampling needs a style image"));
            }
            None => None,
        };
        let z_content = match self.content {
            Some(c) if cfg.content_weight > 0.0 && cfg.inner_steps > 0 => Some(bb.encode(c)?),
            _ => None,
        };

        let (mut z, t_start) = match (cfg.sdedit_strength, self.layout) {
            (Some(s), Some(layout)) => sdedit_init(bb, layout, s, cfg.seed)?,
            (Some(_), None) => return Err(Error::config("layout", "sdedit_strength needs a layout image")),
            (None, _) => {
                let hw = self
                    .latent_hw
                    .or(z_style.as_ref().map(LatentImage::hw))
                    .ok_or_else(|| Error::config("latent_hw", "no output size given"))?;
                (initial_latent(bb, hw, cfg.seed)?, bb.schedule().t_max())
            }
        };
        if let Some(hw) = self.latent_hw {
            if hw != z.hw() {
                return Err(Error::config(
                    "latent_hw",
                    format!("{hw:?} differs from the layout latent {:?}", z.hw()),
                ));
            }
        }

        let windows = match &cfg.tiling {
            Some(spec) => tile_windows(z.hw(), spec)?,
            None => Vec::new(),
        };
        let tiled = !windows.is_empty() && !is_whole(&windows, z.hw());
        if tiled && z_content.is_some() {
            return Err(Error::config("content", "content loss is not supported with tiling"));
        }
        let guidance = Guidance {
            backbone: bb,
            windows: &windows,
            tiled,
            content_weight: cfg.content_weight,
        };

        let schedule = bb.schedule().ddim_timesteps_from(t_start, cfg.steps);
        let mut ref_rng = rng::stream(cfg.seed, Stream::ReferenceNoise);
        let mut content_rng = rng::stream(cfg.seed, Stream::ContentNoise);
        let adam_cfg = AdamConfig::with_lr(cfg.lr);
        let mut adam = Adam::new(adam_cfg, &[z.tensor()]);
        let mut records = Vec::with_capacity(schedule.len());

        for (step, &(t, t_prev)) in schedule.iter().enumerate() {
            let eps = predict_windows(bb, &z, t, self.prompt, cfg.cfg_scale, self.condition, &windows)?;
            let mut zt = ddim_step(z.tensor(), t, t_prev, &eps, bb.schedule())?;
            let mut record = StepRecord {
                step,
                t,
                t_prev,
                ad_before: None,
                ad_after: None,
                adain_deviation: None,
            };

            if let (true, Some(zs)) = (cfg.guided(), z_style.as_ref()) {
                let eps_s = rng::normal(&mut ref_rng, zs.tensor().shape().to_vec());
                let zs_prev = bb.add_noise(zs, t_prev, &eps_s)?;
                if cfg.adain {
                    zt = adain(&zt, zs_prev.tensor())?;
                    record.adain_deviation = Some(adain_deviation(&zt, zs_prev.tensor())?);
                }
                if cfg.inner_steps > 0 {
                    let reference = bb.extract(&zs_prev, t_prev, "")?;
                    let content = match &z_content {
                        Some(zc) => {
                            let eps_c = rng::normal(&mut content_rng, zc.tensor().shape().to_vec());
                            Some(bb.extract(&bb.add_noise(zc, t_prev, &eps_c)?, t_prev, "")?)
                        }
                        None => None,
                    };
                    if cfg.reset_adam_per_step {
                        adam = Adam::new(adam_cfg, &[&zt]);
                    }
                    for i in 0..cfg.inner_steps {
                        let (ad, total, grad) =
                            guidance.evaluate(&zt, t_prev, &reference, content.as_ref(), true)?;
                        let grad = grad.expect("gradient requested");
                        if !total.is_finite() || !grad.is_finite() {
                            return Err(Error::NonFinite {
                                stage: "guided sampling",
                                index: step,
                            });
                        }
                        if i == 0 {
                            record.ad_before = Some(ad);
                        }
                        adam.step(&mut [&mut zt], &[&grad])?;
                    }
                    if cfg.trace_losses {
                        let (ad, _, _) = guidance.evaluate(&zt, t_prev, &reference, content.as_ref(), false)?;
                        record.ad_after = Some(ad);
                    }
                }
            }

            if !zt.is_finite() {
                return Err(Error::NonFinite {
                    stage: "guided sampling",
                    index: step,
                });
            }
            z = z.with_tensor(zt)?;
            records.push(record);
        }

        Ok(SampleOutcome {
            latent: z,
            steps: records,
            t_start,
            windows,
        })
    }
}

/// Guided sampling from a text prompt toward the style image.
pub fn guided_sample(backbone: &Backbone, prompt: &str, style: &Image, cfg: &SamplerConfig) -> Result<SampleOutcome> {
    GuidedSampler::new(backbone, cfg).prompt(prompt).style(style).run()
}

#[derive(Clone, Debug)]
pub struct Expansion {
    pub image: Image,
    pub outcome: SampleOutcome,
}

/// Synthesizes a `target_hw` (pixels) texture from a smaller example with
/// tiled noise prediction and per-window AD loss. Decodes with the
/// backbone's current codec.
pub fn expand_texture(
    backbone: &Backbone,
    example: &Image,
    target_hw: (usize, usize),
    cfg: &SamplerConfig,
) -> Result<Expansion> {
    if cfg.tiling.is_none() {
        return Err(Error::config("tiling", "texture expansion needs a tiling spec"));
    }
    if target_hw.0 < example.height() || target_hw.1 < example.width() {
        return Err(Error::config(
            "target",
            format!(
                "{}x{} is smaller than the example {}x{}",
                target_hw.0,
                target_hw.1,
                example.height(),
                example.width()
            ),
        ));
    }
    let latent_hw = backbone.codec().latent_hw(target_hw.0, target_hw.1)?;
    let outcome = GuidedSampler::new(backbone, cfg)
        .style(example)
        .latent_hw(latent_hw)
        .run()?;
    Ok(Expansion {
        image: backbone.decode(&outcome.latent)?,
        outcome,
    })
}
