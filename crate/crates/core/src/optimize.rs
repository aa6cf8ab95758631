//! Latent optimization against the attention distillation objective.
//!
//! A single latent is updated with Adam on `L_AD + λ·L_content` while the
//! timestep fed to the backbone decreases linearly. Reference and content
//! features come from clean latents at the same timestep. The backbone's
//! noise prediction is never used.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::adam::{Adam, AdamConfig};
use crate::attention::{ad_loss_on, build_guidance_mask, content_loss_on, AttentionTaps, GuidanceMask};
use crate::backbone::{Backbone, LatentImage};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::image::{Image, LabelMap};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// How the optimized latent starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum InitMode {
    ContentLatent,
    RandomNoise,
    RegionFilled,
}

/// Timestep fed to the backbone at each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TimestepMode {
    /// `round(T·(1 − k/N))`, at least 1.
    LinearDecay,
    /// The same timestep throughout (feature-granularity studies).
    Fixed(usize),
}

/// Where reference and content features are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum FeatureSource {
    /// Clean encoded latents.
    Clean,
    /// Latents noised to the current timestep with fresh seeded noise each iteration.
    Noised,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Content weight `λ`.
    pub content_weight: f64,
    pub seed: u64,
    pub init: InitMode,
    pub timesteps: TimestepMode,
    pub features: FeatureSource,
    /// Reuse reference/content taps while the timestep stays within this
    /// distance of the one they were computed at. `None` recomputes every
    /// iteration.
    pub reference_cache: Option<usize>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self::style_transfer()
    }
}

impl OptimizeConfig {
    pub fn style_transfer() -> Self {
        Self {
            iterations: 200,
            lr: 0.05,
            content_weight: 0.25,
            seed: 0,
            init: InitMode::ContentLatent,
            timesteps: TimestepMode::LinearDecay,
            features: FeatureSource::Clean,
            reference_cache: None,
        }
    }

    pub fn appearance_transfer() -> Self {
        Self {
            content_weight: 0.2,
            ..Self::style_transfer()
        }
    }

    pub fn texture() -> Self {
        Self {
            iterations: 100,
            content_weight: 0.0,
            init: InitMode::RandomNoise,
            ..Self::style_transfer()
        }
    }

    pub fn controlled_texture() -> Self {
        Self {
            content_weight: 0.15,
            init: InitMode::RegionFilled,
            ..Self::style_transfer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.content_weight >= 0.0) || !self.content_weight.is_finite() {
            return Err(Error::config(
                "content_weight",
                format!("must be >= 0, got {}", self.content_weight),
            ));
        }
        Ok(())
    }
}

/// `t(k) = round(T·(1 − k/N))`, clamped to at least 1, for `k ∈ [0, N)`.
pub fn timestep_schedule(iterations: usize, t_max: usize) -> Vec<usize> {
    (0..iterations)
        .map(|k| {
            let t = libm::round(t_max as f64 * (1.0 - k as f64 / iterations as f64)) as usize;
            t.max(1)
        })
        .collect()
}

fn schedule_for(cfg: &OptimizeConfig, t_max: usize) -> Result<Vec<usize>> {
    match cfg.timesteps {
        TimestepMode::LinearDecay => Ok(timestep_schedule(cfg.iterations, t_max)),
        TimestepMode::Fixed(t) if t <= t_max => Ok(alloc::vec![t; cfg.iterations]),
        TimestepMode::Fixed(t) => Err(Error::Timestep { t, t_max }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub ad: f64,
    pub content: f64,
    pub total: f64,
}

/// Losses at one iteration, measured before that iteration's update.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iteration: usize,
    pub t: usize,
    pub loss: LossBreakdown,
    /// Largest absolute gradient entry.
    pub grad_max_abs: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub latent: LatentImage,
    pub trace: Vec<IterationRecord>,
    /// Losses of the returned latent at the last scheduled timestep.
    pub final_loss: Option<LossBreakdown>,
}

impl OptimizeOutcome {
    pub fn initial_loss(&self) -> Option<LossBreakdown> {
        self.trace.first().map(|r| r.loss)
    }
}

/// Everything the inner loop needs besides the starting latent.
struct Objective<'a> {
    backbone: &'a Backbone,
    reference: &'a LatentImage,
    content: Option<&'a LatentImage>,
    masks: Option<&'a GuidanceMask>,
}

struct TapCache {
    window: Option<usize>,
    entries: BTreeMap<usize, AttentionTaps>,
}

impl TapCache {
    fn new(window: Option<usize>) -> Self {
        Self {
            window,
            entries: BTreeMap::new(),
        }
    }

    fn get_or_insert(
        &mut self,
        t: usize,
        compute: impl FnOnce() -> Result<AttentionTaps>,
    ) -> Result<AttentionTaps> {
        if let Some(w) = self.window {
            if let Some((_, taps)) = self.entries.iter().find(|(&k, _)| k.abs_diff(t) <= w) {
                return Ok(taps.clone());
            }
        }
        let taps = compute()?;
        if self.window.is_some() {
            self.entries.insert(t, taps.clone());
        }
        Ok(taps)
    }
}

fn feature_latent(
    backbone: &Backbone,
    latent: &LatentImage,
    t: usize,
    source: FeatureSource,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<LatentImage> {
    match source {
        FeatureSource::Clean => Ok(latent.clone()),
        FeatureSource::Noised => {
            let eps = rng::normal(rng, latent.tensor().shape().to_vec());
            backbone.add_noise(latent, t, &eps)
        }
    }
}

/// One loss evaluation at `z`; returns the breakdown and, if requested, the gradient.
fn evaluate(
    obj: &Objective<'_>,
    z: &Tensor,
    t: usize,
    lambda: f64,
    reference: &AttentionTaps,
    content: Option<&AttentionTaps>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Tensor>)> {
    let mut tape = Tape::new();
    let zv = if want_grad {
        tape.leaf(z.clone())
    } else {
        tape.constant(z.clone())
    };
    let target = obj.backbone.extract_on(&mut tape, zv, t, "")?;
    let rv = reference.to_tape(&mut tape)?;
    let ad = ad_loss_on(&mut tape, &target, &rv, obj.masks)?;
    let (total, content_value) = match content {
        Some(c) => {
            let cv = c.to_tape(&mut tape)?;
            let cl = content_loss_on(&mut tape, &target, &cv)?;
            let weighted = tape.scale(cl, lambda);
            (tape.add(ad, weighted)?, tape.value(cl).item())
        }
        None => (ad, 0.0),
    };
    let loss = LossBreakdown {
        ad: tape.value(ad).item(),
        content: content_value,
        total: tape.value(total).item(),
    };
    let grad = if want_grad {
        Some(tape.backward(total)?.get_or_zeros(zv, z))
    } else {
        None
    };
    Ok((loss, grad))
}

fn run(obj: &Objective<'_>, init: LatentImage, cfg: &OptimizeConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let schedule = schedule_for(cfg, obj.backbone.schedule().t_max())?;
    let lambda = cfg.content_weight;
    let use_content = lambda > 0.0 && obj.content.is_some();
    let mut z = init.tensor().clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &[&z]);
    let mut noise_rng = rng::stream(cfg.seed, Stream::FeatureNoise);
    let mut ref_cache = TapCache::new(cfg.reference_cache);
    let mut content_cache = TapCache::new(cfg.reference_cache);
    let mut trace = Vec::with_capacity(schedule.len());
    let mut last = None;

    for (k, &t) in schedule.iter().enumerate() {
        let reference = ref_cache.get_or_insert(t, || {
            let lat = feature_latent(obj.backbone, obj.reference, t, cfg.features, &mut noise_rng)?;
            obj.backbone.extract(&lat, t, "")
        })?;
        let content = match (use_content, obj.content) {
            (true, Some(c)) => Some(content_cache.get_or_insert(t, || {
                let lat = feature_latent(obj.backbone, c, t, cfg.features, &mut noise_rng)?;
                obj.backbone.extract(&lat, t, "")
            })?),
            _ => None,
        };
        let (loss, grad) = evaluate(obj, &z, t, lambda, &reference, content.as_ref(), true)?;
        let grad = grad.expect("gradient requested");
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite {
                stage: "latent optimization",
                index: k,
            });
        }
        trace.push(IterationRecord {
            iteration: k,
            t,
            loss,
            grad_max_abs: grad.max_abs(),
        });
        adam.step(&mut [&mut z], &[&grad])?;
        last = Some((t, reference, content));
    }

    let final_loss = match last {
        Some((t, reference, content)) => {
            Some(evaluate(obj, &z, t, lambda, &reference, content.as_ref(), false)?.0)
        }
        None => None,
    };
    Ok(OptimizeOutcome {
        latent: init.with_tensor(z)?,
        trace,
        final_loss,
    })
}

fn random_latent(backbone: &Backbone, hw: (usize, usize), seed: u64) -> Result<LatentImage> {
    let c = backbone.codec().latent_channels();
    let noise = rng::normal(&mut rng::stream(seed, Stream::InitialLatent), [c, hw.0, hw.1]);
    LatentImage::new(noise, backbone.codec().factor(), backbone.codec().scaling())
}

/// Style or appearance transfer: starts from the content latent (or noise)
/// and minimizes `L_AD(style) + λ·L_content(content)`.
pub fn content_preserving_optimize(
    backbone: &Backbone,
    style: &Image,
    content: &Image,
    cfg: &OptimizeConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let z_s = backbone.encode(style)?;
    let z_c = backbone.encode(content)?;
    let init = match cfg.init {
        InitMode::ContentLatent | InitMode::RegionFilled => z_c.clone(),
        InitMode::RandomNoise => random_latent(backbone, z_c.hw(), cfg.seed)?,
    };
    let obj = Objective {
        backbone,
        reference: &z_s,
        content: Some(&z_c),
        masks: None,
    };
    run(&obj, init, cfg)
}

/// Unconditional texture synthesis from seeded noise with the AD loss alone.
/// `latent_hw` sets the output size in latent units.
pub fn texture_optimize(
    backbone: &Backbone,
    example: &Image,
    latent_hw: (usize, usize),
    cfg: &OptimizeConfig,
) -> Result<OptimizeOutcome> {
    if cfg.init != InitMode::RandomNoise {
        return Err(Error::config("init", "texture synthesis starts from random noise"));
    }
    if cfg.content_weight != 0.0 {
        return Err(Error::config("content_weight", "texture synthesis has no content term"));
    }
    let z_s = backbone.encode(example)?;
    let init = random_latent(backbone, latent_hw, cfg.seed)?;
    let obj = Objective {
        backbone,
        reference: &z_s,
        content: None,
        masks: None,
    };
    run(&obj, init, cfg)
}

/// Fills every target pixel with a source pixel drawn uniformly from the
/// source region carrying the same label.
pub fn region_fill(source: &Image, src_seg: &LabelMap, tgt_seg: &LabelMap, seed: u64) -> Result<Image> {
    if src_seg.width() != source.width() || src_seg.height() != source.height() {
        return Err(Error::shape(
            "region fill",
            format!(
                "source map {}x{} vs image {}x{}",
                src_seg.height(),
                src_seg.width(),
                source.height(),
                source.width()
            ),
        ));
    }
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in src_seg.labels().iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut r = rng::stream(seed, Stream::RegionFill);
    let (sw, sh) = (source.width(), source.height());
    let (tw, th) = (tgt_seg.width(), tgt_seg.height());
    let picks = tgt_seg
        .labels()
        .iter()
        .map(|l| {
            let pool = by_label.get(l).ok_or(Error::UnmatchedLabel { label: *l })?;
            Ok(pool[r.random_range(0..pool.len())])
        })
        .collect::<Result<Vec<usize>>>()?;
    let src = source.tensor().data();
    Image::new(Tensor::from_fn([3, th, tw], |i| {
        let c = i / (th * tw);
        let p = i % (th * tw);
        src[c * sh * sw + picks[p]]
    }))
}

#[derive(Clone, Debug)]
pub struct ControlledOutcome {
    pub outcome: OptimizeOutcome,
    /// The region-filled image used as start point and content reference.
    pub init: Image,
    pub masks: GuidanceMask,
}

/// Segmentation-controlled texture synthesis: masked AD loss against the
/// source texture plus a query content loss against the region-filled start.
pub fn controlled_texture_optimize(
    backbone: &Backbone,
    source: &Image,
    src_seg: &LabelMap,
    tgt_seg: &LabelMap,
    cfg: &OptimizeConfig,
) -> Result<ControlledOutcome> {
    cfg.validate()?;
    let z_s = backbone.encode(source)?;
    let codec = backbone.codec();
    let tgt_hw = codec.latent_hw(tgt_seg.height(), tgt_seg.width())?;
    let grids = backbone.layer_grids(z_s.hw(), tgt_hw)?;
    let masks = build_guidance_mask(src_seg, tgt_seg, &grids)?;
    let init_image = region_fill(source, src_seg, tgt_seg, cfg.seed)?;
    let z_init = backbone.encode(&init_image)?;
    let obj = Objective {
        backbone,
        reference: &z_s,
        content: Some(&z_init),
        masks: Some(&masks),
    };
    let outcome = run(&obj, z_init.clone(), cfg)?;
    Ok(ControlledOutcome {
        outcome,
        init: init_image,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyConfig;
    use crate::synthetic;

    #[test]
    fn schedule_formula() {
        assert_eq!(timestep_schedule(2, 1000), [1000, 500]);
        assert_eq!(timestep_schedule(1, 1000), [1000]);
        let s = timestep_schedule(100, 1000);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(*s.last().unwrap(), 10);
        assert!(timestep_schedule(7, 2).iter().all(|&t| t >= 1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = OptimizeConfig {
            lr: 0.0,
            ..OptimizeConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizeConfig {
            content_weight: -1.0,
            ..OptimizeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let bb = Backbone::toy(ToyConfig::default()).unwrap();
        let ex = synthetic::stripes(16, 16, 1);
        let cfg = OptimizeConfig {
            iterations: 0,
            ..OptimizeConfig::texture()
        };
        let out = texture_optimize(&bb, &ex, (8, 8), &cfg).unwrap();
        let init = random_latent(&bb, (8, 8), cfg.seed).unwrap();
        assert_eq!(out.latent, init);
        assert!(out.final_loss.is_none());
    }

    #[test]
    fn texture_requires_its_preconditions() {
        let bb = Backbone::toy(ToyConfig::default()).unwrap();
        let ex = synthetic::stripes(16, 16, 1);
        assert!(texture_optimize(&bb, &ex, (8, 8), &OptimizeConfig::style_transfer()).is_err());
    }

    #[test]
    fn region_fill_respects_labels() {
        let src = synthetic::stripes(4, 2, 3);
        let src_seg = LabelMap::new(4, 2, alloc::vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        let tgt_seg = LabelMap::new(2, 2, alloc::vec![1, 0, 0, 1]).unwrap();
        let filled = region_fill(&src, &src_seg, &tgt_seg, 5).unwrap();
        let s = src.tensor().data();
        let f = filled.tensor().data();
        for p in 0..4 {
            let label = tgt_seg.labels()[p];
            let found = (0..8).any(|q| {
                src_seg.labels()[q] == label && (0..3).all(|c| f[c * 4 + p] == s[c * 8 + q])
            });
            assert!(found, "pixel {p} not drawn from label {label}");
        }
        let missing = LabelMap::new(2, 2, alloc::vec![1, 0, 0, 2]).unwrap();
        assert_eq!(
            region_fill(&src, &src_seg, &missing, 5).unwrap_err(),
            Error::UnmatchedLabel { label: 2 }
        );
    }
}
