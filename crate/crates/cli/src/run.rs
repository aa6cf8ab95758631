//! Task dispatch: validate, load, check resolutions, compute, write.

use std::path::{Path, PathBuf};
use std::time::Instant;

use attndistill_core::{
    content_preserving_optimize, controlled_texture_optimize, expand_texture, texture_optimize, Backbone,
    GuidedSampler, Image, LabelMap, OptimizeOutcome, SampleOutcome,
};
use thiserror::Error;

use crate::config::{ConfigError, Task, TaskConfig};
use crate::descriptor::{BackboneDescriptor, BackboneError};
use crate::io::{self, IoError};
use crate::manifest::{
    manifest_path, rgb_sha256, BackboneInfo, DecoderFinetuneInfo, Manifest, OutputInfo, Resolved, Trace,
};

pub const DECODER_FINETUNE_LR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Resolution {
        path: PathBuf,
        #[source]
        source: attndistill_core::Error,
    },
    #[error("backbone: {0}")]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("cannot write manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Compute(#[from] attndistill_core::Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Resolution { .. } => 2,
            RunError::Backbone(_) => 3,
            RunError::Io(_) | RunError::Manifest { .. } => 4,
            RunError::Compute(_) => 5,
        }
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub output: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

/// Loaded backbone plus the facts recorded about it.
pub struct LoadedBackbone {
    pub backbone: Backbone,
    pub info: BackboneInfo,
}

pub fn load_backbone(descriptor: Option<&Path>, cache: Option<&Path>) -> Result<LoadedBackbone, BackboneError> {
    let (desc, base) = match descriptor {
        Some(p) => (BackboneDescriptor::load(p)?, p.parent()),
        None => (BackboneDescriptor::default(), None),
    };
    let (ckpt, sha) = desc.checkpoint(cache, base)?;
    let backbone = ckpt.into_backbone(desc.layers())?;
    let info = BackboneInfo {
        kind: desc.kind().into(),
        weights_digest: format!("{:016x}", backbone.denoiser().weights_digest()),
        checkpoint_sha256: sha,
        tapped_layers: backbone.tapped_layers()?.to_vec(),
    };
    Ok(LoadedBackbone { backbone, info })
}

struct Inputs {
    style: Image,
    content: Option<Image>,
    seg_src: Option<LabelMap>,
    seg_tgt: Option<LabelMap>,
    layout: Option<Image>,
}

fn load_inputs(cfg: &TaskConfig) -> Result<Inputs, IoError> {
    let i = &cfg.inputs;
    let style = io::load_image(i.style.as_deref().expect("validated"))?;
    let image = |p: &Option<PathBuf>| p.as_deref().map(io::load_image).transpose();
    let labels = |p: &Option<PathBuf>| p.as_deref().map(io::load_labels).transpose();
    Ok(Inputs {
        style,
        content: image(&i.content)?,
        seg_src: labels(&i.seg_src)?,
        seg_tgt: labels(&i.seg_tgt)?,
        layout: image(&i.layout)?,
    })
}

/// Output size in pixels for tasks that synthesize from scratch.
fn target_hw(cfg: &TaskConfig, style: &Image) -> (usize, usize) {
    let (h, w) = (style.height(), style.width());
    let default = match cfg.task {
        Task::TextureExpand => (h, 3 * w),
        _ => (h, w),
    };
    (
        cfg.overrides.height.unwrap_or(default.0),
        cfg.overrides.width.unwrap_or(default.1),
    )
}

/// Every input and the output size must map onto the latent grid.
fn check_resolutions(cfg: &TaskConfig, inputs: &Inputs, bb: &Backbone) -> Result<(), RunError> {
    let codec = bb.codec();
    let check = |path: &Option<PathBuf>, h: usize, w: usize| {
        codec.latent_hw(h, w).map(|_| ()).map_err(|source| RunError::Resolution {
            path: path.clone().unwrap_or_else(|| cfg.output.clone()),
            source,
        })
    };
    let i = &cfg.inputs;
    check(&i.style, inputs.style.height(), inputs.style.width())?;
    if let Some(c) = &inputs.content {
        check(&i.content, c.height(), c.width())?;
    }
    if let Some(l) = &inputs.layout {
        check(&i.layout, l.height(), l.width())?;
    }
    if let Some(s) = &inputs.seg_tgt {
        check(&i.seg_tgt, s.height(), s.width())?;
    }
    let (h, w) = target_hw(cfg, &inputs.style);
    check(&None, h, w)
}

enum Computed {
    Optimize(OptimizeOutcome),
    Sample(SampleOutcome),
}

/// Runs one task end to end and writes the image and its manifest.
pub fn run(cfg: &TaskConfig, cache: Option<&Path>) -> Result<RunReport, RunError> {
    let started = Instant::now();
    cfg.validate()?;
    let LoadedBackbone { mut backbone, info } = load_backbone(cfg.backbone.as_deref(), cache)?;
    let inputs = load_inputs(cfg)?;
    check_resolutions(cfg, &inputs, &backbone)?;

    let decoder_finetune = if cfg.vae_finetune {
        let ft = backbone
            .codec()
            .finetune_decoder(&inputs.style, cfg.vae_finetune_steps, DECODER_FINETUNE_LR)?;
        backbone.set_codec(ft.codec)?;
        Some(DecoderFinetuneInfo {
            steps: cfg.vae_finetune_steps,
            lr: DECODER_FINETUNE_LR,
            initial_l1: ft.initial_l1,
            final_l1: ft.final_l1,
        })
    } else {
        None
    };

    let bb = &backbone;
    let style = &inputs.style;
    let (hw_px, window_default) = {
        let hw = target_hw(cfg, style);
        let (lh, lw) = bb.codec().latent_hw(style.height(), style.width())?;
        (hw, lh.min(lw))
    };
    let latent_hw = bb.codec().latent_hw(hw_px.0, hw_px.1)?;

    let (resolved, computed, image) = if cfg.task.is_sampling() {
        let scfg = cfg.sampler_config(window_default);
        let (outcome, image) = match cfg.task {
            Task::TextureExpand => {
                let e = expand_texture(bb, style, hw_px, &scfg)?;
                (e.outcome, e.image)
            }
            _ => {
                let mut sampler = GuidedSampler::new(bb, &scfg).prompt(&cfg.prompt).style(style);
                if let Some(c) = &inputs.content {
                    sampler = sampler.content(c);
                }
                if let Some(l) = &inputs.layout {
                    sampler = sampler.layout(l);
                } else {
                    sampler = sampler.latent_hw(latent_hw);
                }
                let o = sampler.run()?;
                let img = bb.decode(&o.latent)?;
                (o, img)
            }
        };
        (Resolved::Sample(scfg), Computed::Sample(outcome), image)
    } else {
        let ocfg = cfg.optimize_config();
        let outcome = match cfg.task {
            Task::Texture => texture_optimize(bb, style, latent_hw, &ocfg)?,
            Task::TextureControlled => {
                let (src, tgt) = (inputs.seg_src.as_ref(), inputs.seg_tgt.as_ref());
                controlled_texture_optimize(bb, style, src.expect("validated"), tgt.expect("validated"), &ocfg)?.outcome
            }
            _ => content_preserving_optimize(bb, style, inputs.content.as_ref().expect("validated"), &ocfg)?,
        };
        let image = bb.decode(&outcome.latent)?;
        (Resolved::Optimize(ocfg), Computed::Optimize(outcome), image)
    };

    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    io::save_image(&cfg.output, &image, cfg.seed)?;

    let trace = match computed {
        Computed::Optimize(o) => Trace::Optimize {
            final_loss: o.final_loss,
            iterations: o.trace,
        },
        Computed::Sample(o) => Trace::Sample {
            loss_increases: o.loss_increases(0.0),
            t_start: o.t_start,
            windows: o.windows.len(),
            tiling_loss: (!o.windows.is_empty()).then(|| "per-tile".to_string()),
            steps: o.steps,
        },
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task_config: cfg.clone(),
        resolved,
        seed: cfg.seed,
        backbone: info,
        decoder_finetune,
        output: OutputInfo {
            path: cfg.output.clone(),
            width: image.width(),
            height: image.height(),
            rgb_sha256: rgb_sha256(&image),
        },
        trace,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mpath = manifest_path(&cfg.output);
    manifest.write(&mpath).map_err(|source| RunError::Manifest {
        path: mpath.clone(),
        source,
    })?;
    Ok(RunReport {
        output: cfg.output.clone(),
        manifest_path: mpath,
        manifest,
    })
}
