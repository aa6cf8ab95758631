//! Task configuration files and per-task defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use attndistill_core::optimize::InitMode;
use attndistill_core::{OptimizeConfig, SamplerConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing field `{field}`: required for task {task}")]
    Missing { field: &'static str, task: Task },
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    StyleTransfer,
    AppearanceTransfer,
    T2iStyle,
    Texture,
    TextureControlled,
    TextureExpand,
    LayoutTexture,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::StyleTransfer => "style-transfer",
            Task::AppearanceTransfer => "appearance-transfer",
            Task::T2iStyle => "t2i-style",
            Task::Texture => "texture",
            Task::TextureControlled => "texture-controlled",
            Task::TextureExpand => "texture-expand",
            Task::LayoutTexture => "layout-texture",
        };
        f.write_str(s)
    }
}

impl Task {
    pub fn is_sampling(self) -> bool {
        matches!(self, Task::T2iStyle | Task::TextureExpand | Task::LayoutTexture)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub style: Option<PathBuf>,
    pub content: Option<PathBuf>,
    pub seg_src: Option<PathBuf>,
    pub seg_tgt: Option<PathBuf>,
    pub layout: Option<PathBuf>,
}

/// Values that replace task defaults. Unset fields keep the default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub iters: Option<usize>,
    pub steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub inner_steps: Option<usize>,
    pub sdedit_strength: Option<f64>,
    /// Output size in pixels for texture, t2i-style and expansion tasks.
    pub width: Option<usize>,
    pub height: Option<usize>,
    /// Expansion window in latent units.
    pub window: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub schema_version: u32,
    pub task: Task,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub prompt: String,
    pub output: PathBuf,
    /// Backbone descriptor file; the built-in toy backbone when absent.
    #[serde(default)]
    pub backbone: Option<PathBuf>,
    #[serde(default)]
    pub vae_finetune: bool,
    #[serde(default = "default_vae_steps")]
    pub vae_finetune_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub overrides: Overrides,
}

fn default_vae_steps() -> usize {
    100
}

impl TaskConfig {
    pub fn new(task: Task, output: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task,
            inputs: Inputs::default(),
            prompt: String::new(),
            output: output.into(),
            backbone: None,
            vae_finetune: false,
            vae_finetune_steps: default_vae_steps(),
            seed: 0,
            overrides: Overrides::default(),
        }
    }

    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
            if let Some(inner) = value.get_mut("task_config") {
                value = inner.take();
            }
            serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: cfg.schema_version,
            });
        }
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        for p in [&mut i.style, &mut i.content, &mut i.seg_src, &mut i.seg_tgt, &mut i.layout, &mut self.backbone]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that every input the task needs is present and every numeric
    /// override is in range.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
            });
        }
        let task = self.task;
        let need = |present: bool, field| {
            if present {
                Ok(())
            } else {
                Err(ConfigError::Missing { field, task })
            }
        };
        let i = &self.inputs;
        need(i.style.is_some(), "style")?;
        match task {
            Task::StyleTransfer | Task::AppearanceTransfer => need(i.content.is_some(), "content")?,
            Task::T2iStyle => need(!self.prompt.trim().is_empty(), "prompt")?,
            Task::TextureControlled => {
                need(i.seg_src.is_some(), "seg_src")?;
                need(i.seg_tgt.is_some(), "seg_tgt")?;
            }
            Task::LayoutTexture => need(i.layout.is_some(), "layout")?,
            Task::Texture | Task::TextureExpand => {}
        }
        if self.output.as_os_str().is_empty() {
            return Err(ConfigError::Missing { field: "output", task });
        }
        if self.output.extension().is_none_or(|e| !e.eq_ignore_ascii_case("png")) {
            return Err(ConfigError::Invalid {
                field: "output",
                reason: format!("{} must be a .png path", self.output.display()),
            });
        }

        let o = &self.overrides;
        let positive = |v: Option<f64>, field| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(ConfigError::Invalid {
                field,
                reason: format!("must be > 0, got {x}"),
            }),
            _ => Ok(()),
        };
        positive(o.lr, "lr")?;
        if let Some(l) = o.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(ConfigError::Invalid {
                    field: "lambda",
                    reason: format!("must be >= 0, got {l}"),
                });
            }
        }
        if o.steps == Some(0) {
            return Err(ConfigError::Invalid {
                field: "steps",
                reason: "must be >= 1".into(),
            });
        }
        if let Some(s) = o.cfg_scale {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(ConfigError::Invalid {
                    field: "cfg_scale",
                    reason: format!("must be >= 1, got {s}"),
                });
            }
        }
        if let Some(s) = o.sdedit_strength {
            if !(s > 0.0 && s < 1.0) {
                return Err(ConfigError::Invalid {
                    field: "sdedit_strength",
                    reason: format!("must lie in (0, 1), got {s}"),
                });
            }
        }
        for (v, field) in [(o.width, "width"), (o.height, "height"), (o.window, "window")] {
            if v == Some(0) {
                return Err(ConfigError::Invalid {
                    field,
                    reason: "must be >= 1".into(),
                });
            }
        }
        Ok(())
    }

    /// Latent-optimization settings with task defaults and overrides applied.
    pub fn optimize_config(&self) -> OptimizeConfig {
        let base = match self.task {
            Task::AppearanceTransfer => OptimizeConfig::appearance_transfer(),
            Task::Texture => OptimizeConfig::texture(),
            Task::TextureControlled => OptimizeConfig::controlled_texture(),
            _ => OptimizeConfig::style_transfer(),
        };
        let o = &self.overrides;
        OptimizeConfig {
            iterations: o.iters.unwrap_or(base.iterations),
            lr: o.lr.unwrap_or(base.lr),
            content_weight: if base.init == InitMode::RandomNoise {
                0.0
            } else {
                o.lambda.unwrap_or(base.content_weight)
            },
            seed: self.seed,
            ..base
        }
    }

    /// Sampler settings with task defaults and overrides applied. `window`
    /// is the expansion window used when none is configured.
    pub fn sampler_config(&self, window: usize) -> SamplerConfig {
        let base = match self.task {
            Task::TextureExpand => SamplerConfig::expansion(self.overrides.window.unwrap_or(window)),
            Task::LayoutTexture => SamplerConfig::layout_texture(),
            _ => SamplerConfig::text_to_image(),
        };
        let o = &self.overrides;
        SamplerConfig {
            steps: o.steps.unwrap_or(base.steps),
            cfg_scale: o.cfg_scale.unwrap_or(base.cfg_scale),
            inner_steps: o.inner_steps.unwrap_or(base.inner_steps),
            lr: o.lr.unwrap_or(base.lr),
            content_weight: o.lambda.unwrap_or(base.content_weight),
            sdedit_strength: o.sdedit_strength.or(base.sdedit_strength),
            seed: self.seed,
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn styled(task: Task) -> TaskConfig {
        let mut c = TaskConfig::new(task, "out.png");
        c.inputs.style = Some("s.png".into());
        c
    }

    #[test]
    fn missing_content_names_the_field() {
        let err = styled(Task::StyleTransfer).validate().unwrap_err();
        assert!(matches!(err, ConfigError::Missing { field: "content", .. }));
        assert!(err.to_string().contains("content"));
    }

    #[test]
    fn per_task_requirements() {
        assert!(matches!(
            styled(Task::T2iStyle).validate(),
            Err(ConfigError::Missing { field: "prompt", .. })
        ));
        let mut c = styled(Task::TextureControlled);
        c.inputs.seg_src = Some("a.png".into());
        assert!(matches!(c.validate(), Err(ConfigError::Missing { field: "seg_tgt", .. })));
        assert!(matches!(
            styled(Task::LayoutTexture).validate(),
            Err(ConfigError::Missing { field: "layout", .. })
        ));
        styled(Task::Texture).validate().unwrap();
        assert!(matches!(
            TaskConfig::new(Task::Texture, "o.png").validate(),
            Err(ConfigError::Missing { field: "style", .. })
        ));
    }

    #[test]
    fn task_defaults() {
        assert_eq!(styled(Task::StyleTransfer).optimize_config().content_weight, 0.25);
        assert_eq!(styled(Task::AppearanceTransfer).optimize_config().content_weight, 0.2);
        assert_eq!(styled(Task::TextureControlled).optimize_config().content_weight, 0.15);
        let tex = styled(Task::Texture).optimize_config();
        assert_eq!((tex.iterations, tex.lr), (100, 0.05));
        assert_eq!(styled(Task::StyleTransfer).optimize_config().iterations, 200);
        let s = styled(Task::T2iStyle).sampler_config(8);
        assert_eq!((s.steps, s.cfg_scale, s.inner_steps, s.lr), (50, 7.0, 2, 0.015));
        let e = styled(Task::TextureExpand).sampler_config(8);
        assert_eq!((e.inner_steps, e.lr), (3, 0.05));
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = styled(Task::StyleTransfer);
        c.inputs.content = Some("c.png".into());
        c.overrides.lambda = Some(1.5);
        c.overrides.iters = Some(7);
        let o = c.optimize_config();
        assert_eq!((o.content_weight, o.iterations), (1.5, 7));
        c.overrides.lr = Some(0.0);
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { field: "lr", .. })));
        c.overrides.lr = None;
        c.overrides.sdedit_strength = Some(1.0);
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { field: "sdedit_strength", .. })));
        c.overrides.sdedit_strength = None;
        c.output = "out.jpg".into();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { field: "output", .. })));
    }

    #[test]
    fn toml_round_trip_and_schema() {
        let mut c = styled(Task::TextureExpand);
        c.overrides.width = Some(48);
        let text = c.to_toml();
        let back: TaskConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text.replace("schema_version = 1", "schema_version = 9")).unwrap();
        assert!(matches!(TaskConfig::load(&p), Err(ConfigError::Schema { found: 9 })));
    }

    #[test]
    fn load_resolves_paths_and_reads_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = styled(Task::Texture);
        c.seed = 5;
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        let loaded = TaskConfig::load(&p).unwrap();
        assert_eq!(loaded.inputs.style.as_deref(), Some(dir.path().join("s.png").as_path()));
        assert_eq!(loaded.output, dir.path().join("out.png"));

        let m = dir.path().join("out.manifest.json");
        let wrapped = serde_json::json!({ "task_config": loaded, "seed": 5 });
        std::fs::write(&m, wrapped.to_string()).unwrap();
        assert_eq!(TaskConfig::load(&m).unwrap(), loaded);
    }
}
