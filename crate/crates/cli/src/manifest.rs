//! Run manifests written next to each output image.

use std::path::{Path, PathBuf};

use attndistill_core::optimize::{IterationRecord, LossBreakdown};
use attndistill_core::sample::StepRecord;
use attndistill_core::{Image, OptimizeConfig, SamplerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneInfo {
    pub kind: String,
    /// Digest of the denoiser weights, hex.
    pub weights_digest: String,
    pub checkpoint_sha256: Option<String>,
    pub tapped_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputInfo {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    /// SHA-256 of the interleaved 8-bit RGB pixels.
    pub rgb_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderFinetuneInfo {
    pub steps: usize,
    pub lr: f64,
    pub initial_l1: f64,
    pub final_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Resolved {
    Optimize(OptimizeConfig),
    Sample(SamplerConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Trace {
    Optimize {
        iterations: Vec<IterationRecord>,
        final_loss: Option<LossBreakdown>,
    },
    Sample {
        steps: Vec<StepRecord>,
        t_start: usize,
        windows: usize,
        /// How the AD loss is formed under tiling.
        tiling_loss: Option<String>,
        /// Steps where the inner loop raised the AD loss.
        loss_increases: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub task_config: TaskConfig,
    pub resolved: Resolved,
    pub seed: u64,
    pub backbone: BackboneInfo,
    pub decoder_finetune: Option<DecoderFinetuneInfo>,
    pub output: OutputInfo,
    pub trace: Trace,
    pub wall_time_s: f64,
}

pub fn rgb_sha256(image: &Image) -> String {
    hex::encode(Sha256::digest(image.to_rgb8()))
}

/// `<dir>/<stem>.manifest.json` for an output `<dir>/<stem>.png`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.manifest.json"))
}

impl Manifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}
