//! Command-line definitions and handlers.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::bench::{bench, BenchMode, BenchOptions, ScalingCheck};
use crate::config::{Task, TaskConfig};
use crate::descriptor::{BackboneDescriptor, CACHE_ENV};
use crate::io;
use crate::run::{load_backbone, run};

#[derive(Debug, Parser)]
#[command(name = "attndistill", version, about = "Attention-distillation style and texture synthesis")]
pub struct Cli {
    /// Directory holding checkpoint files named by backbone descriptors.
    #[arg(long, global = true, env = CACHE_ENV)]
    pub cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one task and write the image plus a manifest beside it.
    Run(RunArgs),
    /// Time optimization or sampling over a list of settings.
    Bench(BenchArgs),
    /// Fine-tune the decoder on one image and report reconstruction error.
    FinetuneVae(FinetuneArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Task file (TOML, or JSON; a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub content: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub seg_src: Option<PathBuf>,
    #[arg(long)]
    pub seg_tgt: Option<PathBuf>,
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Content weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimization iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Denoising steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Adam steps on the AD loss per denoising step.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub sdedit_strength: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backbone descriptor (TOML). The built-in toy backbone when absent.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fine-tune the decoder on the style image before decoding.
    #[arg(long)]
    pub vae_finetune: bool,
    /// Output width in pixels (texture tasks).
    #[arg(long)]
    pub width: Option<usize>,
    /// Output height in pixels (texture tasks).
    #[arg(long)]
    pub height: Option<usize>,
    /// Expansion window in latent units.
    #[arg(long)]
    pub window: Option<usize>,
    /// Print the merged task config instead of running.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "optimize")]
    pub mode: BenchMode,
    /// Comma-separated iteration counts (optimize) or inner steps (sample).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Denoising steps in sample mode.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Report timings without checking their scaling.
    #[arg(long)]
    pub no_check: bool,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Image to reconstruct.
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = crate::run::DECODER_FINETUNE_LR)]
    pub lr: f64,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Write the reconstruction with the fine-tuned decoder.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a checkpoint carrying the fine-tuned decoder.
    #[arg(long)]
    pub save_checkpoint: Option<PathBuf>,
}

/// Exit code for a failed bench scaling check.
pub const EXIT_BENCH_CHECK: u8 = 6;

impl RunArgs {
    /// Config file values (if any) with flags applied on top.
    pub fn task_config(&self) -> anyhow::Result<TaskConfig> {
        let mut cfg = match &self.config {
            Some(p) => TaskConfig::load(p)?,
            None => {
                let task = self.task.context("either --config or --task is required")?;
                let out = self.out.clone().context("missing field `output`: pass --out")?;
                TaskConfig::new(task, out)
            }
        };
        if let Some(t) = self.task {
            cfg.task = t;
        }
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        let i = &mut cfg.inputs;
        set(&mut i.style, &self.style);
        set(&mut i.content, &self.content);
        set(&mut i.seg_src, &self.seg_src);
        set(&mut i.seg_tgt, &self.seg_tgt);
        set(&mut i.layout, &self.layout);
        set(&mut cfg.backbone, &self.backbone);
        if let Some(out) = &self.out {
            cfg.output.clone_from(out);
        }
        if let Some(p) = &self.prompt {
            cfg.prompt.clone_from(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.vae_finetune |= self.vae_finetune;
        let o = &mut cfg.overrides;
        o.lambda = self.lambda.or(o.lambda);
        o.lr = self.lr.or(o.lr);
        o.iters = self.iters.or(o.iters);
        o.steps = self.steps.or(o.steps);
        o.cfg_scale = self.cfg_scale.or(o.cfg_scale);
        o.inner_steps = self.inner_steps.or(o.inner_steps);
        o.sdedit_strength = self.sdedit_strength.or(o.sdedit_strength);
        o.width = self.width.or(o.width);
        o.height = self.height.or(o.height);
        o.window = self.window.or(o.window);
        Ok(cfg)
    }
}

/// Runs the parsed command line; the value is the process exit code.
pub fn execute(cli: Cli) -> anyhow::Result<u8> {
    let cache = cli.cache_dir.as_deref();
    match cli.command {
        Command::Run(args) => {
            let cfg = args.task_config()?;
            if args.print_config {
                print!("{}", cfg.to_toml());
                return Ok(0);
            }
            let report = run(&cfg, cache)?;
            println!("wrote {}", report.output.display());
            println!("wrote {}", report.manifest_path.display());
            println!("rgb sha256 {}", report.manifest.output.rgb_sha256);
            Ok(0)
        }
        Command::Bench(args) => {
            let loaded = load_backbone(args.backbone.as_deref(), cache)?;
            let opts = BenchOptions {
                size: args.size,
                steps: args.steps,
                seed: args.seed,
                repeats: args.repeats,
            };
            let report = bench(&loaded.backbone, args.mode, &args.values, &opts)?;
            print!("{report}");
            if let Some(p) = &args.json {
                std::fs::write(p, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("cannot write {}", p.display()))?;
            }
            if args.no_check {
                return Ok(0);
            }
            match report.check() {
                ScalingCheck::Fail(msg) => {
                    eprintln!("scaling check failed: {msg}");
                    Ok(EXIT_BENCH_CHECK)
                }
                ScalingCheck::Pass => {
                    println!("scaling check passed");
                    Ok(0)
                }
                ScalingCheck::Vacuous => Ok(0),
            }
        }
        Command::FinetuneVae(args) => {
            if args.steps == 0 {
                bail!("invalid field `steps`: must be >= 1");
            }
            let image = io::load_image(&args.style)?;
            let (desc, base) = match &args.backbone {
                Some(p) => (BackboneDescriptor::load(p)?, p.parent()),
                None => (BackboneDescriptor::default(), None),
            };
            let (mut ckpt, _) = desc.checkpoint(cache, base)?;
            let ft = ckpt.codec.finetune_decoder(&image, args.steps, args.lr)?;
            println!("reconstruction L1: {:.6} -> {:.6} over {} steps", ft.initial_l1, ft.final_l1, args.steps);
            if let Some(out) = &args.out {
                let recon = ft.codec.decode(&ft.codec.encode(&image)?)?;
                io::save_image(out, &recon, 0)?;
                println!("wrote {}", out.display());
            }
            if let Some(path) = &args.save_checkpoint {
                ckpt.codec = ft.codec;
                let sha = ckpt.save(path)?;
                println!("wrote {} sha256 {sha}", path.display());
            }
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("attndistill").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut file = TaskConfig::new(Task::StyleTransfer, "o.png");
        file.overrides.lambda = Some(0.5);
        file.overrides.iters = Some(9);
        let p = dir.path().join("t.toml");
        std::fs::write(&p, file.to_toml()).unwrap();
        let cli = parse(&["run", "--config", p.to_str().unwrap(), "--lambda", "0.1", "--seed", "3"]);
        let Command::Run(args) = cli.command else { panic!() };
        let cfg = args.task_config().unwrap();
        assert_eq!(cfg.overrides.lambda, Some(0.1));
        assert_eq!(cfg.overrides.iters, Some(9));
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn all_documented_flags_parse() {
        let cli = parse(&[
            "run", "--task", "layout-texture", "--style", "s.png", "--content", "c.png", "--prompt", "p",
            "--seg-src", "a.png", "--seg-tgt", "b.png", "--layout", "l.png", "--lambda", "0.2", "--lr", "0.01",
            "--iters", "5", "--steps", "4", "--cfg-scale", "2", "--inner-steps", "1", "--sdedit-strength", "0.5",
            "--seed", "1", "--backbone", "b.toml", "--out", "o.png", "--vae-finetune",
        ]);
        let Command::Run(args) = cli.command else { panic!() };
        let cfg = args.task_config().unwrap();
        assert!(cfg.vae_finetune);
        assert_eq!(cfg.overrides.sdedit_strength, Some(0.5));
        assert_eq!(cfg.inputs.layout.as_deref(), Some(std::path::Path::new("l.png")));
    }

    #[test]
    fn bench_values_parse_as_list() {
        let cli = parse(&["bench", "--mode", "sample", "--values", "1,2,3"]);
        let Command::Bench(args) = cli.command else { panic!() };
        assert_eq!(args.values, vec![1, 2, 3]);
        let cli = parse(&["bench"]);
        let Command::Bench(args) = cli.command else { panic!() };
        assert!(args.values.is_empty());
    }
}
