//! Wall-time scaling of latent optimization and guided sampling.

use std::fmt;
use std::time::Instant;

use attndistill_core::{
    content_preserving_optimize, guided_sample, synthetic, Backbone, Image, OptimizeConfig, SamplerConfig,
};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    /// Style-transfer optimization; values are iteration counts.
    Optimize,
    /// Guided sampling; values are inner steps per denoising step.
    Sample,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    /// Side of the square synthetic inputs, in pixels.
    pub size: usize,
    /// Denoising steps for sample mode.
    pub steps: usize,
    pub seed: u64,
    /// Timed runs per value; the median is reported.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            size: 16,
            steps: 50,
            seed: 0,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub value: usize,
    pub seconds: f64,
    pub forward_passes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub rows: Vec<BenchRow>,
}

/// Outcome of the scaling check on a report.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalingCheck {
    Pass,
    Fail(String),
    /// Fewer than two rows: nothing to compare.
    Vacuous,
}

pub const LINEAR_TOLERANCE: f64 = 0.25;

struct Fixture {
    style: Image,
    content: Image,
}

fn fixture(opts: &BenchOptions) -> Fixture {
    Fixture {
        style: synthetic::stripes(opts.size, opts.size, opts.seed.wrapping_add(1)),
        content: synthetic::blobs(opts.size, opts.size, opts.seed.wrapping_add(2)),
    }
}

fn run_once(bb: &Backbone, mode: BenchMode, value: usize, fx: &Fixture, opts: &BenchOptions) -> attndistill_core::Result<()> {
    match mode {
        BenchMode::Optimize => {
            let cfg = OptimizeConfig {
                iterations: value,
                seed: opts.seed,
                ..OptimizeConfig::style_transfer()
            };
            content_preserving_optimize(bb, &fx.style, &fx.content, &cfg).map(|_| ())
        }
        BenchMode::Sample => {
            let cfg = SamplerConfig {
                steps: opts.steps,
                inner_steps: value,
                seed: opts.seed,
                ..SamplerConfig::text_to_image()
            };
            guided_sample(bb, "bench", &fx.style, &cfg).map(|_| ())
        }
    }
}

/// Times each value after one untimed warm-up run. Repeats go round-robin
/// over the values and the median is reported.
pub fn bench(bb: &Backbone, mode: BenchMode, values: &[usize], opts: &BenchOptions) -> attndistill_core::Result<BenchReport> {
    let mut rows = Vec::with_capacity(values.len());
    if values.is_empty() {
        return Ok(BenchReport { mode, rows });
    }
    let fx = fixture(opts);
    let warm = match mode {
        BenchMode::Optimize => values[0].min(10),
        BenchMode::Sample => values[0],
    };
    run_once(bb, mode, warm, &fx, &BenchOptions { steps: opts.steps.min(5), ..opts.clone() })?;
    let repeats = opts.repeats.max(1);
    let mut times = vec![Vec::with_capacity(repeats); values.len()];
    let mut passes = vec![0; values.len()];
    for _ in 0..repeats {
        for (i, &value) in values.iter().enumerate() {
            let before = bb.forward_passes();
            let start = Instant::now();
            run_once(bb, mode, value, &fx, opts)?;
            times[i].push(start.elapsed().as_secs_f64());
            passes[i] = bb.forward_passes() - before;
        }
    }
    for ((&value, mut t), forward_passes) in values.iter().zip(times).zip(passes) {
        t.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            value,
            seconds: t[t.len() / 2],
            forward_passes,
        });
    }
    Ok(BenchReport { mode, rows })
}

impl BenchReport {
    /// Optimize mode: time ratios track value ratios within
    /// [`LINEAR_TOLERANCE`]. Sample mode: time increases with the value.
    pub fn check(&self) -> ScalingCheck {
        if self.rows.len() < 2 {
            return ScalingCheck::Vacuous;
        }
        let first = &self.rows[0];
        match self.mode {
            BenchMode::Optimize => {
                for r in &self.rows[1..] {
                    let expected = r.value as f64 / first.value as f64;
                    let got = r.seconds / first.seconds;
                    if (got / expected - 1.0).abs() > LINEAR_TOLERANCE {
                        return ScalingCheck::Fail(format!(
                            "{} vs {}: time ratio {got:.3}, expected {expected:.3} within ±{:.0}%",
                            r.value,
                            first.value,
                            LINEAR_TOLERANCE * 100.0
                        ));
                    }
                }
            }
            BenchMode::Sample => {
                for w in self.rows.windows(2) {
                    if !(w[1].seconds > w[0].seconds) {
                        return ScalingCheck::Fail(format!(
                            "time not increasing: {} took {:.3}s, {} took {:.3}s",
                            w[0].value, w[0].seconds, w[1].value, w[1].seconds
                        ));
                    }
                }
            }
        }
        ScalingCheck::Pass
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.mode {
            BenchMode::Optimize => "iterations",
            BenchMode::Sample => "inner_steps",
        };
        writeln!(f, "{label:>12} {:>10} {:>8} {:>8}", "seconds", "ratio", "passes")?;
        let base = self.rows.first().map(|r| r.seconds);
        for r in &self.rows {
            let ratio = base.map_or(1.0, |b| r.seconds / b);
            writeln!(f, "{:>12} {:>10.3} {:>8.3} {:>8}", r.value, r.seconds, ratio, r.forward_passes)?;
        }
        Ok(())
    }
}
