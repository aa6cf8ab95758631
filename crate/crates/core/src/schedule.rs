//! Noise schedule, forward noising and the deterministic DDIM update.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cumulative products `ᾱ_t` for `t ∈ [0, t_max]`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Scaled-linear betas (`β` from 0.00085 to 0.012 over 1000 steps).
    ///
    /// Shorter schedules scale both endpoints by `1000 / t_max` so that
    /// `ᾱ_{t_max}` lands near the same terminal noise level.
    pub fn scaled_linear(t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::config("t_max", "must be >= 1"));
        }
        let k = 1000.0 / t_max as f64;
        let (lo, hi) = (libm::sqrt(0.00085 * k), libm::sqrt(0.012 * k));
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            let s = lo + (hi - lo) * frac;
            let beta = (s * s).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Validates an explicit `ᾱ` table (non-increasing, positive, `ᾱ_0 = 1`).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::config("schedule", "needs ᾱ_0 = 1 and at least one step"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] <= w[0])) || alpha_bar.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config("schedule", "ᾱ must be non-increasing and positive"));
        }
        if alpha_bar[alpha_bar.len() - 1] >= 1.0 {
            return Err(Error::config("schedule", "ᾱ never drops below 1"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::Timestep {
            t,
            t_max: self.t_max(),
        })
    }

    /// Noise level `σ_t = √(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(libm::sqrt(1.0 - self.alpha_bar(t)?))
    }

    /// `steps` evenly spaced timesteps from `t_max` down, each paired with
    /// its successor; the last step ends at 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<(usize, usize)> {
        self.ddim_timesteps_from(self.t_max(), steps)
    }

    /// As [`ddim_timesteps`](Self::ddim_timesteps), but starting at `t_start`
    /// and keeping only the grid points below it.
    pub fn ddim_timesteps_from(&self, t_start: usize, steps: usize) -> Vec<(usize, usize)> {
        let t_max = self.t_max();
        let mut grid: Vec<usize> = (0..steps)
            .map(|i| libm::round(t_max as f64 * (steps - i) as f64 / steps as f64) as usize)
            .filter(|&t| t < t_start)
            .collect();
        if t_start > 0 {
            grid.insert(0, t_start.min(t_max));
        }
        grid.dedup();
        grid.push(0);
        grid.windows(2).filter(|w| w[0] > w[1]).map(|w| (w[0], w[1])).collect()
    }
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn add_noise(z0: &Tensor, t: usize, noise: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if z0.shape() != noise.shape() {
        return Err(Error::shape(
            "add_noise",
            format!("{:?} vs {:?}", z0.shape(), noise.shape()),
        ));
    }
    let ab = schedule.alpha_bar(t)?;
    if ab == 1.0 {
        return Ok(z0.clone());
    }
    let (a, s) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    z0.zip_map(noise, |z, e| a * z + s * e)
}

/// One deterministic DDIM step from `t` to `t_prev` given predicted noise.
pub fn ddim_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::config("t_prev", format!("{t_prev} is not below t = {t}")));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if ab_t == ab_prev {
        return Ok(z_t.clone());
    }
    let (sa_t, ss_t) = (libm::sqrt(ab_t), libm::sqrt(1.0 - ab_t));
    let (sa_p, ss_p) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
    z_t.zip_map(eps, |z, e| {
        let z0 = (z - ss_t * e) / sa_t;
        sa_p * z0 + ss_p * e
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn scaled_linear_is_strictly_decreasing_from_one() {
        for t_max in [1, 100, 1000] {
            let s = DiffusionSchedule::scaled_linear(t_max).unwrap();
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            assert_eq!(s.t_max(), t_max);
        }
        let s = DiffusionSchedule::scaled_linear(1000).unwrap();
        let last = s.alpha_bar(1000).unwrap();
        assert!(last > 0.0 && last < 0.01, "ᾱ_T = {last}");
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn add_noise_substitution() {
        let s = DiffusionSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let z = add_noise(&Tensor::scalar(1.0), 1, &Tensor::scalar(2.0), &s).unwrap();
        assert!((z.item() - 2.232_050_807_568_877_3).abs() < 1e-12);
        let z0 = Tensor::scalar(0.3);
        assert_eq!(add_noise(&z0, 0, &Tensor::scalar(9.0), &s).unwrap(), z0);
        assert_eq!(add_noise(&Tensor::scalar(4.0), 1, &Tensor::scalar(0.0), &s).unwrap().item(), 2.0);
        assert!(add_noise(&z0, 2, &z0, &s).is_err());
    }

    #[test]
    fn ddim_substitution() {
        // ᾱ_t = 0.25, ᾱ_prev = 0.64
        let s = DiffusionSchedule::from_alpha_bar(vec![1.0, 0.64, 0.25]).unwrap();
        let z = ddim_step(&Tensor::scalar(1.0), 2, 1, &Tensor::scalar(0.5), &s).unwrap();
        assert!((z.item() - 1.207_179_676_972_449).abs() < 1e-9);
        assert!(ddim_step(&Tensor::scalar(1.0), 1, 1, &Tensor::scalar(0.5), &s).is_err());
    }

    #[test]
    fn ddim_grid_covers_down_to_zero() {
        let s = DiffusionSchedule::scaled_linear(1000).unwrap();
        let steps = s.ddim_timesteps(50);
        assert_eq!(steps.len(), 50);
        assert_eq!(steps[0], (1000, 980));
        assert_eq!(steps[49], (20, 0));
        let partial = s.ddim_timesteps_from(500, 50);
        assert_eq!(partial[0], (500, 480));
        assert_eq!(partial.last().unwrap().1, 0);
    }
}
