//! Procedural test images for desk-scale runs.

use rand::Rng;

use crate::image::Image;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

fn build(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
    let plane = width * height;
    let t = Tensor::from_fn([3, height, width], |i| {
        let c = i / plane;
        let (y, x) = ((i % plane) / width, i % width);
        f(c, y, x).clamp(-1.0, 1.0)
    });
    Image::new(t).expect("three channels")
}

/// Diagonal colour stripes; the seed picks orientation, period and palette.
pub fn stripes(width: usize, height: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, Stream::Weights);
    let period = r.random_range(3.0..9.0);
    let (a, b) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let phase: [f64; 3] = [r.random(), r.random(), r.random()];
    build(width, height, move |c, y, x| {
        let s = (a * x as f64 + b * y as f64) / period + phase[c] * 6.28;
        0.8 * libm::sin(s * core::f64::consts::PI)
    })
}

/// Smooth blobs: a sum of a few seeded Gaussian bumps per channel.
pub fn blobs(width: usize, height: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, Stream::Weights);
    let bumps: [[(f64, f64, f64, f64); 4]; 3] = core::array::from_fn(|_| {
        core::array::from_fn(|_| {
            (
                r.random_range(0.0..height as f64),
                r.random_range(0.0..width as f64),
                r.random_range(2.0..(width.max(height) as f64 / 3.0).max(2.5)),
                r.random_range(-1.0..1.0),
            )
        })
    });
    build(width, height, move |c, y, x| {
        bumps[c]
            .iter()
            .map(|&(cy, cx, s, a)| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let d2 = dy * dy + dx * dx;
                a * libm::exp(-d2 / (2.0 * s * s))
            })
            .sum::<f64>()
    })
}

/// A stationary texture: periodic weave plus seeded per-pixel grain.
///
/// Any crop of a larger call is "the same texture" as the whole.
pub fn noise_texture(width: usize, height: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, Stream::Weights);
    let grain = rng::normal(&mut r, [3, height, width]);
    build(width, height, |c, y, x| {
        let weave = libm::sin(x as f64 * 0.9 + c as f64) * libm::cos(y as f64 * 0.7);
        0.6 * weave + 0.15 * grain.data()[(c * height + y) * width + x]
    })
}

/// Axis-aligned two-colour checkerboard with `cell`-pixel squares.
pub fn checker(width: usize, height: usize, cell: usize) -> Image {
    let cell = cell.max(1);
    build(width, height, move |c, y, x| {
        let on = ((y / cell) + (x / cell)) % 2 == 0;
        match (on, c) {
            (true, 0) => 0.8,
            (true, _) => -0.2,
            (false, 2) => 0.7,
            (false, _) => -0.6,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_bounded() {
        assert_eq!(stripes(8, 8, 1), stripes(8, 8, 1));
        assert_ne!(blobs(8, 8, 1), blobs(8, 8, 2));
        let t = noise_texture(16, 8, 3);
        assert!(t.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!((t.width(), t.height()), (16, 8));
    }
}
