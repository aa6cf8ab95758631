//! In-memory images and label maps.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image as a `[3, height, width]` tensor with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != 3 {
            return Err(Error::shape("image", format!("expected 3 channels, got {c}")));
        }
        Ok(Self { tensor })
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(
                "from_rgb8",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, pixels.len()),
            ));
        }
        let plane = width * height;
        let tensor = Tensor::from_fn([3, height, width], |i| {
            let (c, p) = (i / plane, i % plane);
            pixels[p * 3 + c] as f64 / 127.5 - 1.0
        });
        Ok(Self { tensor })
    }

    /// To interleaved 8-bit RGB, clamping to `[-1, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.tensor.data();
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                let v = (d[c * plane + p].clamp(-1.0, 1.0) + 1.0) * 127.5;
                out.push(libm::round(v) as u8);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// A `height × width` window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            tensor: self.tensor.crop(y0, x0, height, width)?,
        })
    }

    /// Mean absolute difference between two images of equal size.
    pub fn l1(&self, other: &Self) -> Result<f64> {
        self.tensor.mean_abs_diff(&other.tensor)
    }
}

/// Integer-labelled segmentation map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "label map",
                format!("{width}x{height} needs {} labels, got {}", width * height, labels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Sorted distinct labels.
    pub fn distinct(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Nearest-neighbour downsampling onto an `h × w` grid, flattened row-major.
    ///
    /// Each cell takes the label of the pixel at its centre, so labels are
    /// never blended. The grid must divide the map resolution.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Vec<u32>> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::Resolution {
                height: self.height,
                width: self.width,
                factor: if h == 0 { 0 } else { self.height / h.max(1) },
            });
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.get(y * fy + fy / 2, x * fx + fx / 2));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let pixels: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 3, &pixels).unwrap();
        assert_eq!(img.to_rgb8(), pixels);
        assert_eq!((img.width(), img.height()), (4, 3));
    }

    #[test]
    fn downsample_takes_cell_centres() {
        // 4x4 map with quadrant labels, plus a stray label off-centre.
        let mut labels = alloc::vec![0u32; 16];
        for y in 0..4 {
            for x in 0..4 {
                labels[y * 4 + x] = (y / 2 * 2 + x / 2) as u32;
            }
        }
        labels[0] = 9;
        let map = LabelMap::new(4, 4, labels).unwrap();
        assert_eq!(map.downsample(2, 2).unwrap(), alloc::vec![0, 1, 2, 3]);
        assert!(map.downsample(3, 3).is_err());
    }
}
