use alloc::format;
use alloc::vec::Vec;

use super::LatentImage;
use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::image::Image;
use crate::rng::{self, Stream};
use crate::tensor::{self, Tensor};

/// Decoder parameters `θ`: a per-patch affine map plus a small residual MLP.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecoderWeights {
    pub linear: Tensor,
    pub bias: Tensor,
    pub hidden: Tensor,
    pub hidden_bias: Tensor,
    pub out: Tensor,
}

impl DecoderWeights {
    fn tensors(&self) -> [&Tensor; 5] {
        [&self.linear, &self.bias, &self.hidden, &self.hidden_bias, &self.out]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.linear,
            &mut self.bias,
            &mut self.hidden,
            &mut self.hidden_bias,
            &mut self.out,
        ]
    }
}

/// Patch codec between RGB images and latents.
///
/// The encoder maps each non-overlapping `factor × factor` RGB patch to
/// `channels` latent values with a fixed linear map; the decoder maps each
/// latent pixel back to a patch.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawCodec"))]
pub struct Codec {
    factor: usize,
    channels: usize,
    scaling: f64,
    encoder: Tensor,
    decoder: DecoderWeights,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct RawCodec {
    factor: usize,
    channels: usize,
    scaling: f64,
    encoder: Tensor,
    decoder: DecoderWeights,
}

#[cfg(feature = "serde")]
impl TryFrom<RawCodec> for Codec {
    type Error = Error;

    fn try_from(raw: RawCodec) -> Result<Self> {
        Self::from_parts(raw.factor, raw.channels, raw.scaling, raw.encoder, raw.decoder)
    }
}

/// Result of [`Codec::finetune_decoder`].
#[derive(Clone, Debug)]
pub struct DecoderFinetune {
    pub codec: Codec,
    pub initial_l1: f64,
    pub final_l1: f64,
    /// Reconstruction L1 before each step.
    pub losses: Vec<f64>,
}

const HIDDEN: usize = 16;

impl Codec {
    /// Seeded toy codec. The first three latent channels are per-colour patch
    /// means, any further channels are random patch projections; the decoder
    /// starts at the least-squares inverse of the encoder.
    pub fn toy(seed: u64, factor: usize, channels: usize) -> Result<Self> {
        if factor == 0 || channels == 0 {
            return Err(Error::config("codec", "factor and channels must be >= 1"));
        }
        let p = 3 * factor * factor;
        if channels > p {
            return Err(Error::config(
                "codec",
                format!("{channels} channels exceed the {p} values of a patch"),
            ));
        }
        let mut r = rng::stream(seed ^ 0xc0de_c0de, Stream::Weights);
        let random = rng::normal(&mut r, [p, channels]);
        let ff = factor * factor;
        let encoder = Tensor::from_fn([p, channels], |i| {
            let (row, col) = (i / channels, i % channels);
            if col < 3 {
                if row / ff == col {
                    1.0 / ff as f64
                } else {
                    0.0
                }
            } else {
                random.data()[i] / libm::sqrt(p as f64)
            }
        });
        let gram = tensor::matmul_tn(&encoder, &encoder)?;
        let linear = tensor::solve(&gram, &encoder.transpose2()?)?;
        let hidden = rng::normal(&mut r, [channels, HIDDEN]).map(|x| x / libm::sqrt(channels as f64));
        Ok(Self {
            factor,
            channels,
            scaling: 1.0,
            encoder,
            decoder: DecoderWeights {
                linear,
                bias: Tensor::zeros([p]),
                hidden,
                hidden_bias: Tensor::zeros([HIDDEN]),
                out: Tensor::zeros([HIDDEN, p]),
            },
        })
    }

    /// Factor-1, three-channel codec whose round trip is exact.
    pub fn identity() -> Self {
        let eye = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        Self {
            factor: 1,
            channels: 3,
            scaling: 1.0,
            encoder: eye.clone(),
            decoder: DecoderWeights {
                linear: eye,
                bias: Tensor::zeros([3]),
                hidden: Tensor::zeros([3, 4]),
                hidden_bias: Tensor::zeros([4]),
                out: Tensor::zeros([4, 3]),
            },
        }
    }

    /// Rebuilds a codec from stored parts, checking shapes.
    pub fn from_parts(factor: usize, channels: usize, scaling: f64, encoder: Tensor, decoder: DecoderWeights) -> Result<Self> {
        let p = 3 * factor * factor;
        let hidden = decoder.hidden.dims2()?.1;
        let ok = encoder.shape() == [p, channels]
            && decoder.linear.shape() == [channels, p]
            && decoder.bias.shape() == [p]
            && decoder.hidden.shape() == [channels, hidden]
            && decoder.hidden_bias.shape() == [hidden]
            && decoder.out.shape() == [hidden, p];
        if !ok || !(scaling > 0.0) {
            return Err(Error::config("codec", "stored codec tensors have inconsistent shapes"));
        }
        Ok(Self {
            factor,
            channels,
            scaling,
            encoder,
            decoder,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.channels
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn encoder(&self) -> &Tensor {
        &self.encoder
    }

    pub fn decoder(&self) -> &DecoderWeights {
        &self.decoder
    }

    /// Copy of this codec with other decoder weights.
    pub fn with_decoder(&self, decoder: DecoderWeights) -> Result<Self> {
        Self::from_parts(self.factor, self.channels, self.scaling, self.encoder.clone(), decoder)
    }

    /// Latent grid `(h, w)` for an image, or a resolution error.
    pub fn latent_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height == 0 || width == 0 || height % self.factor != 0 || width % self.factor != 0 {
            return Err(Error::Resolution {
                height,
                width,
                factor: self.factor,
            });
        }
        Ok((height / self.factor, width / self.factor))
    }

    /// `[tokens, 3·f²]` patch matrix of an image.
    fn patchify(&self, image: &Image) -> Result<Tensor> {
        let (h, w) = self.latent_hw(image.height(), image.width())?;
        let f = self.factor;
        let (ih, iw) = (image.height(), image.width());
        let src = image.tensor().data();
        let p = 3 * f * f;
        Ok(Tensor::from_fn([h * w, p], |i| {
            let (tok, k) = (i / p, i % p);
            let (ty, tx) = (tok / w, tok % w);
            let (c, dy, dx) = (k / (f * f), (k / f) % f, k % f);
            src[c * ih * iw + (ty * f + dy) * iw + tx * f + dx]
        }))
    }

    fn unpatchify(&self, patches: &Tensor, h: usize, w: usize) -> Result<Image> {
        let f = self.factor;
        let (ih, iw) = (h * f, w * f);
        let p = 3 * f * f;
        let d = patches.data();
        Image::new(Tensor::from_fn([3, ih, iw], |i| {
            let c = i / (ih * iw);
            let (y, x) = ((i / iw) % ih, i % iw);
            let tok = (y / f) * w + x / f;
            let k = c * f * f + (y % f) * f + x % f;
            d[tok * p + k]
        }))
    }

    pub fn encode(&self, image: &Image) -> Result<LatentImage> {
        let (h, w) = self.latent_hw(image.height(), image.width())?;
        let tokens = tensor::matmul(&self.patchify(image)?, &self.encoder)?;
        let s = self.scaling;
        let latent = tokens.transpose2()?.map(|v| v * s).reshape([self.channels, h, w])?;
        LatentImage::new(latent, self.factor, self.scaling)
    }

    /// Decoder forward on a tape, from `[tokens, channels]` to patches.
    fn decode_on(tape: &mut Tape, tokens: Var, params: &[Var; 5]) -> Result<Var> {
        let [linear, bias, hidden, hidden_bias, out] = *params;
        let base = tape.linear(tokens, linear, Some(bias))?;
        let hdn = tape.linear(tokens, hidden, Some(hidden_bias))?;
        let hdn = tape.silu(hdn);
        let res = tape.matmul(hdn, out)?;
        tape.add(base, res)
    }

    fn latent_tokens(&self, latent: &LatentImage) -> Result<Tensor> {
        let (c, h, w) = latent.tensor().dims3()?;
        if c != self.channels {
            return Err(Error::shape(
                "decode",
                format!("latent has {c} channels, codec expects {}", self.channels),
            ));
        }
        let s = self.scaling;
        latent.tensor().map(|v| v / s).reshape([c, h * w])?.transpose2()
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Image> {
        let (h, w) = latent.hw();
        let mut tape = Tape::new();
        let tokens = tape.constant(self.latent_tokens(latent)?);
        let params = self.decoder.tensors().map(|t| tape.constant(t.clone()));
        let patches = Self::decode_on(&mut tape, tokens, &params)?;
        self.unpatchify(tape.value(patches), h, w)
    }

    /// Fine-tunes a copy of the decoder on one image by minimizing the mean
    /// L1 reconstruction error with Adam; the encoder stays frozen. Returns the
    /// best weights seen, so the final error never exceeds the initial one.
    pub fn finetune_decoder(&self, image: &Image, steps: usize, lr: f64) -> Result<DecoderFinetune> {
        if !(lr > 0.0) {
            return Err(Error::config("lr", format!("must be > 0, got {lr}")));
        }
        let tokens = self.latent_tokens(&self.encode(image)?)?;
        let target = self.patchify(image)?;
        let mut weights = self.decoder.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &weights.tensors());
        let mut losses = Vec::with_capacity(steps + 1);
        let mut best = (f64::INFINITY, weights.clone());
        for step in 0..=steps {
            let mut tape = Tape::new();
            let tv = tape.constant(tokens.clone());
            let params = weights.tensors().map(|t| tape.leaf(t.clone()));
            let out = Self::decode_on(&mut tape, tv, &params)?;
            let tgt = tape.constant(target.clone());
            let loss = tape.l1_mean(out, tgt)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: "decoder fine-tuning",
                    index: step,
                });
            }
            losses.push(value);
            if value < best.0 {
                best = (value, weights.clone());
            }
            if step == steps {
                break;
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = params
                .iter()
                .zip(weights.tensors())
                .map(|(&p, t)| grads.get_or_zeros(p, t))
                .collect();
            let grefs: Vec<&Tensor> = g.iter().collect();
            adam.step(&mut weights.tensors_mut(), &grefs)?;
        }
        let initial_l1 = losses[0];
        let (final_l1, weights) = best;
        losses.pop();
        Ok(DecoderFinetune {
            codec: self.with_decoder(weights)?,
            initial_l1,
            final_l1,
            losses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn factor_eight_codec_shapes() {
        let codec = Codec::toy(1, 8, 4).unwrap();
        let img = synthetic::stripes(512, 512, 0);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.tensor().shape(), &[4, 64, 64]);
        let back = codec.decode(&z).unwrap();
        assert_eq!((back.width(), back.height()), (512, 512));
    }

    #[test]
    fn identity_codec_round_trips_exactly() {
        let codec = Codec::identity();
        let img = synthetic::noise_texture(6, 4, 11);
        let z = codec.encode(&img).unwrap();
        assert_eq!(codec.decode(&z).unwrap(), img);
    }

    #[test]
    fn non_divisible_resolution_is_rejected() {
        let codec = Codec::toy(1, 8, 4).unwrap();
        let img = synthetic::stripes(12, 16, 0);
        assert!(matches!(codec.encode(&img), Err(Error::Resolution { .. })));
    }

    #[test]
    fn round_trip_beats_an_unrelated_image() {
        let codec = Codec::toy(1, 2, 4).unwrap();
        let img = synthetic::blobs(32, 32, 5);
        let other = synthetic::stripes(32, 32, 9);
        let rec = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        assert!(rec.l1(&img).unwrap() < other.l1(&img).unwrap());
    }

    #[test]
    fn zero_step_finetune_is_a_no_op() {
        let codec = Codec::toy(1, 2, 4).unwrap();
        let img = synthetic::blobs(16, 16, 5);
        let ft = codec.finetune_decoder(&img, 0, 0.01).unwrap();
        assert_eq!(ft.codec, codec);
        assert_eq!(ft.initial_l1, ft.final_l1);
    }
}
