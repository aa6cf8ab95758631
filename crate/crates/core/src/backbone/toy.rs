use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::{Conditioning, Denoiser, DenoiserOutput};
use crate::attention::{attend, TapVars};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::{self, Stream};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

/// Shape and seed of the toy denoiser.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ToyConfig {
    pub seed: u64,
    pub latent_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Number of self-attention layers.
    pub layers: usize,
    pub time_dim: usize,
    pub prompt_dim: usize,
    /// Channels of the structural-condition hook; 0 disables it.
    pub condition_channels: usize,
    pub t_max: usize,
    pub codec_factor: usize,
    /// Scale of the learned part of the noise prediction.
    pub output_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            latent_channels: 4,
            model_dim: 32,
            heads: 2,
            layers: 10,
            time_dim: 32,
            prompt_dim: 16,
            condition_channels: 0,
            t_max: 100,
            codec_factor: 2,
            output_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub out: Tensor,
    pub out_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyWeights {
    pub input: Tensor,
    pub input_bias: Tensor,
    pub condition: Option<Tensor>,
    pub time_in: Tensor,
    pub time_in_bias: Tensor,
    pub time_out: Tensor,
    pub time_out_bias: Tensor,
    pub prompt: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub output: Tensor,
    pub output_bias: Tensor,
}

impl ToyWeights {
    fn random(c: &ToyConfig) -> Self {
        let mut rng = rng::stream(c.seed, Stream::Weights);
        let d = c.model_dim;
        let blocks = (0..c.layers)
            .map(|_| BlockWeights {
                query: dense(&mut rng, d, d),
                key: dense(&mut rng, d, d),
                value: dense(&mut rng, d, d),
                out: dense(&mut rng, d, d),
                out_bias: Tensor::zeros([d]),
                mlp_in: dense(&mut rng, d, 2 * d),
                mlp_in_bias: Tensor::zeros([2 * d]),
                mlp_out: dense(&mut rng, 2 * d, d),
                mlp_out_bias: Tensor::zeros([d]),
            })
            .collect();
        Self {
            input: dense(&mut rng, c.latent_channels, d),
            input_bias: Tensor::zeros([d]),
            condition: (c.condition_channels > 0).then(|| dense(&mut rng, c.condition_channels, d)),
            time_in: dense(&mut rng, c.time_dim, d),
            time_in_bias: Tensor::zeros([d]),
            time_out: dense(&mut rng, d, d),
            time_out_bias: Tensor::zeros([d]),
            prompt: dense(&mut rng, c.prompt_dim, d),
            blocks,
            output: dense(&mut rng, d, c.latent_channels),
            output_bias: Tensor::zeros([c.latent_channels]),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = alloc::vec![
            &self.input,
            &self.input_bias,
            &self.time_in,
            &self.time_in_bias,
            &self.time_out,
            &self.time_out_bias,
            &self.prompt,
            &self.output,
            &self.output_bias,
        ];
        if let Some(c) = &self.condition {
            v.push(c);
        }
        for b in &self.blocks {
            v.extend([
                &b.query,
                &b.key,
                &b.value,
                &b.out,
                &b.out_bias,
                &b.mlp_in,
                &b.mlp_in_bias,
                &b.mlp_out,
                &b.mlp_out_bias,
            ]);
        }
        v
    }
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let s = 1.0 / libm::sqrt(fan_in as f64);
    rng::normal(rng, [fan_in, fan_out]).map(|x| x * s)
}

/// A small untrained transformer-style UNet with genuine self-attention.
///
/// Latent pixels are tokens. The first third of the layers run at full
/// resolution, the middle third on a 2×2-pooled grid, and the rest back at
/// full resolution with a skip connection. Every block adds the timestep
/// (and prompt) embedding, runs multi-head self-attention in a residual
/// branch, then a residual MLP.
///
/// The noise prediction is `√(1−ᾱ_t)·z_t` (the posterior mean for a unit
/// Gaussian data prior) plus a scaled network output, which keeps DDIM
/// trajectories well conditioned even though the weights are random.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUnet {
    config: ToyConfig,
    weights: ToyWeights,
    schedule: DiffusionSchedule,
    identity_connection: bool,
}

impl ToyUnet {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let weights = ToyWeights::random(&config);
        Self::from_parts(config, weights)
    }

    /// Rebuilds a network from stored weights, checking every shape.
    pub fn from_parts(config: ToyConfig, weights: ToyWeights) -> Result<Self> {
        let c = &config;
        if c.layers == 0 || c.heads == 0 || c.model_dim % c.heads != 0 || c.time_dim % 2 != 0 {
            return Err(Error::config(
                "toy",
                format!(
                    "layers {} / heads {} / model_dim {} / time_dim {} are inconsistent",
                    c.layers, c.heads, c.model_dim, c.time_dim
                ),
            ));
        }
        let d = c.model_dim;
        let expect = |t: &Tensor, shape: &[usize], name: &'static str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(name, format!("expected {shape:?}, got {:?}", t.shape())));
            }
            Ok(())
        };
        let w = &weights;
        expect(&w.input, &[c.latent_channels, d], "input")?;
        expect(&w.input_bias, &[d], "input_bias")?;
        expect(&w.time_in, &[c.time_dim, d], "time_in")?;
        expect(&w.time_out, &[d, d], "time_out")?;
        expect(&w.prompt, &[c.prompt_dim, d], "prompt")?;
        expect(&w.output, &[d, c.latent_channels], "output")?;
        expect(&w.output_bias, &[c.latent_channels], "output_bias")?;
        match (&w.condition, c.condition_channels) {
            (None, 0) => {}
            (Some(t), n) if n > 0 => expect(t, &[n, d], "condition")?,
            _ => return Err(Error::config("condition_channels", "does not match stored weights")),
        }
        if w.blocks.len() != c.layers {
            return Err(Error::config("layers", format!("{} blocks stored", w.blocks.len())));
        }
        for b in &w.blocks {
            expect(&b.query, &[d, d], "query")?;
            expect(&b.key, &[d, d], "key")?;
            expect(&b.value, &[d, d], "value")?;
            expect(&b.out, &[d, d], "out")?;
            expect(&b.mlp_in, &[d, 2 * d], "mlp_in")?;
            expect(&b.mlp_out, &[2 * d, d], "mlp_out")?;
        }
        let schedule = DiffusionSchedule::scaled_linear(c.t_max)?;
        Ok(Self {
            config,
            weights,
            schedule,
            identity_connection: true,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    /// Drops the identity connection around every attention branch, so the
    /// block output is the attention branch alone. Used to show that
    /// gradients reach the latent through both paths.
    pub fn without_identity_connection(mut self) -> Self {
        self.identity_connection = false;
        self
    }

    fn pooled_range(&self) -> (usize, usize) {
        let l = self.config.layers;
        (l / 3, 2 * l / 3)
    }

    fn time_embedding(&self, t: usize) -> Tensor {
        let half = self.config.time_dim / 2;
        Tensor::from_fn([1, self.config.time_dim], |i| {
            let k = i % half;
            let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
            let arg = t as f64 * freq;
            if i < half {
                libm::sin(arg)
            } else {
                libm::cos(arg)
            }
        })
    }

    /// Mean of per-word seeded Gaussian vectors; `None` for an empty prompt.
    fn prompt_embedding(&self, prompt: &str) -> Option<Tensor> {
        let p = self.config.prompt_dim;
        let mut acc = Tensor::zeros([1, p]);
        let mut words = 0usize;
        for word in prompt.split_whitespace() {
            let mut lower = alloc::string::String::with_capacity(word.len());
            lower.extend(word.chars().flat_map(char::to_lowercase));
            let mut r = rng::stream(rng::fnv1a(lower.as_bytes()), Stream::Prompt);
            acc.add_assign(&rng::normal(&mut r, [1, p])).ok()?;
            words += 1;
        }
        (words > 0).then(|| acc.map(|x| x / words as f64))
    }

    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        emb: Var,
        layer: usize,
        tap: bool,
    ) -> Result<(Var, Option<TapVars>)> {
        let w = &self.weights.blocks[layer];
        let heads = self.config.heads;
        let hd = self.config.model_dim / heads;
        let h = tape.add_row(x, emb)?;
        let a = tape.layer_norm(h)?;
        let (wq, wk, wv) = (
            tape.constant(w.query.clone()),
            tape.constant(w.key.clone()),
            tape.constant(w.value.clone()),
        );
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let mut tv = TapVars {
            layer_id: layer,
            q: Vec::with_capacity(heads),
            k: Vec::with_capacity(heads),
            v: Vec::with_capacity(heads),
        };
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qi = tape.slice_cols(q, i * hd, hd)?;
            let ki = tape.slice_cols(k, i * hd, hd)?;
            let vi = tape.slice_cols(v, i * hd, hd)?;
            outs.push(attend(tape, qi, ki, vi, None)?.0);
            tv.q.push(qi);
            tv.k.push(ki);
            tv.v.push(vi);
        }
        let o = tape.concat_cols(&outs)?;
        let (wo, bo) = (tape.constant(w.out.clone()), tape.constant(w.out_bias.clone()));
        let o = tape.linear(o, wo, Some(bo))?;
        let x = if self.identity_connection {
            tape.add(h, o)?
        } else {
            o
        };
        let m = tape.layer_norm(x)?;
        let (w1, b1) = (tape.constant(w.mlp_in.clone()), tape.constant(w.mlp_in_bias.clone()));
        let m = tape.linear(m, w1, Some(b1))?;
        let m = tape.silu(m);
        let (w2, b2) = (tape.constant(w.mlp_out.clone()), tape.constant(w.mlp_out_bias.clone()));
        let m = tape.linear(m, w2, Some(b2))?;
        let x = tape.add(x, m)?;
        Ok((x, tap.then_some(tv)))
    }
}

impl Denoiser for ToyUnet {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn attention_layers(&self) -> usize {
        self.config.layers
    }

    fn layer_stride(&self, layer: usize) -> usize {
        let (lo, hi) = self.pooled_range();
        if (lo..hi).contains(&layer) {
            2
        } else {
            1
        }
    }

    fn accepts_condition(&self) -> bool {
        self.config.condition_channels > 0
    }

    fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        t: usize,
        cond: &Conditioning<'_>,
        tap_layers: &[usize],
    ) -> Result<DenoiserOutput> {
        let (c, h, w) = tape.value(z).dims3()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(
                "toy forward",
                format!("latent has {c} channels, expected {}", self.config.latent_channels),
            ));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (lo, hi) = self.pooled_range();
        if lo < hi && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::Resolution {
                height: h,
                width: w,
                factor: 2,
            });
        }
        let n = h * w;
        let wt = &self.weights;
        let tokens = tape.reshape(z, &[c, n])?;
        let tokens = tape.transpose(tokens)?;
        let (wi, bi) = (tape.constant(wt.input.clone()), tape.constant(wt.input_bias.clone()));
        let mut x = tape.linear(tokens, wi, Some(bi))?;

        if let Some(s) = cond.structure {
            let Some(wc) = &wt.condition else {
                return Err(Error::ConditionUnsupported);
            };
            let cc = self.config.condition_channels;
            if s.shape() != [cc, h, w] {
                return Err(Error::shape(
                    "condition",
                    format!("expected [{cc}, {h}, {w}], got {:?}", s.shape()),
                ));
            }
            let st = tape.constant(s.clone().reshape([cc, n])?.transpose2()?);
            let wc = tape.constant(wc.clone());
            let sc = tape.matmul(st, wc)?;
            x = tape.add(x, sc)?;
        }

        let te = tape.constant(self.time_embedding(t));
        let (t1, tb1) = (tape.constant(wt.time_in.clone()), tape.constant(wt.time_in_bias.clone()));
        let e = tape.linear(te, t1, Some(tb1))?;
        let e = tape.silu(e);
        let (t2, tb2) = (tape.constant(wt.time_out.clone()), tape.constant(wt.time_out_bias.clone()));
        let mut emb = tape.linear(e, t2, Some(tb2))?;
        if let Some(p) = self.prompt_embedding(cond.prompt) {
            let p = tape.constant(p);
            let wp = tape.constant(wt.prompt.clone());
            let pe = tape.matmul(p, wp)?;
            emb = tape.add(emb, pe)?;
        }

        let mut taps = Vec::with_capacity(tap_layers.len());
        let mut skip = None;
        for layer in 0..self.config.layers {
            if lo < hi && layer == lo {
                skip = Some(x);
                x = tape.avg_pool2(x, h, w)?;
            }
            if lo < hi && layer == hi {
                x = tape.upsample2(x, h / 2, w / 2)?;
                if let Some(s) = skip.take() {
                    x = tape.add(x, s)?;
                }
            }
            let want = tap_layers.contains(&layer);
            let (next, tap) = self.block(tape, x, emb, layer, want)?;
            x = next;
            taps.extend(tap);
        }

        let y = tape.layer_norm(x)?;
        let (wo, bo) = (tape.constant(wt.output.clone()), tape.constant(wt.output_bias.clone()));
        let y = tape.linear(y, wo, Some(bo))?;
        let y = tape.scale(y, self.config.output_scale);
        let prior = tape.scale(tokens, libm::sqrt(1.0 - ab));
        let eps = tape.add(y, prior)?;
        let eps = tape.transpose(eps)?;
        let noise = tape.reshape(eps, &[c, h, w])?;
        Ok(DenoiserOutput { noise, taps })
    }

    fn weights_digest(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.weights.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        rng::fnv1a(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(seed: u64) -> Tensor {
        rng::normal(&mut rng::stream(seed, Stream::InitialLatent), [4, 8, 8])
    }

    fn run(unet: &ToyUnet, z: &Tensor, t: usize, prompt: &str, layers: &[usize]) -> (Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = unet.forward(&mut tape, zv, t, &Conditioning::prompt(prompt), layers).unwrap();
        let taps = out.taps.iter().map(|tv| tape.value(tv.q[0]).clone()).collect();
        (tape.value(out.noise).clone(), taps)
    }

    #[test]
    fn output_shape_matches_input() {
        let unet = ToyUnet::new(ToyConfig::default()).unwrap();
        let z = latent(1);
        let (eps, taps) = run(&unet, &z, 50, "", &[0, 4, 9]);
        assert_eq!(eps.shape(), z.shape());
        assert_eq!(taps.len(), 3);
        assert_eq!(taps[0].shape(), &[64, 16]);
        assert_eq!(taps[1].shape(), &[16, 16]);
    }

    #[test]
    fn timestep_and_prompt_are_live() {
        let unet = ToyUnet::new(ToyConfig::default()).unwrap();
        let z = latent(2);
        let (_, a) = run(&unet, &z, 100, "", &[9]);
        let (_, b) = run(&unet, &z, 0, "", &[9]);
        assert_ne!(a, b);
        let (pa, _) = run(&unet, &z, 30, "", &[]);
        let (pb, _) = run(&unet, &z, 30, "oil painting", &[]);
        assert_ne!(pa, pb);
        let (pc, _) = run(&unet, &z, 30, "Oil  PAINTING", &[]);
        assert_eq!(pb, pc);
    }

    #[test]
    fn odd_latent_is_unsupported() {
        let unet = ToyUnet::new(ToyConfig::default()).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([4, 7, 8]));
        let err = unet
            .forward(&mut tape, z, 3, &Conditioning::unconditional(), &[])
            .err()
            .unwrap();
        assert!(matches!(err, Error::Resolution { .. }));
    }

    #[test]
    fn rebuild_from_parts_checks_shapes() {
        let unet = ToyUnet::new(ToyConfig::default()).unwrap();
        let mut w = unet.weights().clone();
        assert!(ToyUnet::from_parts(unet.config().clone(), w.clone()).is_ok());
        w.blocks.pop();
        assert!(ToyUnet::from_parts(unet.config().clone(), w).is_err());
    }
}
