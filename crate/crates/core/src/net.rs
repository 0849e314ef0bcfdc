//! Toy watermark encoder/decoder with a stochastic bottleneck.
//!
//! Data flow per image: the cover and `L` message planes (`2b - 1`) go
//! through three 3x3 convolutions to a residual; `x_wm = clip(x + r, 0, 1)`.
//! The (possibly distorted) image goes through three convolutions and a
//! spatial mean to a feature vector `Z`, two dense heads give `mu` and a
//! clipped `logvar`, `U = mu + alpha * eps * exp(logvar / 2)` in training and
//! `U = mu` at inference, and a dense layer maps `U` to `L` logits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_gradient, GradCheckReport, ParamEntry, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{psnr, CoverImage, Message};
use crate::noise::DistortionSpec;
use crate::par;
use crate::seed::{self, Purpose, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VIBConfig {
    pub alpha: f64,
    pub beta: f64,
    pub latent_dim: usize,
    pub logvar_clip: [f64; 2],
}

impl Default for VIBConfig {
    fn default() -> Self {
        Self {
            alpha: 0.007,
            beta: 1.5e-4,
            latent_dim: 32,
            logvar_clip: [-10.0, 10.0],
        }
    }
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub msg_len: usize,
    pub enc_channels: usize,
    pub ext_channels: usize,
    pub feature_dim: usize,
    /// Modulate message planes with fixed carriers that the extractor also sees.
    pub keyed: bool,
    /// Side of the constant-sign blocks of each carrier.
    pub key_block: usize,
    pub vib: VIBConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            msg_len: 16,
            enc_channels: 16,
            ext_channels: 16,
            feature_dim: 64,
            keyed: true,
            key_block: 2,
            vib: VIBConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vib;
        let counts = [self.height, self.width, self.msg_len, self.enc_channels, self.ext_channels, self.feature_dim, v.latent_dim];
        if counts.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(v.alpha >= 0.0 && v.alpha.is_finite()) || !(v.beta >= 0.0 && v.beta.is_finite()) {
            return Err(Error::Config("alpha and beta must be finite and >= 0".into()));
        }
        if !(v.logvar_clip[0] < v.logvar_clip[1]) {
            return Err(Error::Config("logvar_clip must be an increasing pair".into()));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, e, f, d, l) = (self.enc_channels, self.ext_channels, self.feature_dim, self.vib.latent_dim, self.msg_len);
        vec![
            ("enc0.w", vec![c, if self.keyed { 2 } else { 1 + l }, 3, 3]),
            ("enc0.b", vec![c]),
            ("enc1.w", vec![c, c, 3, 3]),
            ("enc1.b", vec![c]),
            ("enc2.w", vec![1, c, 3, 3]),
            ("enc2.b", vec![1]),
            ("ext0.w", vec![e, 1, 3, 3]),
            ("ext0.b", vec![e]),
            ("ext1.w", vec![e, e, 3, 3]),
            ("ext1.b", vec![e]),
            ("ext2.w", vec![f, e, 3, 3]),
            ("ext2.b", vec![f]),
            ("mu.w", vec![f, d]),
            ("mu.b", vec![d]),
            ("logvar.w", vec![f, d]),
            ("logvar.b", vec![d]),
            ("dec.w", vec![d, l]),
            ("dec.b", vec![l]),
        ]
    }
}

const ENC: usize = 0;
const EXT: usize = 6;
const MU: usize = 12;
const LOGVAR: usize = 14;
const DEC: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Weights plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkModel {
    pub config: ModelConfig,
    pub seed: u64,
    params: Vec<Tensor>,
}

/// Infer-mode decoder outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub logits: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl Decoded {
    /// Mean binary cross-entropy against `msg`.
    pub fn bce(&self, msg: &Message) -> f64 {
        let sum: f64 = self
            .logits
            .iter()
            .zip(msg.bits())
            .map(|(l, b)| l.max(0.0) - l * *b as f64 + (-l.abs()).exp().ln_1p())
            .sum();
        sum / self.logits.len() as f64
    }

    /// `KL(N(mu, exp(logvar)) || N(0, I))`.
    pub fn kl(&self) -> f64 {
        0.5 * self.mu.iter().zip(&self.logvar).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
    }
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_img: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Vars of one recorded training-style forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub cover: Var,
    pub watermarked: Var,
    pub attacked: Var,
    pub mu: Var,
    pub logvar: Var,
    pub u: Var,
    pub logits: Var,
    pub loss: Var,
    pub components: LossComponents,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "D")]
    d: usize,
    alpha: f64,
    beta: f64,
    logvar_clip: [f64; 2],
    seed: u64,
    enc_channels: usize,
    ext_channels: usize,
    feature_dim: usize,
    keyed: bool,
    key_block: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    header: CheckpointHeader,
    params: ParamStore,
}

fn stack(images: &[&CoverImage]) -> Result<Tensor> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height(), im.width()) != (h, w) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(im.pixels());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

impl WatermarkModel {
    /// He-normal weights and zero biases from the weight stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, Purpose::Weights);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
                    // A small residual at initialization keeps early PSNR sane.
                    let gain = if name == "enc2.w" { 0.01 } else { 1.0 };
                    let std = gain * (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, seed, params })
    }

    /// Zeroes the encoder's output layer so the residual is exactly zero.
    pub fn zero_encoder_output(mut self) -> Self {
        for p in &mut self.params[ENC + 4..ENC + 6] {
            p.data_mut().fill(0.0);
        }
        self
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.requires_grad = with_grad;
                t.grad = None;
                tape.leaf(t)
            })
            .collect()
    }

    fn conv(tape: &mut Tape, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        let y = tape.conv2d(x, w)?;
        let y = tape.add_channel_bias(y, b)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    /// Fixed +-1 carrier planes, `L x h x w`, constant on `key_block` squares.
    pub fn carriers(&self) -> Vec<f64> {
        let c = &self.config;
        let (l, h, w, b) = (c.msg_len, c.height, c.width, c.key_block.max(1));
        let mut rng = seed::indexed_stream(self.seed, Purpose::Weights, u64::MAX);
        let (bh, bw) = (h.div_ceil(b), w.div_ceil(b));
        let signs: Vec<f64> = (0..l * bh * bw).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut out = Vec::with_capacity(l * h * w);
        for k in 0..l {
            for y in 0..h {
                for x in 0..w {
                    out.push(signs[(k * bh + y / b) * bw + x / b]);
                }
            }
        }
        out
    }

    /// Constant `2b-1` planes, or in keyed mode the single spread plane
    /// `sum_k (2b_k-1) C_k / sqrt(L)`.
    fn message_planes(&self, msgs: &[&Message]) -> Result<Tensor> {
        let c = &self.config;
        let (l, hw) = (c.msg_len, c.height * c.width);
        for m in msgs {
            if m.len() != l {
                return Err(Error::Shape(format!("message of {} bits, model expects {l}", m.len())));
            }
        }
        if c.keyed {
            let carriers = self.carriers();
            let norm = (l as f64).sqrt();
            let mut data = Vec::with_capacity(msgs.len() * hw);
            for m in msgs {
                let mut plane = vec![0.0; hw];
                for (k, b) in m.bits().iter().enumerate() {
                    let s = (2.0 * *b as f64 - 1.0) / norm;
                    plane.iter_mut().zip(&carriers[k * hw..(k + 1) * hw]).for_each(|(p, c)| *p += s * c);
                }
                data.extend(plane);
            }
            return Tensor::new(vec![msgs.len(), 1, c.height, c.width], data);
        }
        let mut data = Vec::with_capacity(msgs.len() * l * hw);
        for m in msgs {
            for b in m.bits() {
                data.extend(std::iter::repeat_n(2.0 * *b as f64 - 1.0, hw));
            }
        }
        Tensor::new(vec![msgs.len(), l, c.height, c.width], data)
    }

    pub fn embed_vars(&self, tape: &mut Tape, p: &[Var], x: Var, msgs: &[&Message]) -> Result<Var> {
        let planes = tape.constant(self.message_planes(msgs)?);
        let inp = tape.concat_channels(x, planes)?;
        let h = Self::conv(tape, inp, p[ENC], p[ENC + 1], true)?;
        let h = Self::conv(tape, h, p[ENC + 2], p[ENC + 3], true)?;
        let r = Self::conv(tape, h, p[ENC + 4], p[ENC + 5], false)?;
        let y = tape.add(x, r)?;
        Ok(tape.clip(y, 0.0, 1.0))
    }

    /// Feature vector `Z`, shape `[n, feature_dim]`.
    pub fn extract_vars(&self, tape: &mut Tape, p: &[Var], img: Var) -> Result<Var> {
        let h = Self::conv(tape, img, p[EXT], p[EXT + 1], true)?;
        let h = Self::conv(tape, h, p[EXT + 2], p[EXT + 3], true)?;
        let h = Self::conv(tape, h, p[EXT + 4], p[EXT + 5], !self.config.keyed)?;
        if !self.config.keyed {
            return tape.spatial_mean(h);
        }
        let c = &self.config;
        let (n, hw) = (tape.shape(h)[0], c.height * c.width);
        let carriers = self.carriers();
        let mut key = Vec::with_capacity(n * c.feature_dim * hw);
        for _ in 0..n {
            for j in 0..c.feature_dim {
                let k = j % c.msg_len;
                key.extend_from_slice(&carriers[k * hw..(k + 1) * hw]);
            }
        }
        let key = tape.constant(Tensor::new(vec![n, c.feature_dim, c.height, c.width], key)?);
        let h = tape.mul(h, key)?;
        tape.spatial_mean(h)
    }

    /// `(mu, logvar)` with logvar clipped to the configured range.
    pub fn heads_vars(&self, tape: &mut Tape, p: &[Var], z: Var) -> Result<(Var, Var)> {
        let mu = tape.matmul(z, p[MU])?;
        let mu = tape.add_row_bias(mu, p[MU + 1])?;
        let lv = tape.matmul(z, p[LOGVAR])?;
        let lv = tape.add_row_bias(lv, p[LOGVAR + 1])?;
        let [lo, hi] = self.config.vib.logvar_clip;
        Ok((mu, tape.clip(lv, lo, hi)))
    }

    /// Reparameterized draw. `eps` enters the tape as a constant.
    pub fn sample_vars(&self, tape: &mut Tape, mu: Var, logvar: Var, mode: Mode, alpha: f64, rng: &mut Rng) -> Result<Var> {
        if mode == Mode::Infer {
            return Ok(mu);
        }
        let shape = tape.shape(mu).to_vec();
        let eps: Vec<f64> = (0..shape.iter().product()).map(|_| alpha * rng.sample::<f64, _>(StandardNormal)).collect();
        let eps = tape.constant(Tensor::new(shape, eps)?);
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(eps, std)?;
        tape.add(mu, noise)
    }

    pub fn logits_vars(&self, tape: &mut Tape, p: &[Var], u: Var) -> Result<Var> {
        let y = tape.matmul(u, p[DEC])?;
        tape.add_row_bias(y, p[DEC + 1])
    }

    /// Extractor, heads, sampling and decoder from an image batch.
    pub fn decode_vars(&self, tape: &mut Tape, p: &[Var], img: Var, mode: Mode, rng: &mut Rng) -> Result<(Var, Var, Var, Var)> {
        let z = self.extract_vars(tape, p, img)?;
        let (mu, lv) = self.heads_vars(tape, p, z)?;
        let u = self.sample_vars(tape, mu, lv, mode, self.config.vib.alpha, rng)?;
        let logits = self.logits_vars(tape, p, u)?;
        Ok((mu, lv, u, logits))
    }

    /// Records the full loss `lambda_img MSE + lambda_rec BCE + beta KL` on
    /// the path cover -> embed -> distortion -> decode. With `vib` off the
    /// bottleneck is deterministic and the KL term is left out of the total
    /// (it is still measured).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        covers: &[&CoverImage],
        msgs: &[&Message],
        distortion: &DistortionSpec,
        weights: LossWeights,
        mode: Mode,
        with_grad: bool,
        attack_rng: &mut Rng,
        noise_rng: &mut Rng,
    ) -> Result<ForwardPass> {
        if covers.len() != msgs.len() || covers.is_empty() {
            return Err(Error::Shape("need one message per cover and a non-empty batch".into()));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, with_grad);
        let cover = tape.constant(stack(covers)?);
        if tape.shape(cover)[2..] != [self.config.height, self.config.width] {
            return Err(Error::Shape("cover size differs from model size".into()));
        }
        let xwm = self.embed_vars(&mut tape, &p, cover, msgs)?;
        let attacked = distortion.apply_tape(&mut tape, xwm, cover, attack_rng)?;
        let z = self.extract_vars(&mut tape, &p, attacked)?;
        let (mu, lv) = self.heads_vars(&mut tape, &p, z)?;
        let alpha = if weights.vib { self.config.vib.alpha } else { 0.0 };
        let mode = if weights.vib { mode } else { Mode::Infer };
        let u = self.sample_vars(&mut tape, mu, lv, mode, alpha, noise_rng)?;
        let logits = self.logits_vars(&mut tape, &p, u)?;

        let targets: Vec<f64> = msgs.iter().flat_map(|m| m.as_f64()).collect();
        let l_img = tape.mse(cover, xwm)?;
        let l_rec = tape.bce_with_logits(logits, &targets)?;
        let l_kl = tape.gaussian_kl(mu, lv)?;
        let a = tape.scale(l_img, weights.lambda_img);
        let b = tape.scale(l_rec, weights.lambda_rec);
        let mut loss = tape.add(a, b)?;
        if weights.vib {
            let c = tape.scale(l_kl, self.config.vib.beta);
            loss = tape.add(loss, c)?;
        }
        let components = LossComponents {
            l_img: tape.data(l_img)[0],
            l_rec: tape.data(l_rec)[0],
            l_kl: tape.data(l_kl)[0],
            total: tape.data(loss)[0],
        };
        Ok(ForwardPass {
            tape,
            params: p,
            cover,
            watermarked: xwm,
            attacked,
            mu,
            logvar: lv,
            u,
            logits,
            loss,
            components,
        })
    }

    /// Single-example loss with its components.
    pub fn total_loss(
        &self,
        cover: &CoverImage,
        msg: &Message,
        distortion: &DistortionSpec,
        weights: LossWeights,
        rng: &mut Rng,
    ) -> Result<LossComponents> {
        let mut noise = rng.clone();
        Ok(self.forward(&[cover], &[msg], distortion, weights, Mode::Train, false, rng, &mut noise)?.components)
    }

    /// Loss gradient with respect to every parameter, in parameter order.
    pub fn loss_gradients(&self, pass: &mut ForwardPass) -> Result<Vec<Vec<f64>>> {
        pass.tape.backward(pass.loss)?;
        Ok(pass
            .params
            .iter()
            .zip(&self.params)
            .map(|(v, t)| pass.tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    }

    /// Watermarks one cover.
    pub fn embed(&self, cover: &CoverImage, msg: &Message) -> Result<CoverImage> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(stack(&[cover])?);
        let y = self.embed_vars(&mut tape, &p, x, &[msg])?;
        CoverImage::new(cover.height(), cover.width(), tape.data(y).to_vec())
    }

    /// Deterministic (infer-mode) logits and hard bits.
    pub fn decode(&self, image: &CoverImage) -> Result<(Vec<f64>, Message)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(stack(&[image])?);
        // Infer mode draws nothing from the generator.
        let mut unused = seed::stream(0, Purpose::VibNoise);
        let (_, _, _, logits) = self.decode_vars(&mut tape, &p, x, Mode::Infer, &mut unused)?;
        let l = tape.data(logits).to_vec();
        let bits = Message::from_logits(&l);
        Ok((l, bits))
    }

    /// Infer-mode logits together with the bottleneck parameters.
    pub fn decode_full(&self, image: &CoverImage) -> Result<Decoded> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(stack(&[image])?);
        let mut unused = seed::stream(0, Purpose::VibNoise);
        let (mu, lv, _, logits) = self.decode_vars(&mut tape, &p, x, Mode::Infer, &mut unused)?;
        Ok(Decoded {
            logits: tape.data(logits).to_vec(),
            mu: tape.data(mu).to_vec(),
            logvar: tape.data(lv).to_vec(),
        })
    }

    /// Bottleneck sample from a feature batch `z` of shape `[n, feature_dim]`.
    /// Returns `(U, mu, logvar)`.
    pub fn vib_sample(&self, z: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (mu, lv) = self.heads_vars(&mut tape, &p, zv)?;
        let u = self.sample_vars(&mut tape, mu, lv, mode, self.config.vib.alpha, rng)?;
        Ok((tape.value(u).clone(), tape.value(mu).clone(), tape.value(lv).clone()))
    }

    /// Feature vector of one image.
    pub fn features(&self, image: &CoverImage) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(stack(&[image])?);
        let z = self.extract_vars(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }

    /// Gradient of the infer-mode BCE decoding loss for `msg` with respect
    /// to the input image.
    pub fn input_gradient(&self, image: &CoverImage, msg: &Message) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.leaf(stack(&[image])?.with_grad());
        let mut unused = seed::stream(0, Purpose::VibNoise);
        let (_, _, _, logits) = self.decode_vars(&mut tape, &p, x, Mode::Infer, &mut unused)?;
        let loss = tape.bce_with_logits(logits, &msg.as_f64())?;
        tape.backward(loss)?;
        Ok(tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; image.pixels().len()]))
    }

    /// Compares [`Self::loss_gradients`] with central differences over every
    /// weight, holding the attack and bottleneck draws of `seed` fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn check_gradients(
        &self,
        covers: &[&CoverImage],
        msgs: &[&Message],
        distortion: &DistortionSpec,
        weights: LossWeights,
        mode: Mode,
        seed: u64,
        h: f64,
    ) -> Result<GradCheckReport> {
        let run = |model: &WatermarkModel, grad: bool| {
            let mut a = seed::stream(seed, Purpose::Attacks);
            let mut n = seed::stream(seed, Purpose::VibNoise);
            model.forward(covers, msgs, distortion, weights, mode, grad, &mut a, &mut n)
        };
        let mut pass = run(self, true)?;
        let kink_margin = pass.tape.kink_margin();
        let analytic: Vec<f64> = self.loss_gradients(&mut pass)?.concat();
        let flat: Vec<f64> = self.params.iter().flat_map(|p| p.data().iter().copied()).collect();
        let mut probe = self.clone();
        let numeric = finite_difference_gradient(
            |w| {
                let mut off = 0;
                for p in probe.params.iter_mut() {
                    let n = p.numel();
                    p.data_mut().copy_from_slice(&w[off..off + n]);
                    off += n;
                }
                run(&probe, false).map_or(f64::NAN, |f| f.components.total)
            },
            &flat,
            h,
        );
        let (mut worst_index, mut max_rel_err) = (0, 0.0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > max_rel_err {
                max_rel_err = e;
                worst_index = i;
            }
        }
        Ok(GradCheckReport {
            max_rel_err,
            worst_index,
            analytic,
            numeric,
            kink_margin,
        })
    }

    pub fn to_store(&self) -> ParamStore {
        self.param_names()
            .into_iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), ParamEntry::from_tensor(t)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.is_finite() {
            return Err(Error::InvalidArgument("model holds non-finite weights".into()));
        }
        let c = &self.config;
        let ck = Checkpoint {
            header: CheckpointHeader {
                l: c.msg_len,
                h: c.height,
                w: c.width,
                d: c.vib.latent_dim,
                alpha: c.vib.alpha,
                beta: c.vib.beta,
                logvar_clip: c.vib.logvar_clip,
                seed: self.seed,
                enc_channels: c.enc_channels,
                ext_channels: c.ext_channels,
                feature_dim: c.feature_dim,
                keyed: c.keyed,
                key_block: c.key_block,
            },
            params: self.to_store(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let h = ck.header;
        let config = ModelConfig {
            height: h.h,
            width: h.w,
            msg_len: h.l,
            enc_channels: h.enc_channels,
            ext_channels: h.ext_channels,
            feature_dim: h.feature_dim,
            keyed: h.keyed,
            key_block: h.key_block,
            vib: VIBConfig {
                alpha: h.alpha,
                beta: h.beta,
                latent_dim: h.d,
                logvar_clip: h.logvar_clip,
            },
        };
        config.validate()?;
        let mut store: BTreeMap<String, ParamEntry> = ck.params;
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let e = store
                .remove(name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {name}")))?;
            if e.shape != shape {
                return Err(Error::Shape(format!("parameter {name}: expected {shape:?}, found {:?}", e.shape)));
            }
            params.push(e.to_tensor()?);
        }
        if let Some(extra) = store.keys().next() {
            return Err(Error::Parse(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(Self { config, seed: h.seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Loss weights and the bottleneck switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_rec: f64,
    pub vib: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_img: 1.0,
            lambda_rec: 1.0,
            vib: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_img: f64,
    pub lambda_rec: f64,
    pub seed: u64,
    pub pool: Vec<DistortionSpec>,
    pub vib_enabled: bool,
    /// Fraction of covers held out for validation.
    pub val_fraction: f64,
    /// Epochs over which `lambda_img` ramps linearly up from zero.
    pub img_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda_img: 1.0,
            lambda_rec: 1.0,
            seed: 0,
            pool: DistortionSpec::default_pool(),
            vib_enabled: true,
            val_fraction: 0.1,
            img_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.lambda_img >= 0.0) || !(self.lambda_rec >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.pool.is_empty() {
            return Err(Error::Config("distortion pool is empty".into()));
        }
        self.pool.iter().try_for_each(DistortionSpec::validate)
    }

    pub fn weights(&self) -> LossWeights {
        self.weights_at(usize::MAX)
    }

    /// Loss weights in effect during `epoch`.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        let ramp = if epoch >= self.img_warmup_epochs { 1.0 } else { epoch as f64 / self.img_warmup_epochs as f64 };
        LossWeights {
            lambda_img: self.lambda_img * ramp,
            lambda_rec: self.lambda_rec,
            vib: self.vib_enabled,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch training record. `loss` is the epoch-mean objective at the
/// configured weights, so it is comparable across a warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub l_img: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub train_ber: f64,
    pub val_ber: f64,
    pub val_psnr: f64,
}

/// Deterministic train/validation split of `n` items.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed, Purpose::Split));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn mean_ber(logits: &[f64], msgs: &[&Message]) -> f64 {
    let l = msgs[0].len();
    let wrong: usize = msgs
        .iter()
        .enumerate()
        .map(|(i, m)| {
            m.bits()
                .iter()
                .zip(&logits[i * l..(i + 1) * l])
                .filter(|(b, z)| (**z >= 0.0) != (**b == 1))
                .count()
        })
        .sum();
    wrong as f64 / (l * msgs.len()) as f64
}

/// Mean infer-mode BER over `covers`, image `i` attacked with
/// `pool[i % pool.len()]`. Messages and attack draws are keyed by `seed`
/// and the image index, so the result does not depend on evaluation order.
pub fn eval_ber(model: &WatermarkModel, covers: &[&CoverImage], pool: &[DistortionSpec], seed: u64) -> Result<f64> {
    if covers.is_empty() {
        return Ok(0.0);
    }
    let bers = par::map_range(covers.len(), |i| -> Result<f64> {
        let mut rng = seed::indexed_stream(seed, Purpose::Eval, i as u64);
        let msg = Message::random(model.config.msg_len, &mut rng);
        let wm = model.embed(covers[i], &msg)?;
        let out = crate::noise::apply(&pool[i % pool.len()], &wm, covers[i], &mut rng)?;
        let (_, bits) = model.decode(&out.image)?;
        Ok(bits.ber(&msg))
    });
    let bers = bers.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(bers.iter().sum::<f64>() / bers.len() as f64)
}

/// Mean PSNR of watermarked against cover over `covers`.
pub fn eval_psnr(model: &WatermarkModel, covers: &[&CoverImage], seed: u64) -> Result<f64> {
    let vals = par::map_range(covers.len(), |i| -> Result<f64> {
        let mut rng = seed::indexed_stream(seed, Purpose::Eval, i as u64);
        let msg = Message::random(model.config.msg_len, &mut rng);
        let wm = model.embed(covers[i], &msg)?;
        Ok(psnr(covers[i].pixels(), wm.pixels()))
    });
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Runs the training loop. Each batch: draw messages, embed, pick one
/// distortion from the pool, decode in train mode, take an Adam step.
pub fn train(mut model: WatermarkModel, cfg: &TrainConfig, covers: &[CoverImage]) -> Result<(WatermarkModel, Vec<EpochStats>)> {
    let history = train_with(&mut model, cfg, covers, |_| {})?;
    Ok((model, history))
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut WatermarkModel,
    cfg: &TrainConfig,
    covers: &[CoverImage],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if covers.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two covers".into()));
    }
    let (train_idx, val_idx) = split_indices(covers.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<&CoverImage> = val_idx.iter().map(|&i| &covers[i]).collect();
    let mut opt = Adam::new(cfg.learning_rate, model.params());
    let mut msg_rng = seed::stream(cfg.seed, Purpose::Messages);
    let mut attack_rng = seed::stream(cfg.seed, Purpose::Attacks);
    let mut noise_rng = seed::stream(cfg.seed, Purpose::VibNoise);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last = LossComponents::default();

    for epoch in 0..cfg.epochs {
        let weights = cfg.weights_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::indexed_stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut sums = [0.0; 4];
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let cov: Vec<&CoverImage> = batch.iter().map(|&i| &covers[i]).collect();
            let msgs: Vec<Message> = batch.iter().map(|_| Message::random(model.config.msg_len, &mut msg_rng)).collect();
            let msg_refs: Vec<&Message> = msgs.iter().collect();
            let spec = &cfg.pool[attack_rng.random_range(0..cfg.pool.len())];
            let mut pass = model.forward(&cov, &msg_refs, spec, weights, Mode::Train, true, &mut attack_rng, &mut noise_rng)?;
            let c = pass.components;
            if ![c.total, c.l_img, c.l_rec, c.l_kl].iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}; last finite components: L_img={} L_rec={} L_KL={} total={}",
                    last.l_img, last.l_rec, last.l_kl, last.total
                )));
            }
            last = c;
            let ber = mean_ber(pass.tape.data(pass.logits), &msg_refs);
            let grads = model.loss_gradients(&mut pass)?;
            opt.step(model.params_mut(), &grads);
            let k = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([c.l_img, c.l_rec, c.l_kl, ber]) {
                *s += v * k;
            }
            seen += batch.len();
        }
        let n = seen as f64;
        let nominal = cfg.weights();
        let kl = if nominal.vib { model.config.vib.beta * sums[2] } else { 0.0 };
        let stats = EpochStats {
            epoch,
            loss: (nominal.lambda_img * sums[0] + nominal.lambda_rec * sums[1] + kl) / n,
            l_img: sums[0] / n,
            l_rec: sums[1] / n,
            l_kl: sums[2] / n,
            train_ber: sums[3] / n,
            val_ber: eval_ber(model, &val, &cfg.pool, cfg.seed)?,
            val_psnr: eval_psnr(model, &val, cfg.seed)?,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}
