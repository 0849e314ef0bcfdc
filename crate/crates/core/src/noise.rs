//! Differentiable distortion channels.
//!
//! Every channel is built from tape primitives, so gradients reach the
//! input image; random draws (masks, rectangles, noise) enter the tape as
//! constants. Images on the tape have shape `[n, c, h, w]`; the plain
//! [`apply`] entry point wraps a one-image tape.
//!
//! Spec strings look like `name` or `name(key=value,...)` where a value is
//! either a number or an inclusive range `lo..hi` sampled uniformly per
//! image:
//!
//! | channel    | keys            | default                 |
//! |------------|-----------------|-------------------------|
//! | `identity` |                 |                         |
//! | `gaussian` | `sigma`         | `0.05`                  |
//! | `dropout`  | `keep`          | `0.65..0.75`            |
//! | `cropout`  | `ratio`         | `0.25..0.35`            |
//! | `crop`     | `ratio`         | `0.4..0.55`             |
//! | `resize`   | `scale`         | `0.4..0.6`              |
//! | `jpeg`     | `keep_y`        | `25`                    |
//! | `purify`   | `gamma`,`sigma` | `gamma=0.5,sigma=0.02`  |
//!
//! Crop and cropout ratios apply per side. Resize draws one scale per
//! batch; the other channels draw per image.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, PlaneMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::CoverImage;
use crate::seed::Rng;

/// Inclusive parameter range; `lo == hi` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn draw(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn within(&self, lo: f64, hi: f64, lo_open: bool) -> bool {
        let above = |v: f64| if lo_open { v > lo } else { v >= lo };
        self.lo <= self.hi && above(self.lo) && self.hi <= hi
    }
}

impl fmt::Display for ParamRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}..{}", self.lo, self.hi)
        }
    }
}

impl FromStr for ParamRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("bad number '{t}'")))
        };
        match s.split_once("..") {
            Some((a, b)) => Ok(Self::new(num(a)?, num(b)?)),
            None => Ok(Self::fixed(num(s)?)),
        }
    }
}

/// A distortion channel and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistortionSpec {
    Identity,
    Gaussian { sigma: ParamRange },
    Dropout { keep: ParamRange },
    Cropout { ratio: ParamRange },
    Crop { ratio: ParamRange },
    Resize { scale: ParamRange },
    Jpeg { keep_y: usize },
    Purify { gamma: f64, sigma: f64 },
}

pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 0.05;
pub const DEFAULT_DROPOUT_KEEP: ParamRange = ParamRange::new(0.65, 0.75);
pub const DEFAULT_CROPOUT_RATIO: ParamRange = ParamRange::new(0.25, 0.35);
pub const DEFAULT_CROP_RATIO: ParamRange = ParamRange::new(0.4, 0.55);
pub const DEFAULT_RESIZE_SCALE: ParamRange = ParamRange::new(0.4, 0.6);
pub const DEFAULT_JPEG_KEEP_Y: usize = 25;
pub const DEFAULT_PURIFY_GAMMA: f64 = 0.5;
pub const DEFAULT_PURIFY_SIGMA: f64 = 0.02;
/// Floor of the texture weight `sqrt(hp^2 + tau^2) / tau` in the purifier.
pub const PURIFY_TAU: f64 = 0.02;

impl DistortionSpec {
    /// The standard training pool at its default parameters.
    pub fn default_pool() -> Vec<Self> {
        vec![
            Self::Crop { ratio: DEFAULT_CROP_RATIO },
            Self::Cropout { ratio: DEFAULT_CROPOUT_RATIO },
            Self::Dropout { keep: DEFAULT_DROPOUT_KEEP },
            Self::Resize { scale: DEFAULT_RESIZE_SCALE },
            Self::Jpeg { keep_y: DEFAULT_JPEG_KEEP_Y },
        ]
    }

    pub fn purify(gamma: f64, sigma: f64) -> Self {
        Self::Purify { gamma, sigma }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Gaussian { .. } => "gaussian",
            Self::Dropout { .. } => "dropout",
            Self::Cropout { .. } => "cropout",
            Self::Crop { .. } => "crop",
            Self::Resize { .. } => "resize",
            Self::Jpeg { .. } => "jpeg",
            Self::Purify { .. } => "purify",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{}: {what}", self)));
        match self {
            Self::Identity => Ok(()),
            Self::Gaussian { sigma } if !sigma.within(0.0, f64::INFINITY, false) => bad("sigma must be >= 0"),
            Self::Dropout { keep: r } | Self::Cropout { ratio: r } | Self::Crop { ratio: r } | Self::Resize { scale: r }
                if !r.within(0.0, 1.0, true) =>
            {
                bad("ratio must lie in (0, 1]")
            }
            Self::Jpeg { keep_y } if !(1..=64).contains(keep_y) => bad("keep_y must lie in [1, 64]"),
            Self::Purify { gamma, sigma } if !(0.0..=1.0).contains(gamma) || !(*sigma >= 0.0) || !sigma.is_finite() => {
                bad("gamma must lie in [0, 1] and sigma be >= 0")
            }
            _ => Ok(()),
        }
    }

    /// Applies the channel to a batch `x` of shape `[n, c, h, w]`. `cover`
    /// (same shape) supplies the replacement pixels for dropout and cropout.
    pub fn apply_tape(&self, tape: &mut Tape, x: Var, cover: Var, rng: &mut Rng) -> Result<Var> {
        self.validate()?;
        let shape = tape.shape(x).to_vec();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(Error::Shape(format!("distortion expects [n, c, h, w], got {shape:?}")));
        };
        if tape.shape(cover) != shape.as_slice() {
            return Err(Error::Shape("cover and image shapes differ".into()));
        }
        let plane = h * w;
        let per_image = c * plane;
        match *self {
            Self::Identity => Ok(x),
            Self::Gaussian { sigma } => {
                let mut noise = Vec::with_capacity(n * per_image);
                for _ in 0..n {
                    let s = sigma.draw(rng);
                    noise.extend((0..per_image).map(|_| s * rng.sample::<f64, _>(StandardNormal)));
                }
                let nv = tape.constant(Tensor::new(shape.clone(), noise)?);
                let y = tape.add(x, nv)?;
                Ok(tape.clip(y, 0.0, 1.0))
            }
            Self::Dropout { keep } => {
                let mut mask = Vec::with_capacity(n * per_image);
                for _ in 0..n {
                    let k = keep.draw(rng);
                    mask.extend((0..per_image).map(|_| if rng.random::<f64>() < k { 1.0 } else { 0.0 }));
                }
                mix(tape, x, cover, &shape, mask)
            }
            Self::Cropout { ratio } | Self::Crop { ratio } => {
                let mut mask = vec![0.0; n * per_image];
                for i in 0..n {
                    let r = ratio.draw(rng);
                    let (rh, rw) = (side(r, h), side(r, w));
                    let y0 = rng.random_range(0..=h - rh);
                    let x0 = rng.random_range(0..=w - rw);
                    for ch in 0..c {
                        let base = i * per_image + ch * plane;
                        for y in y0..y0 + rh {
                            mask[base + y * w + x0..base + y * w + x0 + rw].fill(1.0);
                        }
                    }
                }
                if matches!(self, Self::Crop { .. }) {
                    let m = tape.constant(Tensor::new(shape, mask)?);
                    tape.mul(x, m)
                } else {
                    mix(tape, x, cover, &shape, mask)
                }
            }
            Self::Resize { scale } => {
                let s = scale.draw(rng);
                let map = SeparableMap::new(resize_matrix(h, s), resize_matrix(w, s), h, w);
                tape.plane_map(x, Arc::new(map))
            }
            Self::Jpeg { keep_y } => {
                let y = tape.plane_map(x, Arc::new(JpegMap::new(h, w, keep_y)))?;
                Ok(tape.clip(y, 0.0, 1.0))
            }
            Self::Purify { gamma, sigma } => {
                let blur = tape.plane_map(x, Arc::new(SeparableMap::gaussian_blur(h, w)))?;
                let keep = tape.scale(x, 1.0 - gamma);
                let smooth = tape.scale(blur, gamma);
                let mut out = tape.add(keep, smooth)?;
                if sigma > 0.0 {
                    let hp = tape.sub(x, blur)?;
                    let hp2 = tape.mul(hp, hp)?;
                    let t = tape.add_scalar(hp2, PURIFY_TAU * PURIFY_TAU);
                    let lt = tape.log(t);
                    let half = tape.scale(lt, 0.5);
                    let mag = tape.exp(half);
                    let weight = tape.scale(mag, 1.0 / PURIFY_TAU);
                    let noise: Vec<f64> = (0..n * per_image)
                        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let nv = tape.constant(Tensor::new(shape, noise)?);
                    let textured = tape.mul(weight, nv)?;
                    out = tape.add(out, textured)?;
                }
                Ok(tape.clip(out, 0.0, 1.0))
            }
        }
    }
}

fn side(r: f64, n: usize) -> usize {
    ((r * n as f64).round() as usize).clamp(1, n)
}

fn mix(tape: &mut Tape, x: Var, cover: Var, shape: &[usize], mask: Vec<f64>) -> Result<Var> {
    let inv = mask.iter().map(|m| 1.0 - m).collect();
    let m = tape.constant(Tensor::new(shape.to_vec(), mask)?);
    let im = tape.constant(Tensor::new(shape.to_vec(), inv)?);
    let a = tape.mul(x, m)?;
    let b = tape.mul(cover, im)?;
    tape.add(a, b)
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            Self::Dropout { keep } => write!(f, "dropout(keep={keep})"),
            Self::Cropout { ratio } => write!(f, "cropout(ratio={ratio})"),
            Self::Crop { ratio } => write!(f, "crop(ratio={ratio})"),
            Self::Resize { scale } => write!(f, "resize(scale={scale})"),
            Self::Jpeg { keep_y } => write!(f, "jpeg(keep_y={keep_y})"),
            Self::Purify { gamma, sigma } => write!(f, "purify(gamma={gamma},sigma={sigma})"),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Parse(format!("missing ')' in '{s}'")))?;
                (s[..i].trim(), inner)
            }
            None => (s, ""),
        };
        let mut kv = Vec::new();
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, found '{part}'")))?;
            kv.push((k.trim().to_string(), v.trim().parse::<ParamRange>()?));
        }
        let mut take = |key: &str| -> Option<ParamRange> {
            let i = kv.iter().position(|(k, _)| k == key)?;
            Some(kv.remove(i).1)
        };
        let fixed = |r: ParamRange, key: &str| -> Result<f64> {
            if r.lo == r.hi {
                Ok(r.lo)
            } else {
                Err(Error::Parse(format!("{key} takes a single value")))
            }
        };
        let spec = match name {
            "identity" | "none" => Self::Identity,
            "gaussian" | "gaussian_noise" => Self::Gaussian {
                sigma: take("sigma").unwrap_or(ParamRange::fixed(DEFAULT_GAUSSIAN_SIGMA)),
            },
            "dropout" => Self::Dropout {
                keep: take("keep").unwrap_or(DEFAULT_DROPOUT_KEEP),
            },
            "cropout" => Self::Cropout {
                ratio: take("ratio").unwrap_or(DEFAULT_CROPOUT_RATIO),
            },
            "crop" => Self::Crop {
                ratio: take("ratio").unwrap_or(DEFAULT_CROP_RATIO),
            },
            "resize" => Self::Resize {
                scale: take("scale").unwrap_or(DEFAULT_RESIZE_SCALE),
            },
            "jpeg" => {
                let k = take("keep_y").map(|r| fixed(r, "keep_y")).transpose()?;
                let k = k.unwrap_or(DEFAULT_JPEG_KEEP_Y as f64);
                if k.fract() != 0.0 || k < 0.0 {
                    return Err(Error::Parse(format!("keep_y must be an integer, got {k}")));
                }
                Self::Jpeg { keep_y: k as usize }
            }
            "purify" | "purify_proxy" => {
                let gamma = take("gamma").map(|r| fixed(r, "gamma")).transpose()?;
                let sigma = take("sigma").map(|r| fixed(r, "sigma")).transpose()?;
                Self::Purify {
                    gamma: gamma.unwrap_or(DEFAULT_PURIFY_GAMMA),
                    sigma: sigma.unwrap_or(DEFAULT_PURIFY_SIGMA),
                }
            }
            other => return Err(Error::Parse(format!("unknown distortion '{other}'"))),
        };
        if let Some((k, _)) = kv.first() {
            return Err(Error::Parse(format!("unknown key '{k}' for {name}")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for DistortionSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistortionSpec> for String {
    fn from(s: DistortionSpec) -> String {
        s.to_string()
    }
}

/// Result of attacking one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub image: CoverImage,
    /// `image - input`, pixelwise.
    pub s_atk: Vec<f64>,
}

/// Attacks a single image. `cover` is the unwatermarked original used by
/// dropout and cropout.
pub fn apply(spec: &DistortionSpec, image: &CoverImage, cover: &CoverImage, rng: &mut Rng) -> Result<AttackOutcome> {
    let (h, w) = (image.height(), image.width());
    if (cover.height(), cover.width()) != (h, w) {
        return Err(Error::Shape("cover and image sizes differ".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, h, w], image.pixels().to_vec())?);
    let cv = tape.constant(Tensor::new(vec![1, 1, h, w], cover.pixels().to_vec())?);
    let y = spec.apply_tape(&mut tape, x, cv, rng)?;
    let out = CoverImage::new(h, w, tape.data(y).to_vec())?;
    let s_atk = out.pixels().iter().zip(image.pixels()).map(|(a, b)| a - b).collect();
    Ok(AttackOutcome { image: out, s_atk })
}

/// DCT block quantization with `keep_y` retained zigzag coefficients.
pub fn jpeg_differentiable(image: &CoverImage, keep_y: usize, rng: &mut Rng) -> Result<AttackOutcome> {
    apply(&DistortionSpec::Jpeg { keep_y }, image, image, rng)
}

/// Purification proxy: partial high-pass removal plus texture-modulated noise.
pub fn purify_proxy(image: &CoverImage, gamma: f64, sigma: f64, rng: &mut Rng) -> Result<AttackOutcome> {
    apply(&DistortionSpec::Purify { gamma, sigma }, image, image, rng)
}

/// `out = Ay X Ax^T` on each plane.
#[derive(Debug, Clone)]
pub struct SeparableMap {
    h: usize,
    w: usize,
    ay: Vec<f64>,
    ax: Vec<f64>,
}

impl SeparableMap {
    pub fn new(ay: Vec<f64>, ax: Vec<f64>, h: usize, w: usize) -> Self {
        assert_eq!(ay.len(), h * h);
        assert_eq!(ax.len(), w * w);
        Self { h, w, ay, ax }
    }

    /// Gaussian blur, radius 2, sigma 1, reflect borders.
    pub fn gaussian_blur(h: usize, w: usize) -> Self {
        Self::new(blur_matrix(h), blur_matrix(w), h, w)
    }
}

impl PlaneMap for SeparableMap {
    fn plane_shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        gemm(h, w, w, input, false, &self.ax, true, &mut tmp, 0.0);
        gemm(h, h, w, &self.ay, false, &tmp, false, out, 0.0);
    }

    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        gemm(h, h, w, &self.ay, true, grad_out, false, &mut tmp, 0.0);
        gemm(h, w, w, &tmp, false, &self.ax, false, grad_in, 1.0);
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn blur_matrix(n: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-2..=2).map(|k: i32| (-(k * k) as f64 / 2.0).exp()).collect();
    let total: f64 = taps.iter().sum();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for (t, k) in taps.iter().zip(-2isize..=2) {
            m[i * n + reflect(i as isize + k, n)] += t / total;
        }
    }
    m
}

/// Bilinear weights resampling `from` samples to `to` (half-pixel centres,
/// edge clamp), as a `to x from` matrix.
fn bilinear(from: usize, to: usize) -> Vec<f64> {
    let mut m = vec![0.0; to * from];
    let ratio = from as f64 / to as f64;
    for i in 0..to {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        let frac = src - i0 as f64;
        m[i * from + i0] += 1.0 - frac;
        m[i * from + i1] += frac;
    }
    m
}

/// Down-then-up bilinear resampling of an axis of length `n` by `scale`.
fn resize_matrix(n: usize, scale: f64) -> Vec<f64> {
    let small = ((scale * n as f64).round() as usize).clamp(1, n);
    let down = bilinear(n, small);
    let up = bilinear(small, n);
    let mut m = vec![0.0; n * n];
    gemm(n, small, n, &up, false, &down, false, &mut m, 0.0);
    m
}

fn zigzag() -> [(usize, usize); 64] {
    let mut order = [(0, 0); 64];
    let mut k = 0;
    for s in 0..15usize {
        let lo = s.saturating_sub(7);
        let hi = s.min(7);
        let rows: Vec<usize> = if s % 2 == 0 { (lo..=hi).rev().collect() } else { (lo..=hi).collect() };
        for r in rows {
            order[k] = (r, s - r);
            k += 1;
        }
    }
    order
}

fn dct8() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (k, row) in d.iter_mut().enumerate() {
        let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = c * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    d
}

/// 8x8 block DCT, zigzag truncation to `keep` coefficients, inverse DCT.
/// Planes whose sides are not multiples of 8 are reflect-padded first and
/// cropped afterwards.
#[derive(Debug, Clone)]
pub struct JpegMap {
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    mask: [[f64; 8]; 8],
    dct: [[f64; 8]; 8],
}

impl JpegMap {
    pub fn new(h: usize, w: usize, keep: usize) -> Self {
        let mut mask = [[0.0; 8]; 8];
        for &(r, c) in zigzag().iter().take(keep.min(64)) {
            mask[r][c] = 1.0;
        }
        Self {
            h,
            w,
            ph: h.div_ceil(8) * 8,
            pw: w.div_ceil(8) * 8,
            mask,
            dct: dct8(),
        }
    }

    // Self-adjoint: D^T (M . (D B D^T)) D with orthonormal D and diagonal M.
    fn blocks(&self, padded: &mut [f64]) {
        let d = &self.dct;
        let mut blk = [[0.0; 8]; 8];
        let mut tmp = [[0.0; 8]; 8];
        for by in (0..self.ph).step_by(8) {
            for bx in (0..self.pw).step_by(8) {
                for (r, row) in blk.iter_mut().enumerate() {
                    row.copy_from_slice(&padded[(by + r) * self.pw + bx..][..8]);
                }
                // coefficients = D B D^T
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| d[i][k] * blk[k][j]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        blk[i][j] = (0..8).map(|k| tmp[i][k] * d[j][k]).sum::<f64>() * self.mask[i][j];
                    }
                }
                // back = D^T C D
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| d[k][i] * blk[k][j]).sum();
                    }
                }
                for r in 0..8 {
                    for c in 0..8 {
                        padded[(by + r) * self.pw + bx + c] = (0..8).map(|k| tmp[r][k] * d[k][c]).sum();
                    }
                }
            }
        }
    }
}

impl PlaneMap for JpegMap {
    fn plane_shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        let mut padded = vec![0.0; self.ph * self.pw];
        for y in 0..self.ph {
            let sy = reflect(y as isize, self.h);
            for x in 0..self.pw {
                padded[y * self.pw + x] = input[sy * self.w + reflect(x as isize, self.w)];
            }
        }
        self.blocks(&mut padded);
        for y in 0..self.h {
            out[y * self.w..(y + 1) * self.w].copy_from_slice(&padded[y * self.pw..y * self.pw + self.w]);
        }
    }

    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let mut padded = vec![0.0; self.ph * self.pw];
        for y in 0..self.h {
            padded[y * self.pw..y * self.pw + self.w].copy_from_slice(&grad_out[y * self.w..(y + 1) * self.w]);
        }
        self.blocks(&mut padded);
        for y in 0..self.ph {
            let sy = reflect(y as isize, self.h);
            for x in 0..self.pw {
                grad_in[sy * self.w + reflect(x as isize, self.w)] += padded[y * self.pw + x];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> CoverImage {
        let mut r = rng(seed);
        CoverImage::new(h, w, (0..h * w).map(|_| r.random_range(0.1..0.9)).collect()).unwrap()
    }

    #[test]
    fn zigzag_starts_like_jpeg() {
        let z = zigzag();
        assert_eq!(&z[..6], &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        assert_eq!(z[63], (7, 7));
        let mut seen = z.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "identity",
            "gaussian(sigma=0.05)",
            "dropout(keep=0.65..0.75)",
            "cropout(ratio=0.25..0.35)",
            "crop(ratio=0.4..0.55)",
            "resize(scale=0.5)",
            "jpeg(keep_y=25)",
            "purify(gamma=0.5,sigma=0.02)",
        ] {
            let spec: DistortionSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("jpeg".parse::<DistortionSpec>().unwrap(), DistortionSpec::Jpeg { keep_y: 25 });
        assert_eq!(
            " purify( gamma = 0.3 ) ".parse::<DistortionSpec>().unwrap(),
            DistortionSpec::purify(0.3, 0.02)
        );
        for bad in ["blur", "jpeg(keep_y=0)", "jpeg(keep_y=2.5)", "dropout(keep=1.5)", "crop(size=1)", "crop(ratio=0.5", "purify(gamma=0.1..0.2)"] {
            assert!(bad.parse::<DistortionSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let img = noise_image(16, 16, 1);
        let cover = noise_image(16, 16, 2);
        for spec in [
            DistortionSpec::Identity,
            DistortionSpec::Gaussian { sigma: ParamRange::fixed(0.0) },
            DistortionSpec::Dropout { keep: ParamRange::fixed(1.0) },
            DistortionSpec::Cropout { ratio: ParamRange::fixed(1.0) },
            DistortionSpec::Crop { ratio: ParamRange::fixed(1.0) },
            DistortionSpec::Resize { scale: ParamRange::fixed(1.0) },
            DistortionSpec::Purify { gamma: 0.0, sigma: 0.0 },
        ] {
            let out = apply(&spec, &img, &cover, &mut rng(3)).unwrap();
            assert_eq!(out.image, img, "{spec}");
            assert!(out.s_atk.iter().all(|s| *s == 0.0));
        }
        let out = apply(&DistortionSpec::Jpeg { keep_y: 64 }, &img, &cover, &mut rng(3)).unwrap();
        assert!(out.s_atk.iter().all(|s| s.abs() < 1e-10));
    }

    #[test]
    fn resize_preserves_constants() {
        let img = CoverImage::constant(32, 32, 0.3);
        let spec = DistortionSpec::Resize { scale: ParamRange::fixed(0.5) };
        let out = apply(&spec, &img, &img, &mut rng(0)).unwrap();
        assert!(out.s_atk.iter().all(|s| s.abs() < 1e-14));
    }

    #[test]
    fn jpeg_dc_only_gives_block_means() {
        let img = noise_image(16, 8, 4);
        let out = jpeg_differentiable(&img, 1, &mut rng(0)).unwrap();
        for by in 0..2 {
            let mean: f64 = (0..8)
                .flat_map(|y| (0..8).map(move |x| (by * 8 + y, x)))
                .map(|(y, x)| img.get(y, x))
                .sum::<f64>()
                / 64.0;
            for y in 0..8 {
                for x in 0..8 {
                    assert!((out.image.get(by * 8 + y, x) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn purify_full_strength_is_blur() {
        let img = noise_image(12, 12, 5);
        let out = purify_proxy(&img, 1.0, 0.0, &mut rng(0)).unwrap();
        let map = SeparableMap::gaussian_blur(12, 12);
        let mut blurred = vec![0.0; 144];
        map.apply(img.pixels(), &mut blurred);
        assert_eq!(out.image.pixels(), &blurred[..]);
    }

    #[test]
    fn dropout_and_cropout_take_cover_pixels() {
        let img = CoverImage::constant(16, 16, 0.8);
        let cover = CoverImage::constant(16, 16, 0.2);
        let out = apply(&DistortionSpec::Dropout { keep: ParamRange::fixed(0.7) }, &img, &cover, &mut rng(1)).unwrap();
        let kept = out.image.pixels().iter().filter(|p| **p == 0.8).count();
        assert_eq!(kept + out.image.pixels().iter().filter(|p| **p == 0.2).count(), 256);
        assert!((kept as f64 / 256.0 - 0.7).abs() < 0.1);
        let out = apply(&DistortionSpec::Cropout { ratio: ParamRange::fixed(0.5) }, &img, &cover, &mut rng(1)).unwrap();
        assert_eq!(out.image.pixels().iter().filter(|p| **p == 0.8).count(), 64);
        let out = apply(&DistortionSpec::Crop { ratio: ParamRange::fixed(0.25) }, &img, &cover, &mut rng(1)).unwrap();
        assert_eq!(out.image.pixels().iter().filter(|p| **p == 0.8).count(), 16);
        assert_eq!(out.image.pixels().iter().filter(|p| **p == 0.0).count(), 240);
    }

    #[test]
    fn plane_maps_satisfy_adjoint_identity() {
        let x = noise_image(12, 10, 6).into_pixels();
        let g = noise_image(12, 10, 7).into_pixels();
        let maps: Vec<Box<dyn PlaneMap>> = vec![
            Box::new(SeparableMap::gaussian_blur(12, 10)),
            Box::new(SeparableMap::new(resize_matrix(12, 0.45), resize_matrix(10, 0.45), 12, 10)),
            Box::new(JpegMap::new(12, 10, 25)),
        ];
        for m in maps {
            let mut ax = vec![0.0; 120];
            m.apply(&x, &mut ax);
            let mut atg = vec![0.0; 120];
            m.adjoint(&g, &mut atg);
            let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&atg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{m:?}");
        }
    }
}
