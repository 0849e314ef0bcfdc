//! Grayscale images, bit messages, PGM I/O and synthetic covers.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2, freq};
use crate::seed::{self, Purpose, Rng};

/// Row-major grayscale image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverImage {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl CoverImage {
    /// Builds an image, clamping every pixel into `[0, 1]`.
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(Error::Shape(format!("{h}x{w} image from {} pixels", pixels.len())));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self { h, w, pixels })
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            pixels: vec![v.clamp(0.0, 1.0); h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }

    /// Writes binary PGM (P5) with maxval 65535, big-endian samples.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n65535\n", self.w, self.h)?;
        let mut bytes = Vec::with_capacity(2 * self.pixels.len());
        for p in &self.pixels {
            bytes.extend_from_slice(&((p * 65535.0).round() as u16).to_be_bytes());
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }

    /// Reads binary PGM (P5) with any maxval up to 65535.
    pub fn read_pgm<R: Read>(mut input: R) -> Result<Self> {
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
                if raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Parse(format!("expected P5 magic, found {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad PGM header field {s}")));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
        }
        let bps = if maxval > 255 { 2 } else { 1 };
        let body = raw.get(pos..).unwrap_or_default();
        if body.len() < w * h * bps {
            return Err(Error::Parse(format!("PGM body has {} bytes, need {}", body.len(), w * h * bps)));
        }
        let pixels = (0..w * h)
            .map(|i| {
                let v = if bps == 2 {
                    u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
                } else {
                    body[i] as f64
                };
                v / maxval as f64
            })
            .collect();
        Self::new(h, w, pixels)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

/// Bit message.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.iter().any(|b| *b > 1) {
            return Err(Error::InvalidArgument("message bits must be a non-empty 0/1 vector".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(len: usize, rng: &mut Rng) -> Self {
        Self {
            bits: (0..len).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    /// Bits from logits with the `sigmoid(l) >= 0.5` rule, so a zero logit
    /// decodes to 1.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            bits: logits.iter().map(|l| u8::from(*l >= 0.0)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| *b as f64).collect()
    }

    /// Fraction of differing bits.
    pub fn ber(&self, other: &Message) -> f64 {
        let diff = self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count();
        diff as f64 / self.bits.len().max(1) as f64
    }
}

impl std::fmt::Display for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Mean squared error between equally sized pixel arrays.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// PSNR in dB for unit peak; infinite for identical inputs.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// Gaussian random field with power spectrum `1/f^exponent`, affinely
/// mapped so its extremes land on 0.05 and 0.95.
pub fn random_field(h: usize, w: usize, exponent: f64, rng: &mut Rng) -> CoverImage {
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    fft2(&mut buf, h, w, false);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (freq(y, h), freq(x, w));
            let r = (fy * fy + fx * fx).sqrt();
            let gain = if r == 0.0 { 0.0 } else { r.powf(-exponent / 2.0) };
            buf[y * w + x] *= gain;
        }
    }
    fft2(&mut buf, h, w, true);
    let vals: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-300);
    let pixels = vals.iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect();
    CoverImage { h, w, pixels }
}

/// `n` covers drawn from the cover stream of `seed`, one sub-stream per
/// image so any prefix is stable.
pub fn generate_covers(n: usize, h: usize, w: usize, exponent: f64, seed: u64) -> Vec<CoverImage> {
    crate::par::map_range(n, |i| {
        let mut rng = seed::indexed_stream(seed, Purpose::Covers, i as u64);
        random_field(h, w, exponent, &mut rng)
    })
}

/// Default spectral exponent for synthetic covers.
pub const COVER_EXPONENT: f64 = 2.5;
