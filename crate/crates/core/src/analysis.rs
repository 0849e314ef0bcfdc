//! Spectral, correlation, gradient-interference and detection diagnostics.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, freq};
use crate::image::{CoverImage, Message};
use crate::net::WatermarkModel;
use crate::noise::{self, DistortionSpec, ParamRange};
use crate::par;
use crate::seed::{self, Purpose};

/// Radial band boundaries in cycles per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub low_cut: f64,
    pub mid_cut: f64,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            low_cut: 1.0 / 6.0,
            mid_cut: 1.0 / 3.0,
        }
    }
}

impl BandSpec {
    pub fn new(low_cut: f64, mid_cut: f64) -> Result<Self> {
        let b = Self { low_cut, mid_cut };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.low_cut && self.low_cut < self.mid_cut && self.mid_cut <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "band cuts must satisfy 0 < low ({}) < mid ({}) <= 0.5",
                self.low_cut, self.mid_cut
            )));
        }
        Ok(())
    }
}

/// Fractions of non-DC spectral energy per band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEnergyReport {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl BandEnergyReport {
    pub fn mid_high(&self) -> f64 {
        self.mid + self.high
    }
}

fn check_2d(signal: &[f64], h: usize, w: usize) -> Result<()> {
    if signal.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} signal", signal.len())));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite signal".into()));
    }
    Ok(())
}

/// Power spectrum `|X(u, v)|^2 / (h w)`, row-major. Sums to the spatial
/// sum of squares.
pub fn power_spectrum(signal: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    check_2d(signal, h, w)?;
    let mut buf: Vec<Complex64> = signal.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    let n = (h * w) as f64;
    Ok(buf.iter().map(|c| c.norm_sqr() / n).collect())
}

/// Splits the non-DC energy of `signal` into low, mid and high radial bands.
pub fn band_energy(signal: &[f64], h: usize, w: usize, bands: &BandSpec) -> Result<BandEnergyReport> {
    bands.validate()?;
    if h < 8 || w < 8 {
        return Err(Error::Shape(format!("band energy needs at least 8x8, got {h}x{w}")));
    }
    let power = power_spectrum(signal, h, w)?;
    let mut acc = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            if y == 0 && x == 0 {
                continue;
            }
            let (u, v) = (freq(y, h), freq(x, w));
            let r = (u * u + v * v).sqrt();
            let band = if r < bands.low_cut {
                0
            } else if r < bands.mid_cut {
                1
            } else {
                2
            };
            acc[band] += power[y * w + x];
        }
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("signal has no non-DC energy".into()));
    }
    Ok(BandEnergyReport {
        low: acc[0] / total,
        mid: acc[1] / total,
        high: acc[2] / total,
    })
}

/// Domain in which [`pearson_cc_in`] correlates two images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PccDomain {
    #[default]
    Spatial,
    /// DFT magnitudes.
    SpectralMagnitude,
}

/// Centered Pearson correlation.
pub fn pearson_cc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::SizeMismatch(format!("pearson_cc on lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::Degenerate("zero-variance input to pearson_cc".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of two `h x w` images in the chosen domain.
pub fn pearson_cc_in(a: &[f64], b: &[f64], h: usize, w: usize, domain: PccDomain) -> Result<f64> {
    match domain {
        PccDomain::Spatial => {
            check_2d(a, h, w)?;
            check_2d(b, h, w)?;
            pearson_cc(a, b)
        }
        PccDomain::SpectralMagnitude => {
            let ma: Vec<f64> = power_spectrum(a, h, w)?.iter().map(|p| p.sqrt()).collect();
            let mb: Vec<f64> = power_spectrum(b, h, w)?.iter().map(|p| p.sqrt()).collect();
            pearson_cc(&ma, &mb)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scalar projection `<s, g> / |g|`.
pub fn gradient_projection(s: &[f64], grad: &[f64]) -> Result<f64> {
    if s.len() != grad.len() {
        return Err(Error::SizeMismatch(format!("signal of {} vs gradient of {}", s.len(), grad.len())));
    }
    let g = norm(grad);
    if g == 0.0 || !g.is_finite() {
        return Err(Error::Degenerate("zero gradient".into()));
    }
    Ok(dot(s, grad) / g)
}

/// Gradient interference of an attack residual against a watermark residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub proj_wm: f64,
    pub proj_atk: f64,
    /// `<s_atk, g> / |<s_wm, g>|`.
    pub rho: f64,
    pub cos_wm_atk: f64,
    /// `|s_atk| / |s_wm|`.
    pub eta: f64,
    /// `eta * |cos_wm_atk|`.
    pub effective_proj: f64,
}

pub fn interference_ratio(s_atk: &[f64], s_wm: &[f64], grad: &[f64]) -> Result<InterferenceReport> {
    if s_atk.len() != s_wm.len() {
        return Err(Error::SizeMismatch(format!("s_atk of {} vs s_wm of {}", s_atk.len(), s_wm.len())));
    }
    let proj_wm = gradient_projection(s_wm, grad)?;
    let proj_atk = gradient_projection(s_atk, grad)?;
    if proj_wm == 0.0 {
        return Err(Error::Degenerate("watermark residual is orthogonal to the gradient".into()));
    }
    let (nw, na) = (norm(s_wm), norm(s_atk));
    let cos = if na == 0.0 { 0.0 } else { (dot(s_wm, s_atk) / (nw * na)).clamp(-1.0, 1.0) };
    let eta = na / nw;
    Ok(InterferenceReport {
        proj_wm,
        proj_atk,
        rho: proj_atk / proj_wm.abs(),
        cos_wm_atk: cos,
        eta,
        effective_proj: eta * cos.abs(),
    })
}

/// Mean absolute logit.
pub fn average_logits(logits: &[f64]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().map(|l| l.abs()).sum::<f64>() / logits.len() as f64
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }
}

/// Interference diagnostics for one image: a random message keyed by
/// `(seed, index)` is embedded, the result attacked with `spec`, and the
/// gradient taken from the infer-mode decoding loss at the watermarked image.
pub fn interference_one(model: &WatermarkModel, cover: &CoverImage, spec: &DistortionSpec, seed: u64, index: usize) -> Result<InterferenceReport> {
    let mut rng = seed::indexed_stream(seed, Purpose::Eval, index as u64);
    let msg = Message::random(model.config.msg_len, &mut rng);
    let wm = model.embed(cover, &msg)?;
    let s_wm: Vec<f64> = wm.pixels().iter().zip(cover.pixels()).map(|(a, b)| a - b).collect();
    let atk = noise::apply(spec, &wm, cover, &mut rng)?;
    let grad = model.input_gradient(&wm, &msg)?;
    interference_ratio(&atk.s_atk, &s_wm, &grad)
}

/// [`interference_one`] over a batch, in input order.
pub fn interference_batch(model: &WatermarkModel, covers: &[&CoverImage], spec: &DistortionSpec, seed: u64) -> Vec<Result<InterferenceReport>> {
    par::map_range(covers.len(), |i| interference_one(model, covers[i], spec, seed, i))
}

/// Aggregates of [`interference_batch`] over the images where the
/// diagnostics are defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceSummary {
    pub proj_wm: Summary,
    pub proj_atk: Summary,
    pub rho: Summary,
    pub cos_wm_atk: Summary,
    pub eta: Summary,
    pub effective_proj: Summary,
    /// Images skipped for a zero gradient or a residual orthogonal to it.
    pub skipped: usize,
}

pub fn summarize_interference(model: &WatermarkModel, covers: &[&CoverImage], spec: &DistortionSpec, seed: u64) -> Result<InterferenceSummary> {
    let mut ok = Vec::with_capacity(covers.len());
    let mut skipped = 0;
    for r in interference_batch(model, covers, spec, seed) {
        match r {
            Ok(r) => ok.push(r),
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let col = |f: fn(&InterferenceReport) -> f64| Summary::of(&ok.iter().map(f).collect::<Vec<_>>());
    Ok(InterferenceSummary {
        proj_wm: col(|r| r.proj_wm),
        proj_atk: col(|r| r.proj_atk),
        rho: col(|r| r.rho),
        cos_wm_atk: col(|r| r.cos_wm_atk),
        eta: col(|r| r.eta),
        effective_proj: col(|r| r.effective_proj),
        skipped,
    })
}

/// How the detection threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Midpoint between the largest clean and smallest watermarked AL on
    /// the calibration halves; equal-error point when they overlap.
    #[default]
    Calibrated,
    Fixed(f64),
}

/// Detection metrics. An image is flagged as watermarked when its AL
/// exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub threshold: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub fn_rate_noised: f64,
    pub kl_div_logit_dists: f64,
    pub mean_al_clean: f64,
    pub mean_al_wm: f64,
}

fn halves(v: &[f64]) -> (&[f64], &[f64]) {
    let cut = v.len().div_ceil(2);
    let (cal, eval) = v.split_at(cut);
    if eval.is_empty() {
        (cal, cal)
    } else {
        (cal, eval)
    }
}

/// Threshold with the smallest `|FPR - FNR|` among midpoints of the pooled
/// sorted scores; ties go to the smaller total error, then the lower cut.
fn equal_error_threshold(clean: &[f64], wm: &[f64]) -> f64 {
    let mut pooled: Vec<f64> = clean.iter().chain(wm).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = pooled.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    cands.push(pooled[0] - 1.0);
    cands.push(pooled[pooled.len() - 1]);
    let mut best = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for t in cands {
        let fpr = rate(clean, |a| a > t);
        let fnr = rate(wm, |a| a <= t);
        let key = ((fpr - fnr).abs(), fpr + fnr, t);
        if key < best {
            best = key;
        }
    }
    best.2
}

fn rate(v: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    v.iter().filter(|a| pred(**a)).count() as f64 / v.len() as f64
}

/// KL divergence `D(wm || clean)` between 32-bin histograms over the pooled
/// range, with one pseudo-count per bin.
pub fn histogram_kl(wm: &[f64], clean: &[f64], bins: usize) -> f64 {
    let lo = wm.iter().chain(clean).copied().fold(f64::INFINITY, f64::min);
    let hi = wm.iter().chain(clean).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let hist = |v: &[f64]| {
        let mut h = vec![1.0; bins];
        for a in v {
            let b = if width > 0.0 { (((a - lo) / width) as usize).min(bins - 1) } else { 0 };
            h[b] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter().map(|c| c / total).collect::<Vec<_>>()
    };
    let (p, q) = (hist(wm), hist(clean));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Number of histogram bins used by [`detection_from_scores`].
pub const DETECTION_BINS: usize = 32;

/// Detection metrics from precomputed AL scores. Each of `clean` and `wm`
/// is split in order: the first half calibrates, the second half is scored
/// (a single-element set serves as both). `noised` is scored in full.
pub fn detection_from_scores(clean: &[f64], wm: &[f64], noised: &[f64], policy: ThresholdPolicy) -> Result<DetectionReport> {
    if clean.is_empty() || wm.is_empty() || noised.is_empty() {
        return Err(Error::InvalidArgument("detection needs non-empty clean, watermarked and noised sets".into()));
    }
    let (clean_cal, clean_eval) = halves(clean);
    let (wm_cal, wm_eval) = halves(wm);
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Calibrated => {
            let cmax = clean_cal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let wmin = wm_cal.iter().copied().fold(f64::INFINITY, f64::min);
            if cmax < wmin {
                0.5 * (cmax + wmin)
            } else {
                equal_error_threshold(clean_cal, wm_cal)
            }
        }
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(DetectionReport {
        threshold,
        fp_rate: rate(clean_eval, |a| a > threshold),
        fn_rate: rate(wm_eval, |a| a <= threshold),
        fn_rate_noised: rate(noised, |a| a <= threshold),
        kl_div_logit_dists: histogram_kl(wm, clean, DETECTION_BINS),
        mean_al_clean: mean(clean),
        mean_al_wm: mean(wm),
    })
}

/// AL score of each image under infer-mode decoding.
pub fn al_scores(model: &WatermarkModel, images: &[CoverImage]) -> Result<Vec<f64>> {
    par::map(images, |img| model.decode(img).map(|(l, _)| average_logits(&l)))
        .into_iter()
        .collect()
}

pub fn detection_eval(
    model: &WatermarkModel,
    clean_set: &[CoverImage],
    wm_set: &[CoverImage],
    noised_wm_set: &[CoverImage],
    policy: ThresholdPolicy,
) -> Result<DetectionReport> {
    if clean_set.is_empty() || wm_set.is_empty() || noised_wm_set.is_empty() {
        return Err(Error::InvalidArgument("detection needs non-empty image sets".into()));
    }
    detection_from_scores(&al_scores(model, clean_set)?, &al_scores(model, wm_set)?, &al_scores(model, noised_wm_set)?, policy)
}

/// Builds disjoint detection sets from `covers`: the first half stays
/// clean, the second half is watermarked with random messages, and the
/// noised set adds Gaussian noise of `sigma` to the watermarked half.
pub fn detection_sets(model: &WatermarkModel, covers: &[CoverImage], sigma: f64, seed: u64) -> Result<(Vec<CoverImage>, Vec<CoverImage>, Vec<CoverImage>)> {
    if covers.len() < 2 {
        return Err(Error::InvalidArgument("detection needs at least two covers".into()));
    }
    let (clean, rest) = covers.split_at(covers.len() / 2);
    let gauss = DistortionSpec::Gaussian { sigma: ParamRange::fixed(sigma) };
    let pairs = par::map_range(rest.len(), |i| -> Result<(CoverImage, CoverImage)> {
        let mut rng = seed::indexed_stream(seed, Purpose::Eval, i as u64);
        let msg = Message::random(model.config.msg_len, &mut rng);
        let wm = model.embed(&rest[i], &msg)?;
        let noised = noise::apply(&gauss, &wm, &rest[i], &mut rng)?.image;
        Ok((wm, noised))
    });
    let (wm, noised) = pairs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((clean.to_vec(), wm, noised))
}

#[cfg(test)]
mod tests;
