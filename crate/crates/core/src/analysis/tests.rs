use super::*;
use crate::image::{generate_covers, psnr, COVER_EXPONENT};
use rand::Rng as _;
use rand_distr::StandardNormal;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::stream(seed, Purpose::Eval);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn single_low_frequency_line_is_low_band() {
    let (h, w) = (32, 32);
    let s: Vec<f64> = (0..h * w)
        .map(|i| 0.5 + 0.3 * (2.0 * std::f64::consts::PI * 2.0 * (i % w) as f64 / w as f64).cos())
        .collect();
    let r = band_energy(&s, h, w, &BandSpec::default()).unwrap();
    assert!(r.low >= 0.99, "{r:?}");
    assert!((r.low + r.mid + r.high - 1.0).abs() < 1e-9);
}

#[test]
fn white_noise_follows_bin_counts() {
    let (h, w) = (32, 32);
    let bands = BandSpec::default();
    let mut counts = [0usize; 3];
    for y in 0..h {
        for x in 0..w {
            if y + x == 0 {
                continue;
            }
            let r = freq(y, h).hypot(freq(x, w));
            counts[if r < bands.low_cut { 0 } else if r < bands.mid_cut { 1 } else { 2 }] += 1;
        }
    }
    let expected: Vec<f64> = counts.iter().map(|c| *c as f64 / (h * w - 1) as f64).collect();
    let runs: Vec<BandEnergyReport> = (0..100).map(|s| band_energy(&noise(h * w, s), h, w, &bands).unwrap()).collect();
    for (k, e) in expected.iter().enumerate() {
        let vals: Vec<f64> = runs.iter().map(|r| [r.low, r.mid, r.high][k]).collect();
        let s = Summary::of(&vals);
        assert!((s.mean - e).abs() < 3.0 * s.sd / 10.0, "band {k}: {} vs {e}", s.mean);
    }
}

#[test]
fn covers_are_low_band_dominated() {
    let covers = generate_covers(20, 32, 32, COVER_EXPONENT, 4);
    let low: Vec<f64> = covers
        .iter()
        .map(|c| band_energy(c.pixels(), 32, 32, &BandSpec::default()).unwrap().low)
        .collect();
    assert!(Summary::of(&low).mean > 0.7);
}

#[test]
fn band_energy_rejects_bad_input() {
    assert!(band_energy(&[0.0; 64], 8, 8, &BandSpec::default()).is_err());
    assert!(band_energy(&[0.7; 64], 8, 8, &BandSpec::default()).is_err());
    assert!(band_energy(&[1.0; 49], 7, 7, &BandSpec::default()).is_err());
    assert!(BandSpec::new(0.3, 0.2).is_err());
    assert!(BandSpec::new(0.1, 0.6).is_err());
    assert!(BandSpec::new(0.25, 0.5).is_ok());
}

#[test]
fn parseval() {
    let s = noise(24 * 16, 7);
    let spatial: f64 = s.iter().map(|v| v * v).sum();
    let spectral: f64 = power_spectrum(&s, 24, 16).unwrap().iter().sum();
    assert!((spatial - spectral).abs() <= 1e-8 * spatial);
}

#[test]
fn pearson_examples() {
    let a = noise(100, 1);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((pearson_cc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson_cc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson_cc(&a, &[1.0; 100]).is_err());
    assert!(pearson_cc(&[1.0], &[1.0]).is_err());
    let cover = &generate_covers(1, 32, 32, COVER_EXPONENT, 2)[0];
    let n = noise(1024, 3);
    assert!(pearson_cc(cover.pixels(), &n).unwrap().abs() < 0.05);
    let spec = pearson_cc_in(cover.pixels(), cover.pixels(), 32, 32, PccDomain::SpectralMagnitude).unwrap();
    assert!((spec - 1.0).abs() < 1e-12);
}

#[test]
fn projection_examples() {
    let g = noise(50, 4);
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((gradient_projection(&g, &g).unwrap() - n).abs() < 1e-12);
    let mut perp = vec![0.0; 50];
    perp[0] = g[1];
    perp[1] = -g[0];
    assert!(gradient_projection(&perp, &g).unwrap().abs() < 1e-12);
    assert!(gradient_projection(&g, &[0.0; 50]).is_err());
}

#[test]
fn interference_examples() {
    let g = noise(64, 5);
    let s_wm: Vec<f64> = g.iter().map(|v| -0.1 * v).collect();
    let r = interference_ratio(&[0.0; 64], &s_wm, &g).unwrap();
    assert_eq!((r.rho, r.effective_proj, r.eta), (0.0, 0.0, 0.0));
    assert!(interference_ratio(&s_wm, &[0.0; 64], &g).is_err());
}

/// Residuals whose PSNR against the zero residual is exactly `db`.
fn residual_at_psnr(dir: &[f64], db: f64) -> Vec<f64> {
    let target_mse = 10f64.powf(-db / 10.0);
    let mse = dir.iter().map(|v| v * v).sum::<f64>() / dir.len() as f64;
    let k = (target_mse / mse).sqrt();
    dir.iter().map(|v| v * k).collect()
}

#[test]
fn eta_from_psnr_gap() {
    let zero = vec![0.0; 1024];
    let s_wm = residual_at_psnr(&noise(1024, 8), 40.0);
    let s_atk = residual_at_psnr(&noise(1024, 9), 28.0);
    assert!((psnr(&zero, &s_wm) - 40.0).abs() < 1e-9);
    assert!((psnr(&zero, &s_atk) - 28.0).abs() < 1e-9);
    let r = interference_ratio(&s_atk, &s_wm, &noise(1024, 10)).unwrap();
    assert!((r.eta - 10f64.powf((40.0 - 28.0) / 20.0)).abs() < 1e-3, "{}", r.eta);
    assert!((r.eta - 3.98).abs() < 5e-3);
}

#[test]
fn average_logits_examples() {
    assert_eq!(average_logits(&[0.0; 4]), 0.0);
    assert_eq!(average_logits(&[2.0, -2.0, 2.0, -2.0]), 2.0);
}

#[test]
fn separable_scores_give_zero_error() {
    let clean = [0.1, 0.3, 0.2, 0.25];
    let wm = [2.0, 3.0, 2.5, 4.0];
    let r = detection_from_scores(&clean, &wm, &[0.05, 3.0], ThresholdPolicy::Calibrated).unwrap();
    assert_eq!((r.fp_rate, r.fn_rate), (0.0, 0.0));
    assert!((r.threshold - 1.15).abs() < 1e-12);
    assert_eq!(r.fn_rate_noised, 0.5);
    assert!(r.kl_div_logit_dists > 0.0);
}

#[test]
fn zero_threshold_flags_every_clean_image() {
    let r = detection_from_scores(&[0.1, 0.4, 0.2], &[1.0], &[1.0], ThresholdPolicy::Fixed(0.0)).unwrap();
    assert_eq!(r.fp_rate, 1.0);
    assert!(detection_from_scores(&[], &[1.0], &[1.0], ThresholdPolicy::Calibrated).is_err());
}

#[test]
fn overlapping_scores_use_equal_error_point() {
    let clean = [0.0, 1.0, 2.0, 3.0, 9.0, 9.0];
    let wm = [2.5, 4.0, 5.0, 6.0, 9.0, 9.0];
    let r = detection_from_scores(&clean, &wm, &[1.0], ThresholdPolicy::Calibrated).unwrap();
    // Calibration halves [0, 1, 2] and [2.5, 4, 5] separate at 2.25.
    assert!((r.threshold - 2.25).abs() < 1e-12);
    let t = equal_error_threshold(&[0.0, 3.0, 1.0], &[2.0, 4.0, 5.0]);
    let fpr = rate(&[0.0, 3.0, 1.0], |a| a > t);
    let fnr = rate(&[2.0, 4.0, 5.0], |a| a <= t);
    assert_eq!(fpr, fnr);
}

#[test]
fn histogram_kl_is_zero_for_identical_sets() {
    let a = noise(200, 11);
    assert!(histogram_kl(&a, &a, 32).abs() < 1e-12);
    let b: Vec<f64> = a.iter().map(|v| v + 3.0).collect();
    assert!(histogram_kl(&b, &a, 32) > 1.0);
}
