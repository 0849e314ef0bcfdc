//! Config-driven runs: training, evaluation, diagnostics and artifacts.
//!
//! A run writes into `<root>/<name>/`, where `<root>` is the config's
//! `output_dir` unless the `VIBMARK_OUT` environment variable is set. Files
//! are assembled in a hidden `.<name>.partial` sibling and moved into place
//! only when the run succeeds; on failure the partial directory is removed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, band_energy, pearson_cc_in, BandSpec, DetectionReport, InterferenceSummary, PccDomain, Summary, ThresholdPolicy,
};
use crate::error::{Error, Result};
use crate::image::{generate_covers, psnr, CoverImage, Message, COVER_EXPONENT};
use crate::net::{train_with, EpochStats, ModelConfig, TrainConfig, VIBConfig, WatermarkModel};
use crate::noise::{self, DistortionSpec};
use crate::par;
use crate::seed::{self, Purpose};

/// Environment variable that overrides every config's `output_dir`.
pub const OUTPUT_ENV: &str = "VIBMARK_OUT";

/// Synthetic cover set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_covers: usize,
    pub eval_covers: usize,
    pub exponent: f64,
    /// Cover seed; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_covers: 400,
            eval_covers: 200,
            exponent: COVER_EXPONENT,
            seed: None,
        }
    }
}

/// Network shape; the bottleneck lives in the `[vib]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub height: usize,
    pub width: usize,
    pub msg_len: usize,
    pub enc_channels: usize,
    pub ext_channels: usize,
    pub feature_dim: usize,
    pub keyed: bool,
    pub key_block: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            height: m.height,
            width: m.width,
            msg_len: m.msg_len,
            enc_channels: m.enc_channels,
            ext_channels: m.ext_channels,
            feature_dim: m.feature_dim,
            keyed: m.keyed,
            key_block: m.key_block,
        }
    }
}

/// Training hyperparameters; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_img: f64,
    pub lambda_rec: f64,
    pub vib_enabled: bool,
    pub val_fraction: f64,
    pub img_warmup_epochs: usize,
    pub pool: Vec<DistortionSpec>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lambda_img: t.lambda_img,
            lambda_rec: t.lambda_rec,
            vib_enabled: t.vib_enabled,
            val_fraction: t.val_fraction,
            img_warmup_epochs: t.img_warmup_epochs,
            pool: t.pool,
        }
    }
}

/// Evaluation attacks and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub attacks: Vec<DistortionSpec>,
    /// Attack whose residual feeds the interference and spectral diagnostics.
    pub interference_attack: DistortionSpec,
    pub detection_sigma: f64,
    pub bands: BandSpec,
    pub pcc_domain: PccDomain,
    /// Evaluate this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let mut attacks = vec![DistortionSpec::Identity];
        attacks.extend(DistortionSpec::default_pool());
        attacks.push(DistortionSpec::purify(0.3, 0.02));
        Self {
            attacks,
            interference_attack: DistortionSpec::purify(0.3, 0.02),
            detection_sigma: 0.05,
            bands: BandSpec::default(),
            pcc_domain: PccDomain::Spatial,
            checkpoint: None,
        }
    }
}

/// Default grid for `beta_sweep`; zero means the bottleneck is off.
pub const DEFAULT_BETA_SWEEP: [f64; 7] = [0.0, 1e-5, 5e-5, 1e-4, 1.5e-4, 2e-4, 3e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// One training run per value; `beta = 0` disables the bottleneck.
    #[serde(default)]
    pub beta_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub vib: VIBConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Parses and validates TOML. Parse errors carry the line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            height: m.height,
            width: m.width,
            msg_len: m.msg_len,
            enc_channels: m.enc_channels,
            ext_channels: m.ext_channels,
            feature_dim: m.feature_dim,
            keyed: m.keyed,
            key_block: m.key_block,
            vib: self.vib,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lambda_img: t.lambda_img,
            lambda_rec: t.lambda_rec,
            seed: self.seed,
            pool: t.pool.clone(),
            vib_enabled: t.vib_enabled,
            val_fraction: t.val_fraction,
            img_warmup_epochs: t.img_warmup_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: &str| Err(Error::Config(format!("{f}: {m}")));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || self.name.starts_with('.') {
            return field("name", "must be non-empty and use only letters, digits, '-', '_' or '.'");
        }
        if self.data.train_covers < 2 {
            return field("data.train_covers", "need at least 2");
        }
        if self.data.eval_covers < 2 {
            return field("data.eval_covers", "need at least 2");
        }
        if !(self.data.exponent.is_finite() && self.data.exponent >= 0.0) {
            return field("data.exponent", "must be finite and >= 0");
        }
        self.model_config().validate().map_err(|e| Error::Config(format!("model/vib: {e}")))?;
        self.train_config().validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if let Some(betas) = &self.beta_sweep {
            if betas.is_empty() {
                return field("beta_sweep", "must list at least one value");
            }
            if betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
                return field("beta_sweep", "values must be finite and >= 0");
            }
            let mut names: Vec<String> = betas.iter().map(|b| beta_dir(*b)).collect();
            names.sort();
            names.dedup();
            if names.len() != betas.len() {
                return field("beta_sweep", "values must be distinct");
            }
        }
        if self.eval.attacks.is_empty() {
            return field("eval.attacks", "must list at least one attack");
        }
        let mut names: Vec<String> = self.eval.attacks.iter().map(|a| a.to_string()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.eval.attacks.len() {
            return field("eval.attacks", "attacks must be distinct");
        }
        if !(self.eval.detection_sigma.is_finite() && self.eval.detection_sigma >= 0.0) {
            return field("eval.detection_sigma", "must be finite and >= 0");
        }
        self.eval.bands.validate().map_err(|e| Error::Config(format!("eval.bands: {e}")))?;
        Ok(())
    }

    /// Output root after the environment override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    /// Copy with `vib.beta = beta`; zero also turns the bottleneck off.
    pub fn with_beta(&self, beta: f64) -> Self {
        let mut c = self.clone();
        c.vib.beta = beta;
        c.train.vib_enabled = beta > 0.0;
        c.beta_sweep = None;
        c
    }
}

fn beta_dir(beta: f64) -> String {
    format!("beta_{beta:e}")
}

/// Metrics of one evaluation attack on the held-out covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEval {
    pub attack: String,
    pub ber: f64,
    /// Watermarked against cover.
    pub psnr: f64,
    pub l_img: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub rho: Summary,
    pub al: Summary,
}

/// Band fractions and cover correlation of a residual family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralStats {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
    pub pcc_with_cover: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub cover: SpectralStats,
    pub s_wm: SpectralStats,
    pub s_atk: SpectralStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub beta: f64,
    pub vib_enabled: bool,
    pub history: Vec<EpochStats>,
    pub eval: Vec<AttackEval>,
    /// Mean BER over the evaluation attacks.
    pub mean_ber: f64,
    pub interference_attack: String,
    pub interference: InterferenceSummary,
    pub detection: DetectionReport,
    pub spectral: SpectralReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub dir: String,
    pub mean_ber: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

/// What a finished experiment produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Single(Box<RunReport>),
    Sweep(SweepReport),
}

/// Column set of `metrics.csv`.
pub const METRICS_HEADER: &str = "run,tag,attack,ber,psnr,l_img,l_rec,l_kl,rho,al_mean,al_sd";

/// Runs `cfg` and moves its artifacts to `<root>/<name>`. Returns the
/// final directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(PathBuf, Outcome)> {
    run_experiment_with(cfg, |_| {})
}

/// Like [`run_experiment`], reporting progress lines through `log`.
pub fn run_experiment_with(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<(PathBuf, Outcome)> {
    cfg.validate()?;
    let root = cfg.output_root();
    fs::create_dir_all(&root)?;
    let final_dir = root.join(&cfg.name);
    let partial = root.join(format!(".{}.partial", cfg.name));
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    fs::create_dir_all(&partial)?;
    let result = match &cfg.beta_sweep {
        None => run_single(cfg, &partial, &mut log).map(|r| Outcome::Single(Box::new(r))),
        Some(betas) => run_sweep(cfg, betas, &partial, &mut log).map(Outcome::Sweep),
    };
    match result {
        Ok(outcome) => {
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir)?;
            }
            fs::rename(&partial, &final_dir)?;
            Ok((final_dir, outcome))
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

fn run_sweep(cfg: &ExperimentConfig, betas: &[f64], dir: &Path, log: &mut impl FnMut(&str)) -> Result<SweepReport> {
    let mut points = Vec::with_capacity(betas.len());
    for &beta in betas {
        let sub = beta_dir(beta);
        let sub_dir = dir.join(&sub);
        fs::create_dir_all(&sub_dir)?;
        log(&format!("beta = {beta:e}"));
        let report = run_single(&cfg.with_beta(beta), &sub_dir, log)?;
        points.push(SweepPoint {
            beta,
            dir: sub,
            mean_ber: report.mean_ber,
            rho: report.interference.rho.mean,
        });
    }
    let mut dat = String::new();
    for p in &points {
        writeln!(dat, "{} {}", p.beta, p.mean_ber).unwrap();
    }
    fs::write(dir.join("ber_vs_beta.dat"), dat)?;
    let report = SweepReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        points,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Held-out covers of `cfg`: the tail of the cover stream after the
/// training covers.
pub fn cover_sets(cfg: &ExperimentConfig) -> (Vec<CoverImage>, Vec<CoverImage>) {
    let d = &cfg.data;
    let mut all = generate_covers(d.train_covers + d.eval_covers, cfg.model.height, cfg.model.width, d.exponent, d.seed.unwrap_or(cfg.seed));
    let eval = all.split_off(d.train_covers);
    (all, eval)
}

fn run_single(cfg: &ExperimentConfig, dir: &Path, log: &mut impl FnMut(&str)) -> Result<RunReport> {
    let (train_covers, eval_covers) = cover_sets(cfg);
    let mut model;
    let mut history = Vec::new();
    if let Some(ckpt) = &cfg.eval.checkpoint {
        model = WatermarkModel::load(ckpt)?;
        if (model.config.height, model.config.width) != (cfg.model.height, cfg.model.width) {
            return Err(Error::Config("eval.checkpoint: image size differs from the model section".into()));
        }
    } else {
        model = WatermarkModel::new(cfg.model_config(), cfg.seed)?;
        history = train_with(&mut model, &cfg.train_config(), &train_covers, |s| {
            log(&format!(
                "epoch {:>3}  loss {:.5}  L_img {:.3e}  L_rec {:.4}  L_KL {:.3}  train BER {:.4}  val BER {:.4}  val PSNR {:.2}",
                s.epoch, s.loss, s.l_img, s.l_rec, s.l_kl, s.train_ber, s.val_ber, s.val_psnr
            ))
        })?;
    }
    model.save(&dir.join("model.json"))?;

    let eval_refs: Vec<&CoverImage> = eval_covers.iter().collect();
    let eval = evaluate_attacks(&model, &eval_refs, &cfg.eval.attacks, cfg.seed)?;
    let mean_ber = eval.iter().map(|e| e.ber).sum::<f64>() / eval.len() as f64;
    let interference = analysis::summarize_interference(&model, &eval_refs, &cfg.eval.interference_attack, cfg.seed)?;
    let (clean, wm, noised) = analysis::detection_sets(&model, &eval_covers, cfg.eval.detection_sigma, cfg.seed)?;
    let detection = analysis::detection_eval(&model, &clean, &wm, &noised, ThresholdPolicy::Calibrated)?;
    let spectral = spectral_report(&model, &eval_refs, &cfg.eval.interference_attack, &cfg.eval.bands, cfg.eval.pcc_domain, cfg.seed)?;
    let report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        beta: model.config.vib.beta,
        vib_enabled: cfg.train.vib_enabled,
        history,
        eval,
        mean_ber,
        interference_attack: cfg.eval.interference_attack.to_string(),
        interference,
        detection,
        spectral,
    };
    write_run_files(&report, dir)?;
    log(&format!(
        "mean BER {:.4}  rho {:.4}  detection FP {} FN {} FN(noised) {}",
        report.mean_ber, report.interference.rho.mean, report.detection.fp_rate, report.detection.fn_rate, report.detection.fn_rate_noised
    ));
    Ok(report)
}

/// Per-attack metrics. Image `i` carries the message drawn first from the
/// `(seed, Eval, i)` stream, so the message and attack draws agree with
/// [`crate::net::eval_ber`] and [`analysis::interference_one`].
pub fn evaluate_attacks(model: &WatermarkModel, covers: &[&CoverImage], attacks: &[DistortionSpec], seed: u64) -> Result<Vec<AttackEval>> {
    struct Row {
        ber: f64,
        l_rec: f64,
        l_kl: f64,
        rho: Option<f64>,
        al: f64,
    }
    let per_image = par::map_range(covers.len(), |i| -> Result<(f64, f64, Vec<Row>)> {
        let cover = covers[i];
        let msg = Message::random(model.config.msg_len, &mut seed::indexed_stream(seed, Purpose::Eval, i as u64));
        let wm = model.embed(cover, &msg)?;
        let s_wm: Vec<f64> = wm.pixels().iter().zip(cover.pixels()).map(|(a, b)| a - b).collect();
        let grad = model.input_gradient(&wm, &msg)?;
        let mut rows = Vec::with_capacity(attacks.len());
        for spec in attacks {
            let mut rng = seed::indexed_stream(seed, Purpose::Eval, i as u64);
            let _ = Message::random(model.config.msg_len, &mut rng);
            let out = noise::apply(spec, &wm, cover, &mut rng)?;
            let d = model.decode_full(&out.image)?;
            let rho = match analysis::interference_ratio(&out.s_atk, &s_wm, &grad) {
                Ok(r) => Some(r.rho),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            rows.push(Row {
                ber: Message::from_logits(&d.logits).ber(&msg),
                l_rec: d.bce(&msg),
                l_kl: d.kl(),
                rho,
                al: analysis::average_logits(&d.logits),
            });
        }
        Ok((crate::image::mse(cover.pixels(), wm.pixels()), psnr(cover.pixels(), wm.pixels()), rows))
    });
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    let l_img = per_image.iter().map(|p| p.0).sum::<f64>() / n;
    let psnr_mean = per_image.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(attacks
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            let col = |f: &dyn Fn(&Row) -> f64| per_image.iter().map(|p| f(&p.2[a])).collect::<Vec<f64>>();
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / n;
            AttackEval {
                attack: spec.to_string(),
                ber: mean(col(&|r| r.ber)),
                psnr: psnr_mean,
                l_img,
                l_rec: mean(col(&|r| r.l_rec)),
                l_kl: mean(col(&|r| r.l_kl)),
                rho: Summary::of(&per_image.iter().filter_map(|p| p.2[a].rho).collect::<Vec<_>>()),
                al: Summary::of(&col(&|r| r.al)),
            }
        })
        .collect())
}

/// Band fractions and cover correlations of covers, watermark residuals
/// and `attack` residuals, with the same per-image draws as
/// [`evaluate_attacks`].
pub fn spectral_report(
    model: &WatermarkModel,
    covers: &[&CoverImage],
    attack: &DistortionSpec,
    bands: &BandSpec,
    domain: PccDomain,
    seed: u64,
) -> Result<SpectralReport> {
    let (h, w) = (model.config.height, model.config.width);
    let rows = par::map_range(covers.len(), |i| -> Result<[Vec<f64>; 3]> {
        let cover = covers[i];
        let mut rng = seed::indexed_stream(seed, Purpose::Eval, i as u64);
        let msg = Message::random(model.config.msg_len, &mut rng);
        let wm = model.embed(cover, &msg)?;
        let s_wm: Vec<f64> = wm.pixels().iter().zip(cover.pixels()).map(|(a, b)| a - b).collect();
        let atk = noise::apply(attack, &wm, cover, &mut rng)?;
        Ok([cover.pixels().to_vec(), s_wm, atk.s_atk])
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let bands_spec = bands;
    let stats = |k: usize| -> SpectralStats {
        let mut bands = Vec::new();
        let mut pcc = Vec::new();
        for (r, cover) in rows.iter().zip(covers) {
            if let Ok(b) = band_energy(&r[k], h, w, bands_spec) {
                bands.push(b);
            }
            if let Ok(c) = pearson_cc_in(&r[k], cover.pixels(), h, w, domain) {
                pcc.push(c);
            }
        }
        let m = bands.len().max(1) as f64;
        SpectralStats {
            low: bands.iter().map(|b| b.low).sum::<f64>() / m,
            mid: bands.iter().map(|b| b.mid).sum::<f64>() / m,
            high: bands.iter().map(|b| b.high).sum::<f64>() / m,
            pcc_with_cover: Summary::of(&pcc),
        }
    };
    Ok(SpectralReport {
        cover: stats(0),
        s_wm: stats(1),
        s_atk: stats(2),
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Renders `metrics.csv`: one row per epoch (`tag = epoch:<n>`, attack
/// `pool`, validation BER and PSNR) and one per evaluation attack
/// (`tag = eval`). Cells that do not apply are left empty.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for s in &report.history {
        writeln!(
            out,
            "{},epoch:{},pool,{},{},{},{},{},,,",
            report.name,
            s.epoch,
            num(s.val_ber),
            num(s.val_psnr),
            num(s.l_img),
            num(s.l_rec),
            num(s.l_kl)
        )
        .unwrap();
    }
    for e in &report.eval {
        let rho = if e.rho.n > 0 { num(e.rho.mean) } else { String::new() };
        writeln!(
            out,
            "{},eval,\"{}\",{},{},{},{},{},{},{},{}",
            report.name,
            e.attack,
            num(e.ber),
            num(e.psnr),
            num(e.l_img),
            num(e.l_rec),
            num(e.l_kl),
            rho,
            num(e.al.mean),
            num(e.al.sd)
        )
        .unwrap();
    }
    out
}

fn write_run_files(report: &RunReport, dir: &Path) -> Result<()> {
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    let mut loss = String::new();
    let mut ber = String::new();
    for s in &report.history {
        writeln!(loss, "{} {}", s.epoch, s.loss).unwrap();
        writeln!(ber, "{} {}", s.epoch, s.val_ber).unwrap();
    }
    fs::write(dir.join("loss.dat"), loss)?;
    fs::write(dir.join("val_ber.dat"), ber)?;
    Ok(())
}

/// Baseline-vs-candidate deltas for one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDelta {
    pub attack: String,
    pub ber_a: f64,
    pub ber_b: f64,
    /// `ber_b - ber_a`.
    pub ber_delta: f64,
    /// `(ber_a - ber_b) / ber_a` as a percentage string, `"-"` when `ber_a = 0`.
    pub ber_reduction: String,
    pub rho_a: f64,
    pub rho_b: f64,
    pub rho_delta: f64,
    pub rho_reduction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_a: String,
    pub run_b: String,
    pub attacks: Vec<AttackDelta>,
}

fn reduction(a: f64, b: f64) -> String {
    if a == 0.0 {
        "-".into()
    } else {
        format!("{:.2}%", 100.0 * (a - b) / a)
    }
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", dir.join("report.json").display())))
}

/// Compares two finished single runs; `a` is the baseline.
pub fn compare_runs(a_dir: &Path, b_dir: &Path) -> Result<Comparison> {
    let (a, b) = (load_report(a_dir)?, load_report(b_dir)?);
    let names = |r: &RunReport| {
        let mut v: Vec<String> = r.eval.iter().map(|e| e.attack.clone()).collect();
        v.sort();
        v
    };
    if names(&a) != names(&b) {
        return Err(Error::InvalidArgument(format!(
            "mismatched attack sets: {:?} vs {:?}",
            names(&a),
            names(&b)
        )));
    }
    let attacks = a
        .eval
        .iter()
        .map(|ea| {
            let eb = b.eval.iter().find(|e| e.attack == ea.attack).expect("attack sets match");
            AttackDelta {
                attack: ea.attack.clone(),
                ber_a: ea.ber,
                ber_b: eb.ber,
                ber_delta: eb.ber - ea.ber,
                ber_reduction: reduction(ea.ber, eb.ber),
                rho_a: ea.rho.mean,
                rho_b: eb.rho.mean,
                rho_delta: eb.rho.mean - ea.rho.mean,
                rho_reduction: reduction(ea.rho.mean, eb.rho.mean),
            }
        })
        .collect();
    Ok(Comparison {
        run_a: a.name,
        run_b: b.name,
        attacks,
    })
}
