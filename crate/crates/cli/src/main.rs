use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use vibmark::analysis::{
    detection_eval, detection_sets, summarize_interference, BandSpec, DetectionReport, InterferenceSummary, PccDomain,
    ThresholdPolicy,
};
use vibmark::experiment::{
    compare_runs, run_experiment_with, spectral_report, ExperimentConfig, Outcome, SpectralReport, DEFAULT_BETA_SWEEP,
    OUTPUT_ENV,
};
use vibmark::ib::{trace_curve, IbOptions};
use vibmark::image::{generate_covers, CoverImage, Message, COVER_EXPONENT};
use vibmark::info::JointPMF;
use vibmark::mss::verify_theorems;
use vibmark::net::WatermarkModel;
use vibmark::noise::DistortionSpec;

const ATTACK_HELP: &str = "\
Attack specs: name(key=value,...), parameters optional.
  identity
  gaussian(sigma=0.05)
  dropout(keep=0.65..0.75)     a..b draws uniformly per image
  cropout(ratio=0.25..0.35)
  crop(ratio=0.4..0.55)
  resize(scale=0.4..0.6)
  jpeg(keep_y=25)
  purify(gamma=0.5,sigma=0.02)";

#[derive(Parser)]
#[command(name = "vibmark", version, about = "Watermarking bottleneck laboratory", after_help = ATTACK_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one run (or every point of its beta_sweep).
    #[command(after_help = output_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Also copy the trained checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run a config once per beta; zero disables the bottleneck.
    #[command(name = "sweep-beta", after_help = output_help())]
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        /// Comma list; defaults to the config's beta_sweep, then the built-in grid.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long)]
        quiet: bool,
    },
    /// Embed a bit string into a PGM image.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Bits as a 0/1 string of the model's message length.
        #[arg(long)]
        bits: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the message of a PGM image; prints JSON.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Band energy, cover correlation and gradient interference under an attack; prints JSON.
    #[command(after_help = ATTACK_HELP)]
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PGM covers, read in file-name order.
        #[arg(long)]
        covers: PathBuf,
        #[arg(long, default_value = "purify(gamma=0.5,sigma=0.02)")]
        attack: DistortionSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        spectral_pcc: bool,
    },
    /// Average-logit detection of watermarked vs clean images; prints JSON.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PGM covers; the first half stays clean, the rest is watermarked.
        #[arg(long)]
        covers: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        noise_sigma: f64,
        /// Fixed threshold instead of the calibrated equal-error one.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trace an information-bottleneck curve; prints CSV.
    IbCurve {
        #[arg(long)]
        joint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        /// Bottleneck alphabet size; defaults to the x alphabet size.
        #[arg(long)]
        z_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the minimal sufficient statistic theorems on a joint; prints JSON.
    MssVerify {
        #[arg(long)]
        joint: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Per-attack BER and rho deltas between two finished runs; prints JSON.
    Compare { run_a: PathBuf, run_b: PathBuf },
    /// Write synthetic covers as PGM files.
    GenCovers {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = COVER_EXPONENT)]
        exponent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn output_help() -> String {
    format!("Outputs go to <output_dir>/<name>/; set {OUTPUT_ENV} to override output_dir.")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, quiet } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (dir, outcome) = execute(&cfg, quiet)?;
            if let Some(out) = out {
                let ckpt = match outcome {
                    Outcome::Single(_) => dir.join("model.json"),
                    Outcome::Sweep(_) => bail!("--out needs a single run; this config has a beta_sweep"),
                };
                fs::copy(&ckpt, &out).with_context(|| format!("copying checkpoint to {}", out.display()))?;
            }
            emit(&format!("{}\n", dir.display()))?;
        }
        Command::SweepBeta { config, betas, quiet } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let betas = betas.or(cfg.beta_sweep.take()).unwrap_or_else(|| DEFAULT_BETA_SWEEP.to_vec());
            cfg.beta_sweep = Some(betas);
            cfg.validate()?;
            let (dir, _) = execute(&cfg, quiet)?;
            emit(&format!("{}\n", dir.display()))?;
        }
        Command::Embed { ckpt, image, bits, out } => {
            let model = WatermarkModel::load(&ckpt)?;
            let cover = CoverImage::load_pgm(&image)?;
            let msg = parse_bits(&bits)?;
            model.embed(&cover, &msg)?.save_pgm(&out)?;
        }
        Command::Decode { ckpt, image } => {
            let model = WatermarkModel::load(&ckpt)?;
            let img = CoverImage::load_pgm(&image)?;
            let (logits, msg) = model.decode(&img)?;
            let bits: String = msg.bits().iter().map(|b| char::from(b'0' + b)).collect();
            let al = vibmark::analysis::average_logits(&logits);
            print_json(&serde_json::json!({ "bits": bits, "average_logit": al, "logits": logits }))?;
        }
        Command::Analyze { ckpt, covers, attack, seed, spectral_pcc } => {
            let model = WatermarkModel::load(&ckpt)?;
            let covers = load_covers(&covers, &model)?;
            let refs: Vec<&CoverImage> = covers.iter().collect();
            let domain = if spectral_pcc { PccDomain::SpectralMagnitude } else { PccDomain::Spatial };
            let spectral = spectral_report(&model, &refs, &attack, &BandSpec::default(), domain, seed)?;
            let interference = summarize_interference(&model, &refs, &attack, seed)?;
            print_json(&AnalyzeReport { attack: attack.to_string(), images: covers.len(), spectral, interference })?;
        }
        Command::Detect { ckpt, covers, noise_sigma, threshold, seed } => {
            let model = WatermarkModel::load(&ckpt)?;
            let covers = load_covers(&covers, &model)?;
            let (clean, wm, noised) = detection_sets(&model, &covers, noise_sigma, seed)?;
            let policy = threshold.map_or(ThresholdPolicy::Calibrated, ThresholdPolicy::Fixed);
            let report: DetectionReport = detection_eval(&model, &clean, &wm, &noised, policy)?;
            print_json(&report)?;
        }
        Command::IbCurve { joint, betas, z_size, seed } => {
            let j = load_joint(&joint)?;
            let mut betas = betas;
            betas.sort_by(|a, b| b.total_cmp(a));
            let z = z_size.unwrap_or(j.x_size());
            let curve = trace_curve(&j, &betas, z, seed, &IbOptions::default())?;
            let mut csv = String::from("beta,rate,relevance,epsilon,objective,converged\n");
            for p in curve {
                csv += &format!("{},{},{},{},{},{}\n", p.beta, p.rate, p.relevance, p.epsilon, p.objective, p.converged);
            }
            emit(&csv)?;
        }
        Command::MssVerify { joint, tol } => {
            let j = load_joint(&joint)?;
            print_json(&verify_theorems(&j, tol)?)?;
        }
        Command::Compare { run_a, run_b } => print_json(&compare_runs(&run_a, &run_b)?)?,
        Command::GenCovers { out_dir, n, size, exponent, seed } => {
            if n == 0 || size < 8 {
                bail!("need n >= 1 and size >= 8");
            }
            fs::create_dir_all(&out_dir)?;
            let width = n.to_string().len();
            for (i, c) in generate_covers(n, size, size, exponent, seed).iter().enumerate() {
                c.save_pgm(&out_dir.join(format!("cover_{i:0width$}.pgm")))?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport {
    attack: String,
    images: usize,
    spectral: SpectralReport,
    interference: InterferenceSummary,
}

fn execute(cfg: &ExperimentConfig, quiet: bool) -> Result<(PathBuf, Outcome)> {
    Ok(run_experiment_with(cfg, |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn parse_bits(s: &str) -> Result<Message> {
    let bits = s
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => bail!("bits must be 0 or 1, found '{c}'"),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Message::new(bits)?)
}

fn load_joint(path: &Path) -> Result<JointPMF> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<JointPMF>().with_context(|| format!("parsing {}", path.display()))
}

fn load_covers(dir: &Path, model: &WatermarkModel) -> Result<Vec<CoverImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm files in {}", dir.display());
    }
    let (h, w) = (model.config.height, model.config.width);
    paths
        .iter()
        .map(|p| {
            let img = CoverImage::load_pgm(p).with_context(|| format!("reading {}", p.display()))?;
            if (img.height(), img.width()) != (h, w) {
                bail!("{} is {}x{}, model expects {h}x{w}", p.display(), img.height(), img.width());
            }
            Ok(img)
        })
        .collect()
}
