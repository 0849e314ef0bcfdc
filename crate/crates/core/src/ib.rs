//! Information Bottleneck on discrete channels.
//!
//! Maximizes `I(Z; M) - beta I(Z; X)` over stochastic encoders `p(z | x)`
//! with the self-consistent alternating updates
//!
//! ```text
//! p(z | x) ∝ p(z) exp(-(1/beta) D_KL(p(m | x) || p(m | z)))
//! p(z)     = sum_x p(x) p(z | x)
//! p(m | z) = sum_x p(m, x) p(z | x) / p(z)
//! ```
//!
//! Each full cycle never decreases the objective. [`trace_curve`] anneals
//! down a descending beta schedule and [`check_curve_geometry`] tests the
//! traced rate/relevance frontier for monotonicity, convexity and the
//! `dR/dI = 1/beta` slope identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::info::{mutual_information, JointPMF};

/// Relevance values closer than this are treated as one curve point.
pub const MERGE_TOL: f64 = 1e-6;
/// Tolerance for the monotonicity and convexity checks.
pub const GEOMETRY_TOL: f64 = 1e-6;

/// Row-stochastic `p(z | x)`, one row per observation symbol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticEncoder {
    x_size: usize,
    z_size: usize,
    p: Vec<f64>,
}

impl StochasticEncoder {
    pub fn new(x_size: usize, z_size: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != x_size * z_size || z_size == 0 {
            return Err(Error::SizeMismatch(format!(
                "{} entries for a {x_size}x{z_size} encoder",
                p.len()
            )));
        }
        for row in p.chunks(z_size) {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidDistribution("negative encoder entry".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidDistribution(format!("encoder row sums to {s}")));
            }
        }
        Ok(Self { x_size, z_size, p })
    }

    /// Rows drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(x_size: usize, z_size: usize, rng: &mut R) -> Self {
        let mut p = Vec::with_capacity(x_size * z_size);
        for _ in 0..x_size {
            let row: Vec<f64> = (0..z_size).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = row.iter().sum();
            p.extend(row.into_iter().map(|v| v / s));
        }
        Self { x_size, z_size, p }
    }

    /// Deterministic encoder that sends `x` to `labels[x]`.
    pub fn deterministic(labels: &[usize], z_size: usize) -> Result<Self> {
        let mut p = vec![0.0; labels.len() * z_size];
        for (x, &z) in labels.iter().enumerate() {
            if z >= z_size {
                return Err(Error::InvalidArgument(format!("label {z} >= z_size {z_size}")));
            }
            p[x * z_size + z] = 1.0;
        }
        Self::new(labels.len(), z_size, p)
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn z_size(&self) -> usize {
        self.z_size
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.p[x * self.z_size..(x + 1) * self.z_size]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.p.chunks(self.z_size).map(<[f64]>::to_vec).collect()
    }

    /// Mixes every row with a fresh Dirichlet row: `(1 - eta) q + eta d`.
    fn perturbed<R: Rng + ?Sized>(&self, eta: f64, rng: &mut R) -> Self {
        let noise = Self::random(self.x_size, self.z_size, rng);
        let p = self
            .p
            .iter()
            .zip(&noise.p)
            .map(|(a, b)| (1.0 - eta) * a + eta * b)
            .collect();
        Self {
            x_size: self.x_size,
            z_size: self.z_size,
            p,
        }
    }
}

/// One solved point of the rate/relevance trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IBCurvePoint {
    pub beta: f64,
    /// `I(Z; X)`
    pub rate: f64,
    /// `I(Z; M)`
    pub relevance: f64,
    /// `I(X; M) - relevance`
    pub epsilon: f64,
    /// `relevance - beta * rate`
    pub objective: f64,
    pub converged: bool,
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Mixing weight of the symmetry-breaking perturbation on warm starts.
    pub perturbation: f64,
}

impl Default for IbOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 10_000,
            restarts: 3,
            perturbation: 0.02,
        }
    }
}

/// Full output of one solve.
#[derive(Debug, Clone, Serialize)]
pub struct IbSolution {
    pub encoder: StochasticEncoder,
    pub point: IBCurvePoint,
    pub iterations: usize,
    /// Largest drop of the objective between consecutive iterations.
    /// Alternating updates guarantee this stays at round-off level.
    pub max_objective_drop: f64,
}

/// Cached marginals of the channel.
struct Channel {
    m_size: usize,
    x_size: usize,
    pmx: Vec<f64>,
    px: Vec<f64>,
    /// `p(m | x)`, zero rows for massless symbols
    post: Vec<Vec<f64>>,
    i_xm: f64,
}

impl Channel {
    fn new(j: &JointPMF) -> Self {
        let post = (0..j.x_size())
            .map(|x| j.posterior(x).unwrap_or_else(|| vec![0.0; j.m_size()]))
            .collect();
        Self {
            m_size: j.m_size(),
            x_size: j.x_size(),
            pmx: j.probs().to_vec(),
            px: j.p_x(),
            post,
            i_xm: mutual_information(j).0,
        }
    }

    fn pz(&self, q: &StochasticEncoder) -> Vec<f64> {
        let mut pz = vec![0.0; q.z_size];
        for x in 0..self.x_size {
            for (z, v) in q.row(x).iter().enumerate() {
                pz[z] += self.px[x] * v;
            }
        }
        pz
    }

    /// Joint `p(m, z)`, row-major over m.
    fn pmz(&self, q: &StochasticEncoder) -> Vec<f64> {
        let nz = q.z_size;
        let mut out = vec![0.0; self.m_size * nz];
        for m in 0..self.m_size {
            for x in 0..self.x_size {
                let w = self.pmx[m * self.x_size + x];
                if w > 0.0 {
                    for (z, v) in q.row(x).iter().enumerate() {
                        out[m * nz + z] += w * v;
                    }
                }
            }
        }
        out
    }

    /// (rate, relevance) of an encoder.
    fn evaluate(&self, q: &StochasticEncoder) -> (f64, f64) {
        let pz = self.pz(q);
        let mut rate = 0.0;
        for x in 0..self.x_size {
            for (z, &v) in q.row(x).iter().enumerate() {
                if v > 0.0 && self.px[x] > 0.0 {
                    rate += self.px[x] * v * (v / pz[z]).ln();
                }
            }
        }
        let pmz = self.pmz(q);
        let nz = q.z_size;
        let pm: Vec<f64> = (0..self.m_size)
            .map(|m| self.pmx[m * self.x_size..(m + 1) * self.x_size].iter().sum())
            .collect();
        let mut rel = 0.0;
        for m in 0..self.m_size {
            for z in 0..nz {
                let p = pmz[m * nz + z];
                if p > 0.0 {
                    rel += p * (p / (pm[m] * pz[z])).ln();
                }
            }
        }
        (rate.max(0.0), rel.max(0.0))
    }

    /// One self-consistent update of the encoder.
    fn update(&self, q: &StochasticEncoder, beta: f64) -> StochasticEncoder {
        let nz = q.z_size;
        let pz = self.pz(q);
        let pmz = self.pmz(q);
        let inv_beta = 1.0 / beta;
        let mut p = Vec::with_capacity(self.x_size * nz);
        let mut logits = vec![0.0; nz];
        for x in 0..self.x_size {
            if self.px[x] <= 0.0 {
                p.extend(pz.iter().copied());
                continue;
            }
            for z in 0..nz {
                logits[z] = if pz[z] > 0.0 {
                    let mut kl = 0.0;
                    for m in 0..self.m_size {
                        let a = self.post[x][m];
                        if a > 0.0 {
                            let b = pmz[m * nz + z] / pz[z];
                            kl += if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY };
                        }
                    }
                    pz[z].ln() - inv_beta * kl
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                p.extend_from_slice(q.row(x));
                continue;
            }
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = weights.iter().sum();
            p.extend(weights.into_iter().map(|w| w / s));
        }
        StochasticEncoder {
            x_size: self.x_size,
            z_size: nz,
            p,
        }
    }

    fn point(&self, q: &StochasticEncoder, beta: f64, converged: bool) -> IBCurvePoint {
        let (rate, relevance) = self.evaluate(q);
        IBCurvePoint {
            beta,
            rate,
            relevance,
            epsilon: self.i_xm - relevance,
            objective: relevance - beta * rate,
            converged,
        }
    }

    fn iterate(
        &self,
        mut q: StochasticEncoder,
        beta: f64,
        opts: &IbOptions,
    ) -> IbSolution {
        let objective = |q: &StochasticEncoder| {
            let (r, i) = self.evaluate(q);
            i - beta * r
        };
        let mut current = objective(&q);
        let mut max_drop: f64 = 0.0;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iters {
            let next = self.update(&q, beta);
            let value = objective(&next);
            iterations += 1;
            max_drop = max_drop.max(current - value);
            let delta = (value - current).abs();
            q = next;
            current = value;
            if delta < opts.tol {
                converged = true;
                break;
            }
        }
        IbSolution {
            point: self.point(&q, beta, converged),
            encoder: q,
            iterations,
            max_objective_drop: max_drop,
        }
    }
}

fn check_inputs(j: &JointPMF, beta: f64, z_size: usize) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if z_size == 0 || z_size > j.x_size() {
        return Err(Error::InvalidArgument(format!(
            "z_size must lie in 1..={}, got {z_size}",
            j.x_size()
        )));
    }
    Ok(())
}

/// Single solve from a Dirichlet(1, .., 1) initialization drawn from `seed`.
/// Non-convergence is reported through `point.converged`, not as an error.
pub fn solve_ib(
    j: &JointPMF,
    beta: f64,
    z_size: usize,
    seed: u64,
    tol: f64,
    max_iters: usize,
) -> Result<IbSolution> {
    check_inputs(j, beta, z_size)?;
    let opts = IbOptions {
        tol,
        max_iters,
        ..IbOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = StochasticEncoder::random(j.x_size(), z_size, &mut rng);
    Ok(Channel::new(j).iterate(init, beta, &opts))
}

/// Solves from an explicit initial encoder.
pub fn solve_ib_from(
    j: &JointPMF,
    beta: f64,
    init: StochasticEncoder,
    opts: &IbOptions,
) -> Result<IbSolution> {
    check_inputs(j, beta, init.z_size())?;
    if init.x_size() != j.x_size() {
        return Err(Error::SizeMismatch("encoder rows must match x_size".into()));
    }
    Ok(Channel::new(j).iterate(init, beta, opts))
}

/// Best of `opts.restarts` independent random initializations.
pub fn solve_ib_restarts(
    j: &JointPMF,
    beta: f64,
    z_size: usize,
    seed: u64,
    opts: &IbOptions,
) -> Result<IbSolution> {
    check_inputs(j, beta, z_size)?;
    let channel = Channel::new(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<IbSolution> = None;
    for _ in 0..opts.restarts.max(1) {
        let init = StochasticEncoder::random(j.x_size(), z_size, &mut rng);
        let sol = channel.iterate(init, beta, opts);
        if best.as_ref().is_none_or(|b| sol.point.objective > b.point.objective) {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Anneals down a strictly descending beta schedule.
///
/// The first beta is solved from `opts.restarts` random starts; every later
/// beta is warm-started from the previous solution, once unperturbed and
/// `opts.restarts` times with a small random perturbation, and additionally
/// solved from `opts.restarts` fresh random starts so the trace can leave a
/// locally stable branch (such as the trivial encoder past a first-order
/// transition). The best objective wins. Points are returned sorted by
/// relevance.
pub fn trace_curve(
    j: &JointPMF,
    beta_schedule: &[f64],
    z_size: usize,
    seed: u64,
    opts: &IbOptions,
) -> Result<Vec<IBCurvePoint>> {
    if beta_schedule.is_empty() {
        return Err(Error::InvalidArgument("empty beta schedule".into()));
    }
    if beta_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "beta schedule must be strictly descending".into(),
        ));
    }
    for &b in beta_schedule {
        check_inputs(j, b, z_size)?;
    }
    let channel = Channel::new(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(beta_schedule.len());
    let mut previous: Option<StochasticEncoder> = None;
    for &beta in beta_schedule {
        let mut starts = Vec::new();
        match &previous {
            None => {
                for _ in 0..opts.restarts.max(1) {
                    starts.push(StochasticEncoder::random(j.x_size(), z_size, &mut rng));
                }
            }
            Some(q) => {
                starts.push(q.clone());
                for _ in 0..opts.restarts {
                    starts.push(q.perturbed(opts.perturbation, &mut rng));
                }
                for _ in 0..opts.restarts {
                    starts.push(StochasticEncoder::random(j.x_size(), z_size, &mut rng));
                }
            }
        }
        let best = starts
            .into_iter()
            .map(|s| channel.iterate(s, beta, opts))
            .reduce(|a, b| if better(&b.point, &a.point) { b } else { a })
            .expect("non-empty starts");
        points.push(best.point);
        previous = Some(best.encoder);
    }
    points.sort_by(|a, b| a.relevance.total_cmp(&b.relevance));
    Ok(points)
}

/// Objective ties within round-off go to the higher relevance, so a flat
/// stretch of the frontier is represented by its far end.
fn better(a: &IBCurvePoint, b: &IBCurvePoint) -> bool {
    let tie = 1e-12 * a.objective.abs().max(b.objective.abs()).max(1.0);
    if (a.objective - b.objective).abs() <= tie {
        a.relevance > b.relevance
    } else {
        a.objective > b.objective
    }
}

/// Geometric schedule of `n` betas from `hi` down to `lo`.
pub fn geometric_schedule(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let ratio = (lo / hi).powf(1.0 / (n - 1) as f64);
    (0..n).map(|k| hi * ratio.powi(k as i32)).collect()
}

/// Shape checks on a traced frontier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveGeometryReport {
    pub monotone: bool,
    pub convex: bool,
    /// `|beta * dR/dI - 1|` at every interior active point.
    pub slope_errors: Vec<f64>,
    /// Betas of the interior points the slope errors refer to.
    pub slope_betas: Vec<f64>,
    /// Betas of points left out of the slope check because the constraint is
    /// inactive there (trivial encoder or fully saturated relevance).
    pub excluded_betas: Vec<f64>,
    /// Number of distinct points after merging near-duplicates.
    pub distinct_points: usize,
    pub slopes_within_tol: bool,
}

/// Monotonicity, convexity and slope identity of `R_min(I)`.
///
/// Points closer than [`MERGE_TOL`] in relevance are merged; a merged point
/// stands for every beta that produced it, and its slope error is taken
/// against the best-matching one (a kink admits a range of supporting
/// slopes).
pub fn check_curve_geometry(points: &[IBCurvePoint], slope_tol: f64) -> Result<CurveGeometryReport> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.relevance.total_cmp(&b.relevance));
    // (relevance, rate, betas)
    let mut merged: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for p in &sorted {
        match merged.last_mut() {
            Some(last) if (p.relevance - last.0).abs() < MERGE_TOL => {
                last.1 = last.1.min(p.rate);
                last.2.push(p.beta);
            }
            _ => merged.push((p.relevance, p.rate, vec![p.beta])),
        }
    }
    if merged.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 distinct curve points, got {}",
            merged.len()
        )));
    }
    let n = merged.len();
    let monotone = merged.windows(2).all(|w| w[1].1 >= w[0].1 - GEOMETRY_TOL);
    let slope = |a: usize, b: usize| (merged[b].1 - merged[a].1) / (merged[b].0 - merged[a].0);
    let convex = (1..n - 1).all(|k| {
        let dd2 = (slope(k, k + 1) - slope(k - 1, k)) / (merged[k + 1].0 - merged[k - 1].0);
        dd2 >= -GEOMETRY_TOL
    });

    let i_max = merged[n - 1].0;
    let mut slope_errors = Vec::new();
    let mut slope_betas = Vec::new();
    let mut excluded_betas = Vec::new();
    for (k, (rel, rate, betas)) in merged.iter().enumerate() {
        let inactive = *rate <= MERGE_TOL || (i_max - rel) < MERGE_TOL;
        if inactive {
            excluded_betas.extend(betas.iter().copied());
            continue;
        }
        if k == 0 || k == n - 1 {
            continue;
        }
        let fd = slope(k - 1, k + 1);
        let (err, beta) = betas
            .iter()
            .map(|&b| ((fd * b - 1.0).abs(), b))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty cluster");
        slope_errors.push(err);
        slope_betas.push(beta);
    }
    Ok(CurveGeometryReport {
        monotone,
        convex,
        slopes_within_tol: slope_errors.iter().all(|e| *e <= slope_tol),
        slope_errors,
        slope_betas,
        excluded_betas,
        distinct_points: n,
    })
}
