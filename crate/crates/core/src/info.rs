//! Exact information quantities over small discrete alphabets.
//!
//! Everything is measured in nats. Terms with zero probability mass
//! contribute nothing (`0 ln 0 = 0`), so sparse joints are safe.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mss::Partition;

/// Absolute tolerance for PMF validation.
pub const PMF_TOL: f64 = 1e-12;
/// Largest alphabet accepted on either axis of a joint.
pub const MAX_ALPHABET: usize = 64;

/// An information value in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nats(pub f64);

impl Nats {
    /// Wraps a computed information value, absorbing round-off below zero.
    pub fn from_raw(v: f64) -> Self {
        if v < 0.0 && v >= -PMF_TOL {
            Nats(0.0)
        } else {
            Nats(v)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Nats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} nats", self.0)
    }
}

fn validate_mass(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    let mut total = 0.0;
    for (i, &v) in p.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {v}, expected a finite non-negative value"
            )));
        }
        total += v;
    }
    if (total - 1.0).abs() > PMF_TOL {
        return Err(Error::InvalidDistribution(format!(
            "entries sum to {total}, expected 1"
        )));
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// A validated probability vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalPMF {
    p: Vec<f64>,
}

impl MarginalPMF {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        validate_mass(&p)?;
        Ok(Self { p })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        Ok(Self {
            p: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Dense joint distribution over (message, observation), row-major with
/// one row per message symbol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointPMF {
    m_size: usize,
    x_size: usize,
    p: Vec<f64>,
}

impl JointPMF {
    pub fn new(m_size: usize, x_size: usize, p: Vec<f64>) -> Result<Self> {
        if m_size == 0 || x_size == 0 {
            return Err(Error::InvalidDistribution(
                "alphabets must have at least one symbol".into(),
            ));
        }
        for size in [m_size, x_size] {
            if size > MAX_ALPHABET {
                return Err(Error::AlphabetTooLarge {
                    size,
                    max: MAX_ALPHABET,
                });
            }
        }
        if p.len() != m_size * x_size {
            return Err(Error::SizeMismatch(format!(
                "{} probabilities for a {m_size}x{x_size} joint",
                p.len()
            )));
        }
        validate_mass(&p)?;
        Ok(Self { m_size, x_size, p })
    }

    /// Builds a joint from nested rows, `rows[m][x]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m_size = rows.len();
        let x_size = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != x_size) {
            return Err(Error::SizeMismatch("ragged rows".into()));
        }
        Self::new(m_size, x_size, rows.concat())
    }

    /// The product distribution `p(m) p(x)`.
    pub fn product(pm: &MarginalPMF, px: &MarginalPMF) -> Result<Self> {
        let mut p = Vec::with_capacity(pm.len() * px.len());
        for &a in pm.probs() {
            for &b in px.probs() {
                p.push(a * b);
            }
        }
        Self::renormalized(pm.len(), px.len(), p)
    }

    /// Draws a joint from a flat Dirichlet(1, ..., 1) over all cells.
    pub fn random_dirichlet<R: Rng + ?Sized>(m_size: usize, x_size: usize, rng: &mut R) -> Result<Self> {
        let raw: Vec<f64> = (0..m_size * x_size)
            .map(|_| rng.sample::<f64, _>(Exp1))
            .collect();
        Self::renormalized(m_size, x_size, raw)
    }

    /// Normalizes non-negative weights to unit mass before validating.
    pub fn renormalized(m_size: usize, x_size: usize, mut w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution("weights have no mass".into()));
        }
        w.iter_mut().for_each(|v| *v /= total);
        Self::new(m_size, x_size, w)
    }

    pub fn m_size(&self) -> usize {
        self.m_size
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn get(&self, m: usize, x: usize) -> f64 {
        self.p[m * self.x_size + x]
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn p_m(&self) -> Vec<f64> {
        (0..self.m_size)
            .map(|m| (0..self.x_size).map(|x| self.get(m, x)).sum())
            .collect()
    }

    pub fn p_x(&self) -> Vec<f64> {
        (0..self.x_size)
            .map(|x| (0..self.m_size).map(|m| self.get(m, x)).sum())
            .collect()
    }

    pub fn marginal_m(&self) -> MarginalPMF {
        MarginalPMF { p: self.p_m() }
    }

    pub fn marginal_x(&self) -> MarginalPMF {
        MarginalPMF { p: self.p_x() }
    }

    /// `p(m | x)`; `None` when `x` carries no mass.
    pub fn posterior(&self, x: usize) -> Option<Vec<f64>> {
        let px: f64 = (0..self.m_size).map(|m| self.get(m, x)).sum();
        (px > 0.0).then(|| (0..self.m_size).map(|m| self.get(m, x) / px).collect())
    }

    /// Swaps the roles of M and X.
    pub fn transposed(&self) -> JointPMF {
        let mut p = vec![0.0; self.p.len()];
        for m in 0..self.m_size {
            for x in 0..self.x_size {
                p[x * self.m_size + m] = self.get(m, x);
            }
        }
        JointPMF {
            m_size: self.x_size,
            x_size: self.m_size,
            p,
        }
    }

    /// Serializes to the plain-text matrix format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.m_size, self.x_size);
        for m in 0..self.m_size {
            let row: Vec<String> = (0..self.x_size).map(|x| self.get(m, x).to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

impl FromStr for JointPMF {
    type Err = Error;

    /// Parses `"m_size x_size"` followed by `m_size` rows of `x_size`
    /// probabilities. Blank lines and `#` comments are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing header line".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        let [m_size, x_size] = dims[..] else {
            return Err(Error::Parse(format!("header must be 'm_size x_size', got '{header}'")));
        };
        let mut p = Vec::with_capacity(m_size * x_size);
        for row in 0..m_size {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing row {row}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("row {row}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != x_size {
                return Err(Error::Parse(format!(
                    "row {row} has {} entries, expected {x_size}",
                    vals.len()
                )));
            }
            p.extend(vals);
        }
        if lines.next().is_some() {
            return Err(Error::Parse("trailing data after the last row".into()));
        }
        JointPMF::new(m_size, x_size, p)
    }
}

/// Dense joint over (M, X, T), indexed `[m][x][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPMF3 {
    dims: [usize; 3],
    p: Vec<f64>,
}

impl JointPMF3 {
    pub fn new(dims: [usize; 3], p: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDistribution("empty axis".into()));
        }
        if p.len() != dims.iter().product::<usize>() {
            return Err(Error::SizeMismatch(format!(
                "{} probabilities for dims {dims:?}",
                p.len()
            )));
        }
        validate_mass(&p)?;
        Ok(Self { dims, p })
    }

    /// `p(m, x, t) = p(m, x) [t = T(x)]`.
    pub fn with_statistic(j: &JointPMF, t: &Partition) -> Result<Self> {
        check_partition(j, t)?;
        let dims = [j.m_size(), j.x_size(), t.n_blocks()];
        let mut p = vec![0.0; dims.iter().product()];
        for m in 0..dims[0] {
            for x in 0..dims[1] {
                p[(m * dims[1] + x) * dims[2] + t.block_of(x)] = j.get(m, x);
            }
        }
        Ok(Self { dims, p })
    }

    /// `p(m, x, t) = p(m, x) p(t | x)` for a stochastic statistic.
    pub fn with_channel(j: &JointPMF, t_given_x: &[Vec<f64>]) -> Result<Self> {
        if t_given_x.len() != j.x_size() {
            return Err(Error::SizeMismatch("channel rows must match x_size".into()));
        }
        let t_size = t_given_x.first().map_or(0, Vec::len);
        let dims = [j.m_size(), j.x_size(), t_size];
        let mut p = vec![0.0; dims.iter().product()];
        for m in 0..dims[0] {
            for x in 0..dims[1] {
                for t in 0..dims[2] {
                    p[(m * dims[1] + x) * dims[2] + t] = j.get(m, x) * t_given_x[x][t];
                }
            }
        }
        Self::new(dims, p)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, m: usize, x: usize, t: usize) -> f64 {
        self.p[(m * self.dims[1] + x) * self.dims[2] + t]
    }

    /// Marginal joint over (M, X).
    pub fn joint_mx(&self) -> JointPMF {
        let [nm, nx, nt] = self.dims;
        let mut p = vec![0.0; nm * nx];
        for m in 0..nm {
            for x in 0..nx {
                p[m * nx + x] = (0..nt).map(|t| self.get(m, x, t)).sum();
            }
        }
        JointPMF { m_size: nm, x_size: nx, p }
    }

    /// Marginal joint over (M, T).
    pub fn joint_mt(&self) -> JointPMF {
        let [nm, nx, nt] = self.dims;
        let mut p = vec![0.0; nm * nt];
        for m in 0..nm {
            for t in 0..nt {
                p[m * nt + t] = (0..nx).map(|x| self.get(m, x, t)).sum();
            }
        }
        JointPMF { m_size: nm, x_size: nt, p }
    }
}

fn check_partition(j: &JointPMF, t: &Partition) -> Result<()> {
    if t.len() != j.x_size() {
        return Err(Error::SizeMismatch(format!(
            "partition covers {} symbols, alphabet has {}",
            t.len(),
            j.x_size()
        )));
    }
    Ok(())
}

/// Shannon entropy `H(p) = -sum p ln p`.
pub fn entropy(p: &MarginalPMF) -> Nats {
    Nats::from_raw(-p.probs().iter().copied().map(plogp).sum::<f64>())
}

/// Entropy of the raw cell probabilities of a joint, `H(M, X)`.
pub fn joint_entropy(j: &JointPMF) -> Nats {
    Nats::from_raw(-j.probs().iter().copied().map(plogp).sum::<f64>())
}

/// `I(M; X) = sum p(m,x) ln [p(m,x) / (p(m) p(x))]`.
pub fn mutual_information(j: &JointPMF) -> Nats {
    let pm = j.p_m();
    let px = j.p_x();
    let mut acc = 0.0;
    for (m, &a) in pm.iter().enumerate() {
        for (x, &b) in px.iter().enumerate() {
            let pmx = j.get(m, x);
            if pmx > 0.0 {
                acc += pmx * (pmx / (a * b)).ln();
            }
        }
    }
    Nats::from_raw(acc)
}

/// `I(M; X | T) = E_t D_KL(p(m,x|t) || p(m|t) p(x|t))`.
pub fn conditional_mutual_information(j3: &JointPMF3) -> Nats {
    let [nm, nx, nt] = j3.dims();
    let mut acc = 0.0;
    for t in 0..nt {
        let pt: f64 = (0..nm)
            .flat_map(|m| (0..nx).map(move |x| (m, x)))
            .map(|(m, x)| j3.get(m, x, t))
            .sum();
        if pt <= 0.0 {
            continue;
        }
        let pmt: Vec<f64> = (0..nm).map(|m| (0..nx).map(|x| j3.get(m, x, t)).sum()).collect();
        let pxt: Vec<f64> = (0..nx).map(|x| (0..nm).map(|m| j3.get(m, x, t)).sum()).collect();
        for m in 0..nm {
            for x in 0..nx {
                let p = j3.get(m, x, t);
                if p > 0.0 {
                    // p(m,x|t) / (p(m|t) p(x|t)) = p(m,x,t) p(t) / (p(m,t) p(x,t))
                    acc += p * (p * pt / (pmt[m] * pxt[x])).ln();
                }
            }
        }
    }
    Nats::from_raw(acc)
}

/// `D_KL(p || q)`; errors when `p` has mass outside the support of `q`.
pub fn kl_divergence(p: &MarginalPMF, q: &MarginalPMF) -> Result<Nats> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&a, &b)) in p.probs().iter().zip(q.probs()).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::SupportMismatch(i));
            }
            acc += a * (a / b).ln();
        }
    }
    Ok(Nats::from_raw(acc))
}

/// Pushes a joint forward through a deterministic statistic:
/// `p(m, t) = sum_{x in block t} p(m, x)`.
pub fn apply_statistic(j: &JointPMF, t: &Partition) -> Result<JointPMF> {
    check_partition(j, t)?;
    let nt = t.n_blocks();
    let mut p = vec![0.0; j.m_size() * nt];
    for m in 0..j.m_size() {
        for x in 0..j.x_size() {
            p[m * nt + t.block_of(x)] += j.get(m, x);
        }
    }
    Ok(JointPMF {
        m_size: j.m_size(),
        x_size: nt,
        p,
    })
}
