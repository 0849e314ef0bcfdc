//! Brute-force minimal sufficient statistics on small alphabets.
//!
//! A statistic of X is a [`Partition`] of the observation alphabet. The
//! minimal sufficient one groups symbols whose posteriors `p(m | x)`
//! coincide; [`verify_theorems`] checks by exhaustive enumeration that it is
//! exactly the sufficient partition of least rate `I(T; X)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::{apply_statistic, mutual_information, JointPMF, Nats};
use crate::par;

/// Largest alphabet [`enumerate_partitions`] will expand.
pub const MAX_ENUMERATION: usize = 12;
/// Default componentwise tolerance for posterior equality and rate ties.
pub const DEFAULT_TOL: f64 = 1e-9;

/// A deterministic statistic `T(X)`: symbol `x` maps to block `block_of[x]`.
///
/// Labels are canonical (blocks numbered in order of first appearance), so
/// two partitions describe the same statistic iff they compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Partition {
    block_of: Vec<usize>,
    n_blocks: usize,
}

impl Partition {
    /// Canonicalizes arbitrary labels.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("partition of an empty alphabet".into()));
        }
        let mut relabel = std::collections::HashMap::new();
        let block_of: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = relabel.len();
                *relabel.entry(*l).or_insert(next)
            })
            .collect();
        Ok(Self {
            n_blocks: relabel.len(),
            block_of,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            block_of: (0..n).collect(),
            n_blocks: n,
        }
    }

    pub fn single_block(n: usize) -> Self {
        Self {
            block_of: vec![0; n],
            n_blocks: 1,
        }
    }

    pub fn block_of(&self, x: usize) -> usize {
        self.block_of[x]
    }

    pub fn labels(&self) -> &[usize] {
        &self.block_of
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    /// Alphabet size covered by the partition.
    pub fn len(&self) -> usize {
        self.block_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_of.is_empty()
    }

    /// Blocks as lists of symbols, in label order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_blocks];
        for (x, &b) in self.block_of.iter().enumerate() {
            out[b].push(x);
        }
        out
    }

    /// The partition induced on the listed symbols only.
    pub fn restricted_to(&self, symbols: &[usize]) -> Partition {
        let labels: Vec<usize> = symbols.iter().map(|&x| self.block_of[x]).collect();
        Partition::from_labels(&labels).unwrap_or_else(|_| Partition::identity(0))
    }
}

/// Bell number `B(n)`, the count of partitions of an `n`-set.
pub fn bell_number(n: usize) -> u64 {
    // Bell triangle.
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = vec![*row.last().unwrap()];
        for v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        row = next;
    }
    row[0]
}

/// Every partition of `{0, .., n-1}`, as canonical restricted growth strings
/// in lexicographic order.
pub fn enumerate_partitions(n: usize) -> Result<Vec<Partition>> {
    if n == 0 {
        return Err(Error::InvalidArgument("alphabet must have at least one symbol".into()));
    }
    if n > MAX_ENUMERATION {
        return Err(Error::AlphabetTooLarge {
            size: n,
            max: MAX_ENUMERATION,
        });
    }
    let mut out = Vec::with_capacity(bell_number(n) as usize);
    let mut labels = vec![0usize; n];
    // max_prefix[i] = max(labels[..i])
    let mut max_prefix = vec![0usize; n];
    loop {
        let n_blocks = labels.iter().max().unwrap() + 1;
        out.push(Partition {
            block_of: labels.clone(),
            n_blocks,
        });
        // find rightmost position that can be incremented
        let mut i = n - 1;
        loop {
            if i == 0 {
                return Ok(out);
            }
            if labels[i] <= max_prefix[i] {
                break;
            }
            i -= 1;
        }
        labels[i] += 1;
        for k in i + 1..n {
            labels[k] = 0;
            max_prefix[k] = max_prefix[k - 1].max(labels[k - 1]);
        }
    }
}

/// Result of the information-theoretic sufficiency test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub sufficient: bool,
    pub i_mt: Nats,
    pub i_mx: Nats,
    pub i_xt: Nats,
    /// `I(M; X) - I(M; T)`, non-negative by data processing.
    pub gap: Nats,
}

/// `T` is sufficient iff `I(M; X) - I(M; T) <= tol`.
pub fn is_sufficient(j: &JointPMF, t: &Partition, tol: f64) -> Result<SufficiencyReport> {
    let pushed = apply_statistic(j, t)?;
    let i_mx = mutual_information(j);
    let i_mt = mutual_information(&pushed);
    let i_xt = statistic_rate(j, t)?;
    let gap = Nats::from_raw(i_mx.0 - i_mt.0);
    Ok(SufficiencyReport {
        sufficient: gap.0 <= tol,
        i_mt,
        i_mx,
        i_xt,
        gap,
    })
}

/// `I(T; X)` for a deterministic statistic, computed from the (X, T) joint.
pub fn statistic_rate(j: &JointPMF, t: &Partition) -> Result<Nats> {
    if t.len() != j.x_size() {
        return Err(Error::SizeMismatch("partition/alphabet size".into()));
    }
    let px = j.p_x();
    let nt = t.n_blocks();
    let mut p = vec![0.0; px.len() * nt];
    for (x, &mass) in px.iter().enumerate() {
        p[x * nt + t.block_of(x)] = mass;
    }
    Ok(mutual_information(&JointPMF::renormalized(px.len(), nt, p)?))
}

/// Groups symbols with equal posteriors (componentwise within `tol`).
/// Zero-mass symbols share one dedicated block.
pub fn construct_mss(j: &JointPMF, tol: f64) -> Partition {
    let mut reps: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(j.x_size());
    // label usize::MAX reserved for the zero-mass block before canonicalizing
    for x in 0..j.x_size() {
        match j.posterior(x) {
            None => labels.push(usize::MAX),
            Some(post) => {
                let found = reps.iter().position(|r| {
                    r.iter().zip(&post).all(|(a, b)| (a - b).abs() <= tol)
                });
                match found {
                    Some(k) => labels.push(k),
                    None => {
                        labels.push(reps.len());
                        reps.push(post);
                    }
                }
            }
        }
    }
    Partition::from_labels(&labels).expect("non-empty alphabet")
}

/// Outcome of the exhaustive minimality check.
#[derive(Debug, Clone, Serialize)]
pub struct MSSReport {
    pub mss: Partition,
    /// `I(T*; X)` of the constructed statistic.
    pub rate: Nats,
    pub mss_sufficient: bool,
    pub all_sufficient_rates: Vec<(Partition, Nats)>,
    /// Constructed MSS attains the least rate among sufficient partitions.
    pub theorem2_holds: bool,
    /// Every rate-minimal sufficient partition equals the MSS on the support.
    pub theorem3_holds: bool,
    /// Some rate or sufficiency gap sits within ten tolerances of a decision
    /// boundary, so the verdicts are not trustworthy at this precision.
    pub borderline: bool,
    /// Symbols with `p(x) = 0`; they are ignored when comparing partitions.
    pub zero_mass_symbols: Vec<usize>,
    pub partitions_checked: usize,
}

/// Enumerates every statistic of X and checks that the posterior-grouping
/// MSS is the unique (up to zero-mass symbols) rate-minimal sufficient one.
pub fn verify_theorems(j: &JointPMF, tol: f64) -> Result<MSSReport> {
    let n = j.x_size();
    let partitions = enumerate_partitions(n)?;
    let mss = construct_mss(j, tol);
    let mss_report = is_sufficient(j, &mss, tol)?;

    let reports: Vec<SufficiencyReport> = par::map(&partitions, |t| {
        is_sufficient(j, t, tol).expect("enumerated partitions match the alphabet")
    });

    let mut borderline = false;
    let mut all_sufficient_rates = Vec::new();
    for (t, r) in partitions.iter().zip(&reports) {
        if r.gap.0 > tol && r.gap.0 <= 10.0 * tol {
            borderline = true;
        }
        if r.sufficient {
            all_sufficient_rates.push((t.clone(), r.i_xt));
        }
    }
    let min_rate = all_sufficient_rates
        .iter()
        .map(|(_, r)| r.0)
        .fold(f64::INFINITY, f64::min);

    let support: Vec<usize> = (0..n).filter(|&x| j.posterior(x).is_some()).collect();
    let zero_mass_symbols: Vec<usize> = (0..n).filter(|&x| j.posterior(x).is_none()).collect();
    let mss_on_support = mss.restricted_to(&support);

    let theorem2_holds = mss_report.sufficient && mss_report.i_xt.0 <= min_rate + tol;
    let mut theorem3_holds = true;
    for (t, rate) in &all_sufficient_rates {
        let excess = rate.0 - min_rate;
        if excess <= tol {
            if t.restricted_to(&support) != mss_on_support {
                theorem3_holds = false;
            }
        } else if excess <= 10.0 * tol {
            borderline = true;
        }
    }

    Ok(MSSReport {
        rate: mss_report.i_xt,
        mss_sufficient: mss_report.sufficient,
        mss,
        all_sufficient_rates,
        theorem2_holds,
        theorem3_holds,
        borderline,
        zero_mass_symbols,
        partitions_checked: partitions.len(),
    })
}

/// Channel with a two-block MSS: M uniform on {0, 1}; X uniform on
/// {a, b} given m = 0 and on {c, d} given m = 1.
pub fn four_symbol_channel() -> JointPMF {
    JointPMF::from_rows(&[vec![0.25, 0.25, 0.0, 0.0], vec![0.0, 0.0, 0.25, 0.25]])
        .expect("valid joint")
}
