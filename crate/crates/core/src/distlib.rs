//! Probability-distribution primitives shared by the losses and the metrics.
//!
//! All logarithms are base 2, so the Jensen–Shannon divergence lives in
//! `[0, 1]`. `0 · log 0` is taken as `0` by an explicit branch; no clamping
//! happens on this path.

use serde::{Deserialize, Serialize};

use crate::error::{AmberError, Result};

/// Largest deviation of a distribution's sum from 1 that is silently
/// renormalized on construction.
pub const RENORM_TOLERANCE: f64 = 1e-6;

/// A categorical distribution over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    /// Validates `probs`; sums within [`RENORM_TOLERANCE`] of 1 are
    /// renormalized, anything further off is rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(AmberError::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(AmberError::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORM_TOLERANCE {
            return Err(AmberError::InvalidDistribution(format!("entries sum to {sum}")));
        }
        let probs = if sum == 1.0 {
            probs
        } else {
            probs.into_iter().map(|p| p / sum).collect()
        };
        Ok(SoftLabel { probs })
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        SoftLabel::new(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(AmberError::InvalidDistribution(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        SoftLabel::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

impl TryFrom<Vec<f64>> for SoftLabel {
    type Error = AmberError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SoftLabel::new(v)
    }
}

impl From<SoftLabel> for Vec<f64> {
    fn from(s: SoftLabel) -> Self {
        s.probs
    }
}

impl AsRef<[f64]> for SoftLabel {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// Per-class annotator vote counts for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterVotes {
    counts: Vec<u32>,
    total: u32,
}

impl RaterVotes {
    /// Checks `counts` against the declared number of annotators.
    pub fn new(counts: Vec<u32>, total: u32) -> Result<Self> {
        if total == 0 {
            return Err(AmberError::InvalidVotes("no annotators (N = 0)".into()));
        }
        if counts.len() < 2 {
            return Err(AmberError::InvalidVotes(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != total as u64 {
            return Err(AmberError::InvalidVotes(format!("counts sum to {sum} but N = {total}")));
        }
        Ok(RaterVotes { counts, total })
    }

    /// Votes whose total is implied by the counts themselves.
    pub fn from_counts(counts: Vec<u32>) -> Result<Self> {
        let total = counts.iter().sum();
        RaterVotes::new(counts, total)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }
}

/// Normalizes vote counts into a soft label, `y_c = n_c / N`.
pub fn aggregate_votes(votes: &RaterVotes) -> SoftLabel {
    let n = votes.total as f64;
    SoftLabel {
        probs: votes.counts.iter().map(|&c| c as f64 / n).collect(),
    }
}

/// Shannon entropy in bits.
pub fn entropy_bits(p: &SoftLabel) -> f64 {
    entropy_bits_slice(p.probs())
}

pub(crate) fn entropy_bits_slice(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>()
}

/// Base-2 Jensen–Shannon divergence; symmetric and bounded in `[0, 1]`.
pub fn js_divergence(p: &SoftLabel, q: &SoftLabel) -> Result<f64> {
    check_same_classes(p, q)?;
    Ok(js_divergence_slice(p.probs(), q.probs()))
}

/// Slice form of [`js_divergence`]; callers guarantee equal lengths.
pub fn js_divergence_slice(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

/// Bhattacharyya coefficient `Σ sqrt(p_c q_c)`.
pub fn bhattacharyya(p: &SoftLabel, q: &SoftLabel) -> Result<f64> {
    check_same_classes(p, q)?;
    Ok(bhattacharyya_slice(p.probs(), q.probs()))
}

pub fn bhattacharyya_slice(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(&a, &b)| (a * b).sqrt()).sum::<f64>().min(1.0)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_same_classes(p: &SoftLabel, q: &SoftLabel) -> Result<()> {
    if p.classes() != q.classes() {
        return Err(AmberError::Shape(format!(
            "distributions over {} and {} classes",
            p.classes(),
            q.classes()
        )));
    }
    Ok(())
}
