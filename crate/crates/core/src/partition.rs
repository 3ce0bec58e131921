//! Contiguous CRP prior over block partitions of a window, the per-gap
//! boundary likelihood, and exact MAP search.
//!
//! A partition of a window of length `L` is encoded by a cut vector over its
//! `L - 1` gaps; gap `g` sits between offsets `g` and `g + 1`. Blocks are
//! half-open offset ranges.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::centered_mean;

/// Boundary probabilities are clamped into `[Q_CLAMP, 1 - Q_CLAMP]`.
pub const Q_CLAMP: f64 = 1e-6;
/// Largest window the exhaustive posterior will enumerate.
pub const ENUMERATION_LIMIT: usize = 16;
/// Score differences below this count as ties.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("base concentration must be positive and finite, got {0}")]
    BadBaseAlpha(f64),
    #[error("concentration at gap {gap} must be positive and finite, got {alpha}")]
    BadAlpha { gap: usize, alpha: f64 },
    #[error("boundary probability at gap {gap} is {q}, outside [0, 1]")]
    BadQ { gap: usize, q: f64 },
    #[error("length mismatch: {cuts} gaps vs {params} parameters")]
    LengthMismatch { cuts: usize, params: usize },
    #[error("enumeration is limited to windows of length {ENUMERATION_LIMIT}, got {0}")]
    TooLong(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Range<usize>>,
}

impl Partition {
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn window_len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    /// Blocks as `[start, end)` pairs shifted by `offset`.
    pub fn spans(&self, offset: usize) -> Vec<[usize; 2]> {
        self.blocks.iter().map(|b| [b.start + offset, b.end + offset]).collect()
    }

    pub fn cuts(&self) -> Vec<bool> {
        let mut cuts = vec![false; self.window_len().saturating_sub(1)];
        for b in &self.blocks[1..] {
            cuts[b.start - 1] = true;
        }
        cuts
    }
}

/// Blocks delimited by the cuts of a window of length `cuts.len() + 1`.
pub fn blocks_from_cuts(cuts: &[bool]) -> Partition {
    let mut blocks = Vec::with_capacity(1 + cuts.iter().filter(|&&c| c).count());
    let mut start = 0;
    for (g, &cut) in cuts.iter().enumerate() {
        if cut {
            blocks.push(start..g + 1);
            start = g + 1;
        }
    }
    blocks.push(start..cuts.len() + 1);
    Partition { blocks }
}

/// Per-gap concentrations: `alpha0 * exp(hbar_prev + l_g - mean(l))`.
pub fn local_alphas(alpha0: f64, hbar_prev: f64, logits: &[f64]) -> Result<Vec<f64>, PartitionError> {
    if !(alpha0 > 0.0 && alpha0.is_finite()) {
        return Err(PartitionError::BadBaseAlpha(alpha0));
    }
    let center = centered_mean(logits);
    Ok(logits
        .iter()
        .map(|l| alpha0 * (hbar_prev + (l - center)).exp())
        .collect())
}

fn check_alphas(alphas: &[f64]) -> Result<(), PartitionError> {
    match alphas.iter().enumerate().find(|(_, a)| !(**a > 0.0 && a.is_finite())) {
        Some((gap, &alpha)) => Err(PartitionError::BadAlpha { gap, alpha }),
        None => Ok(()),
    }
}

fn clamped_q(q: &[f64]) -> Result<Vec<f64>, PartitionError> {
    q.iter()
        .enumerate()
        .map(|(gap, &v)| {
            if (0.0..=1.0).contains(&v) {
                Ok(v.clamp(Q_CLAMP, 1.0 - Q_CLAMP))
            } else {
                Err(PartitionError::BadQ { gap, q: v })
            }
        })
        .collect()
}

fn same_len(cuts: usize, params: usize) -> Result<(), PartitionError> {
    if cuts == params {
        Ok(())
    } else {
        Err(PartitionError::LengthMismatch { cuts, params })
    }
}

fn ln_cut(m: usize, alpha: f64) -> f64 {
    (alpha / (m as f64 + alpha)).ln()
}

fn ln_stay(m: usize, alpha: f64) -> f64 {
    (m as f64 / (m as f64 + alpha)).ln()
}

/// Log prior of a cut vector under the contiguous CRP.
pub fn crp_log_prior(cuts: &[bool], alphas: &[f64]) -> Result<f64, PartitionError> {
    same_len(cuts.len(), alphas.len())?;
    check_alphas(alphas)?;
    let mut m = 1;
    let mut total = 0.0;
    for (&cut, &alpha) in cuts.iter().zip(alphas) {
        if cut {
            total += ln_cut(m, alpha);
            m = 1;
        } else {
            total += ln_stay(m, alpha);
            m += 1;
        }
    }
    Ok(total)
}

/// Bernoulli log likelihood of the cuts under boundary probabilities `q`.
pub fn log_likelihood(cuts: &[bool], q: &[f64]) -> Result<f64, PartitionError> {
    same_len(cuts.len(), q.len())?;
    let q = clamped_q(q)?;
    Ok(cuts
        .iter()
        .zip(&q)
        .map(|(&cut, &p)| if cut { p.ln() } else { (1.0 - p).ln() })
        .sum())
}

/// Unnormalized log posterior: likelihood plus prior.
pub fn log_posterior(cuts: &[bool], q: &[f64], alphas: &[f64]) -> Result<f64, PartitionError> {
    Ok(log_likelihood(cuts, q)? + crp_log_prior(cuts, alphas)?)
}

/// Exact MAP cut vector by dynamic programming over (gap, current block
/// length). Among near-equal optima the lexicographically smallest cut
/// vector wins, i.e. staying is preferred.
pub fn map_cuts(q: &[f64], alphas: &[f64]) -> Result<Vec<bool>, PartitionError> {
    same_len(q.len(), alphas.len())?;
    check_alphas(alphas)?;
    let q = clamped_q(q)?;
    let gaps = q.len();
    // best[g][m]: best score of gaps g.. given the current block has length m
    let mut best = vec![vec![0.0f64; gaps + 2]; gaps + 1];
    for g in (0..gaps).rev() {
        let (lq, lnq) = (q[g].ln(), (1.0 - q[g]).ln());
        for m in 1..=g + 1 {
            let cut = lq + ln_cut(m, alphas[g]) + best[g + 1][1];
            let stay = lnq + ln_stay(m, alphas[g]) + best[g + 1][m + 1];
            best[g][m] = cut.max(stay);
        }
    }
    let mut cuts = Vec::with_capacity(gaps);
    let mut m = 1;
    for g in 0..gaps {
        let cut = q[g].ln() + ln_cut(m, alphas[g]) + best[g + 1][1];
        let stay = (1.0 - q[g]).ln() + ln_stay(m, alphas[g]) + best[g + 1][m + 1];
        if stay >= cut - TIE_EPSILON {
            cuts.push(false);
            m += 1;
        } else {
            cuts.push(true);
            m = 1;
        }
    }
    Ok(cuts)
}

pub fn map_partition(q: &[f64], alphas: &[f64]) -> Result<Partition, PartitionError> {
    Ok(blocks_from_cuts(&map_cuts(q, alphas)?))
}

fn all_cut_vectors(gaps: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << gaps).map(move |bits| (0..gaps).map(|g| bits >> g & 1 == 1).collect())
}

/// Every cut vector with its normalized posterior probability, in order of
/// the integer whose bit `g` is cut `g`.
pub fn enumerate_posterior(q: &[f64], alphas: &[f64]) -> Result<Vec<(Vec<bool>, f64)>, PartitionError> {
    if q.len() + 1 > ENUMERATION_LIMIT {
        return Err(PartitionError::TooLong(q.len() + 1));
    }
    same_len(q.len(), alphas.len())?;
    let scored: Vec<(Vec<bool>, f64)> = all_cut_vectors(q.len())
        .map(|b| {
            let s = log_posterior(&b, q, alphas)?;
            Ok((b, s))
        })
        .collect::<Result<_, PartitionError>>()?;
    let top = scored.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scored.iter().map(|e| (e.1 - top).exp()).sum();
    Ok(scored.into_iter().map(|(b, s)| (b, (s - top).exp() / z)).collect())
}

/// Exhaustive MAP under the same tie rule as [`map_cuts`].
pub fn brute_force_map(q: &[f64], alphas: &[f64]) -> Result<Vec<bool>, PartitionError> {
    if q.len() + 1 > ENUMERATION_LIMIT {
        return Err(PartitionError::TooLong(q.len() + 1));
    }
    let scored: Vec<(Vec<bool>, f64)> = all_cut_vectors(q.len())
        .map(|b| {
            let s = log_posterior(&b, q, alphas)?;
            Ok((b, s))
        })
        .collect::<Result<_, PartitionError>>()?;
    let top = scored.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(scored
        .into_iter()
        .filter(|e| e.1 >= top - TIE_EPSILON)
        .map(|e| e.0)
        .min()
        .expect("at least one cut vector"))
}
