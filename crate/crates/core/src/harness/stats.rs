//! McNemar's test on paired exact-match outcomes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use super::ResultRow;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no paired outcomes")]
    Empty,
    #[error("prompt {prompt_id} seed {seed} appears in only one result set")]
    Unpaired { prompt_id: String, seed: u64 },
    #[error("prompt {prompt_id} seed {seed} appears twice in one result set")]
    Duplicate { prompt_id: String, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub chi2_cc: f64,
    pub p_cc: f64,
    pub p_exact: f64,
}

/// Continuity-corrected chi-square and exact two-sided binomial tests on
/// discordant counts `b` (only A correct) and `c` (only B correct).
pub fn mcnemar(b: u64, c: u64) -> McNemar {
    let n = b + c;
    if n == 0 {
        return McNemar {
            chi2_cc: 0.0,
            p_cc: 1.0,
            p_exact: 1.0,
        };
    }
    let diff = (b.abs_diff(c) as f64 - 1.0).max(0.0);
    let chi2_cc = diff * diff / n as f64;
    let p_cc = if chi2_cc == 0.0 {
        1.0
    } else {
        ChiSquared::new(1.0).expect("one degree of freedom").sf(chi2_cc)
    };
    // within one of each other the smaller tail already holds half the mass
    let p_exact = if b.abs_diff(c) <= 1 {
        1.0
    } else {
        (2.0 * binomial_half_lower_tail(n, b.min(c))).min(1.0)
    };
    McNemar { chi2_cc, p_cc, p_exact }
}

/// `P(X <= k)` for `X ~ Binomial(n, 1/2)` by summing the pmf. Exact integer
/// arithmetic up to n = 120, where the partial products still fit in a
/// u128; log-space beyond.
pub fn binomial_half_lower_tail(n: u64, k: u64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if n <= 120 {
        let mut term: u128 = 1;
        let mut sum: u128 = 1;
        for i in 1..=k as u128 {
            term = term * (n as u128 - i + 1) / i;
            sum += term;
        }
        return sum as f64 / (1u128 << n) as f64;
    }
    let ln_n1 = ln_gamma(n as f64 + 1.0);
    let logs: Vec<f64> = (0..=k)
        .map(|i| ln_n1 - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0) - n as f64 * std::f64::consts::LN_2)
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
        .exp()
        .min(1.0)
}

/// Paired comparison report between two result sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n: usize,
    pub acc_a: f64,
    pub acc_b: f64,
    pub b: u64,
    pub c: u64,
    pub chi2_cc: f64,
    pub p_cc: f64,
    pub p_exact: f64,
}

/// Exact-match outcomes paired by (prompt, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedOutcomes {
    pub pairs: Vec<(bool, bool)>,
}

impl PairedOutcomes {
    pub fn from_rows(a: &[ResultRow], b: &[ResultRow]) -> Result<Self, StatsError> {
        let index = |rows: &[ResultRow]| -> Result<BTreeMap<(String, u64), bool>, StatsError> {
            let mut m = BTreeMap::new();
            for r in rows {
                if m.insert((r.prompt_id.clone(), r.seed), r.exact).is_some() {
                    return Err(StatsError::Duplicate {
                        prompt_id: r.prompt_id.clone(),
                        seed: r.seed,
                    });
                }
            }
            Ok(m)
        };
        let ia = index(a)?;
        let mut ib = index(b)?;
        let mut pairs = Vec::with_capacity(ia.len());
        for (key, ea) in ia {
            let Some(eb) = ib.remove(&key) else {
                return Err(StatsError::Unpaired {
                    prompt_id: key.0,
                    seed: key.1,
                });
            };
            pairs.push((ea, eb));
        }
        if let Some(((prompt_id, seed), _)) = ib.into_iter().next() {
            return Err(StatsError::Unpaired { prompt_id, seed });
        }
        if pairs.is_empty() {
            return Err(StatsError::Empty);
        }
        Ok(Self { pairs })
    }

    /// Discordant counts: (A only, B only).
    pub fn discordant(&self) -> (u64, u64) {
        let b = self.pairs.iter().filter(|&&(a, b)| a && !b).count() as u64;
        let c = self.pairs.iter().filter(|&&(a, b)| !a && b).count() as u64;
        (b, c)
    }

    pub fn report(&self) -> StatsReport {
        let n = self.pairs.len();
        let acc = |f: fn(&(bool, bool)) -> bool| self.pairs.iter().filter(|p| f(p)).count() as f64 / n as f64;
        let (b, c) = self.discordant();
        let m = mcnemar(b, c);
        StatsReport {
            n,
            acc_a: acc(|p| p.0),
            acc_b: acc(|p| p.1),
            b,
            c,
            chi2_cc: m.chi2_cc,
            p_cc: m.p_cc,
            p_exact: m.p_exact,
        }
    }
}
