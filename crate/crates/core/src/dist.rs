//! Sparse predictive distributions: explicit top-k entries plus a tail mass
//! treated as a single pseudo-symbol by the information measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::TokenId;

/// Mass deviation tolerated on input before a distribution is rejected.
pub const INPUT_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("probability {p} for token {token} is negative or not finite")]
    BadProbability { token: TokenId, p: f64 },
    #[error("tail mass {0} is negative or not finite")]
    BadTail(f64),
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("token {0} listed twice")]
    DuplicateToken(TokenId),
    #[error("empty distribution")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    /// Sorted by probability, descending; ties by token id.
    top: Vec<(TokenId, f64)>,
    tail: f64,
}

impl Distribution {
    /// Validates, drops zero entries, renormalizes and sorts.
    pub fn new(entries: Vec<(TokenId, f64)>, tail: f64) -> Result<Self, DistError> {
        if !(tail.is_finite() && tail >= 0.0) {
            return Err(DistError::BadTail(tail));
        }
        let mut top = Vec::with_capacity(entries.len());
        for (token, p) in entries {
            if !(p.is_finite() && p >= 0.0) {
                return Err(DistError::BadProbability { token, p });
            }
            if p > 0.0 {
                top.push((token, p));
            }
        }
        top.sort_by_key(|&(t, _)| t);
        if let Some(w) = top.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(DistError::DuplicateToken(w[0].0));
        }
        let sum: f64 = top.iter().map(|e| e.1).sum::<f64>() + tail;
        if top.is_empty() {
            return Err(DistError::Empty);
        }
        if (sum - 1.0).abs() > INPUT_SUM_TOLERANCE {
            return Err(DistError::NotNormalized(sum));
        }
        // Already-normalized input passes through bit-for-bit, so a
        // distribution survives a wire round trip unchanged.
        let scale = if (sum - 1.0).abs() > 1e-12 { sum } else { 1.0 };
        for e in &mut top {
            e.1 /= scale;
        }
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self {
            top,
            tail: tail / scale,
        })
    }

    /// Dense vector indexed by token id. Keeps at most `k` entries and folds
    /// the rest into the tail.
    pub fn from_dense(probs: &[f64], k: usize) -> Result<Self, DistError> {
        let mut entries: Vec<(TokenId, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as TokenId, p)).collect();
        if let Some(&(token, p)) = entries.iter().find(|e| !(e.1.is_finite() && e.1 >= 0.0)) {
            return Err(DistError::BadProbability { token, p });
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let tail: f64 = entries.iter().skip(k).map(|e| e.1).sum();
        entries.truncate(k);
        Self::new(entries, tail)
    }

    /// Point mass on one token.
    pub fn delta(token: TokenId) -> Self {
        Self {
            top: vec![(token, 1.0)],
            tail: 0.0,
        }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.top
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.top.iter().find(|e| e.0 == token).map_or(0.0, |e| e.1)
    }

    /// Most probable explicit token and its probability.
    pub fn argmax(&self) -> (TokenId, f64) {
        self.top[0]
    }

    /// Largest and second-largest explicit probabilities (second is 0 when
    /// only one token carries mass).
    pub fn top_two(&self) -> (f64, f64) {
        (self.top[0].1, self.top.get(1).map_or(0.0, |e| e.1))
    }

    pub fn total_mass(&self) -> f64 {
        self.top.iter().map(|e| e.1).sum::<f64>() + self.tail
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.top.iter().map(|e| neg_plogp(e.1)).sum::<f64>() + neg_plogp(self.tail)
    }

    /// Jensen-Shannon divergence in nats, symmetric and bounded by ln 2.
    pub fn jsd(&self, other: &Distribution) -> f64 {
        let mut a: Vec<(TokenId, f64)> = self.top.clone();
        let mut b: Vec<(TokenId, f64)> = other.top.clone();
        a.sort_by_key(|e| e.0);
        b.sort_by_key(|e| e.0);
        let mut total = half_kl_terms(self.tail, other.tail);
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let (p, q) = match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) if x.0 == y.0 => {
                    i += 1;
                    j += 1;
                    (x.1, y.1)
                }
                (Some(x), Some(y)) if x.0 < y.0 => {
                    i += 1;
                    (x.1, 0.0)
                }
                (Some(x), None) => {
                    i += 1;
                    (x.1, 0.0)
                }
                (_, Some(y)) => {
                    j += 1;
                    (0.0, y.1)
                }
                (None, None) => unreachable!(),
            };
            total += half_kl_terms(p, q);
        }
        total.clamp(0.0, std::f64::consts::LN_2)
    }
}

fn neg_plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// 0.5 p ln(p/m) + 0.5 q ln(q/m) with m = (p+q)/2 and 0 ln 0 = 0.
fn half_kl_terms(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let mut s = 0.0;
    if p > 0.0 {
        s += 0.5 * p * (p / m).ln();
    }
    if q > 0.0 {
        s += 0.5 * q * (q / m).ln();
    }
    s
}

/// Entropy of a distribution.
pub fn entropy(dist: &Distribution) -> f64 {
    dist.entropy()
}

/// Jensen-Shannon divergence between two distributions.
pub fn jsd(p: &Distribution, q: &Distribution) -> f64 {
    p.jsd(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_entropy() {
        let d = Distribution::from_dense(&[0.25; 4], 32).unwrap();
        assert!((d.entropy() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jsd_identity_and_disjoint() {
        let p = Distribution::new(vec![(1, 0.7), (2, 0.2), (3, 0.1)], 0.0).unwrap();
        assert_eq!(p.jsd(&p), 0.0);
        let a = Distribution::delta(4);
        let b = Distribution::delta(5);
        assert!((a.jsd(&b) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tail_is_one_pseudo_symbol() {
        let d = Distribution::new(vec![(1, 0.5)], 0.5).unwrap();
        assert!((d.entropy() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(d.argmax(), (1, 0.5));
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(
            Distribution::new(vec![(1, 0.5), (2, 0.4)], 0.0),
            Err(DistError::NotNormalized(_))
        ));
        assert!(Distribution::new(vec![(1, -0.1), (2, 1.1)], 0.0).is_err());
        assert!(Distribution::new(vec![(1, 0.5), (1, 0.5)], 0.0).is_err());
        assert!(Distribution::new(vec![], 1.0).is_err());
        // small deviations are renormalized
        let d = Distribution::new(vec![(1, 0.50004), (2, 0.5)], 0.0).unwrap();
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
        let again = Distribution::new(d.entries().to_vec(), d.tail()).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn argmax_ties_go_to_lower_id() {
        let d = Distribution::new(vec![(9, 0.4), (3, 0.4), (5, 0.2)], 0.0).unwrap();
        assert_eq!(d.argmax().0, 3);
        assert_eq!(d.top_two(), (0.4, 0.4));
    }

    fn arb_dist() -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| {
                let dense: Vec<f64> = w.iter().map(|x| x / s).collect();
                Distribution::from_dense(&dense, 8).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(p in arb_dist(), q in arb_dist()) {
            let a = p.jsd(&q);
            let b = q.jsd(&p);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        }

        #[test]
        fn entropy_within_bounds(p in arb_dist()) {
            let symbols = p.entries().len() + usize::from(p.tail() > 0.0);
            prop_assert!(p.entropy() >= 0.0);
            prop_assert!(p.entropy() <= (symbols as f64).ln() + 1e-12);
            prop_assert!((p.total_mass() - 1.0).abs() < 1e-6);
        }
    }
}
