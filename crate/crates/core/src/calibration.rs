//! Fitting instability weights `w` and boundary weights `w_b` by
//! L2-regularized logistic regression on decode trajectories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{instability_from_logits, sigmoid, FEATURE_DIM, GAP_FEATURE_DIM};
use crate::par::{map_ordered, Parallelism};
use crate::state::TokenId;

/// Shipped instability weights: entropy, remask frequency, oscillation and
/// step divergence raise instability; confidence and margin lower it.
pub const DEFAULT_W: [f64; FEATURE_DIM] = [1.0, 1.0, 1.0, 1.0, 0.0, -2.0, -0.25];
/// Shipped boundary weights, used until a fit is available.
pub const DEFAULT_W_B: [f64; GAP_FEATURE_DIM] = [-1.0, -1.0, 4.0, 4.0];
/// Examples per shard when evaluating the loss; fixed so the summation order
/// never depends on the thread count.
const SHARD: usize = 1024;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no examples")]
    Empty,
    #[error("labels are degenerate: {positives} positive, {negatives} negative")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("loss became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("example has {got} features, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("record {index}: {what}")]
    Record { index: usize, what: String },
    #[error("record {0} has no delimiter annotations")]
    MissingDelimiters(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w: Vec<f64>,
    pub w_b: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            w: DEFAULT_W.to_vec(),
            w_b: DEFAULT_W_B.to_vec(),
            meta: BTreeMap::new(),
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.w.len() != FEATURE_DIM {
            return Err(CalibrationError::Dimension {
                expected: FEATURE_DIM,
                got: self.w.len(),
            });
        }
        if self.w_b.len() != GAP_FEATURE_DIM {
            return Err(CalibrationError::Dimension {
                expected: GAP_FEATURE_DIM,
                got: self.w_b.len(),
            });
        }
        if self.w.iter().chain(&self.w_b).any(|x| !x.is_finite()) {
            return Err(CalibrationError::NonFinite(0));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let w: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub d: bool,
}

impl Example {
    /// Unavailable features are zeroed so they never contribute.
    pub fn masked(x: &[f64], available: &[bool], d: bool) -> Self {
        Self {
            x: x.iter()
                .zip(available)
                .map(|(&v, &ok)| if ok { v } else { 0.0 })
                .collect(),
            d,
        }
    }
}

/// One decoded window with everything calibration needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub prompt_id: String,
    pub window_start: usize,
    /// Diagnostic features per window position.
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub available: [bool; FEATURE_DIM],
    /// Divergence between the diagnostic distributions on either side of
    /// each gap.
    pub gap_jsd: Vec<f64>,
    /// Final committed token per position.
    pub predicted: Vec<TokenId>,
    /// Ground truth per position (EOS past the end of the truth).
    pub truth: Vec<TokenId>,
    /// Whether the position was remasked while decoding.
    pub remasked: Vec<bool>,
    /// Whether a structural boundary lies in each gap, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<bool>>,
}

pub fn read_records(reader: impl std::io::BufRead) -> Result<Vec<WindowRecord>, CalibrationError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_records(records: &[WindowRecord], mut w: impl std::io::Write) -> Result<(), CalibrationError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// One example per position: unstable when the committed token is wrong or
/// the position was remasked.
pub fn build_position_examples(records: &[WindowRecord]) -> Result<Vec<Example>, CalibrationError> {
    let mut out = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let n = r.features.len();
        if r.predicted.len() != n || r.truth.len() != n || r.remasked.len() != n {
            return Err(CalibrationError::Record {
                index,
                what: format!(
                    "{} features, {} predicted, {} truth, {} remask flags",
                    n,
                    r.predicted.len(),
                    r.truth.len(),
                    r.remasked.len()
                ),
            });
        }
        for j in 0..n {
            let d = r.predicted[j] != r.truth[j] || r.remasked[j];
            out.push(Example::masked(&r.features[j], &r.available, d));
        }
    }
    Ok(out)
}

/// One example per gap, labeled by the delimiter annotations. Gap features
/// use instabilities recomputed with `w`.
pub fn build_gap_examples(records: &[WindowRecord], w: &[f64]) -> Result<Vec<Example>, CalibrationError> {
    if w.len() != FEATURE_DIM {
        return Err(CalibrationError::Dimension {
            expected: FEATURE_DIM,
            got: w.len(),
        });
    }
    let mut out = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let boundaries = r
            .boundaries
            .as_ref()
            .ok_or(CalibrationError::MissingDelimiters(index))?;
        let gaps = r.features.len().saturating_sub(1);
        if boundaries.len() != gaps || r.gap_jsd.len() != gaps {
            return Err(CalibrationError::Record {
                index,
                what: format!(
                    "{} gaps, {} boundary flags, {} divergences",
                    gaps,
                    boundaries.len(),
                    r.gap_jsd.len()
                ),
            });
        }
        let u: Vec<f64> = r
            .features
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&r.available)
                    .zip(w)
                    .map(|((x, &ok), wi)| if ok { x * wi } else { 0.0 })
                    .sum()
            })
            .collect();
        let h = instability_from_logits(u).h;
        for g in 0..gaps {
            let psi = [h[g], h[g + 1], (h[g] - h[g + 1]).abs(), r.gap_jsd[g]];
            out.push(Example {
                x: psi.to_vec(),
                d: boundaries[g],
            });
        }
    }
    Ok(out)
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Regularized mean cross-entropy and its gradient.
pub fn loss_and_gradient(examples: &[Example], w: &[f64], lambda: f64, par: Parallelism) -> (f64, Vec<f64>) {
    let dim = w.len();
    let shards: Vec<&[Example]> = examples.chunks(SHARD).collect();
    let partial = map_ordered(&shards, par, |_, shard| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; dim];
        for e in *shard {
            let z = dot(w, &e.x);
            let y = if e.d { 1.0 } else { 0.0 };
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, x) in grad.iter_mut().zip(&e.x) {
                *g += r * x;
            }
        }
        (loss, grad)
    });
    let n = examples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in partial {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    loss = loss / n + lambda * dot(w, w);
    for (g, wi) in grad.iter_mut().zip(w) {
        *g = *g / n + 2.0 * lambda * wi;
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lambda: f64,
    /// Initial step size for the line search.
    pub learning_rate: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            learning_rate: 1.0,
            max_iter: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub weights: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub positives: usize,
    pub negatives: usize,
    /// Majority count over minority count.
    pub imbalance: f64,
}

/// Full-batch gradient descent with Armijo backtracking, started at zero.
pub fn fit(examples: &[Example], config: &FitConfig, par: Parallelism) -> Result<FitReport, CalibrationError> {
    let Some(first) = examples.first() else {
        return Err(CalibrationError::Empty);
    };
    let dim = first.x.len();
    if let Some(e) = examples.iter().find(|e| e.x.len() != dim) {
        return Err(CalibrationError::Dimension {
            expected: dim,
            got: e.x.len(),
        });
    }
    let positives = examples.iter().filter(|e| e.d).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CalibrationError::DegenerateLabels { positives, negatives });
    }
    let mut w = vec![0.0; dim];
    let (mut loss, mut grad) = loss_and_gradient(examples, &w, config.lambda, par);
    let initial_loss = loss;
    let mut step = config.learning_rate;
    let mut iterations = 0;
    let mut norm = dot(&grad, &grad).sqrt();
    while norm > config.tolerance && iterations < config.max_iter {
        iterations += 1;
        let sq = norm * norm;
        loop {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let (l, g) = loss_and_gradient(examples, &trial, config.lambda, par);
            if !l.is_finite() {
                return Err(CalibrationError::NonFinite(iterations));
            }
            if l <= loss - 0.5 * step * sq {
                w = trial;
                loss = l;
                grad = g;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                // no decrease is representable; we are at the optimum
                // to machine precision
                norm = 0.0;
                break;
            }
        }
        if norm == 0.0 {
            break;
        }
        norm = dot(&grad, &grad).sqrt();
    }
    let grad_norm = dot(&grad, &grad).sqrt();
    Ok(FitReport {
        weights: w,
        loss,
        initial_loss,
        grad_norm,
        iterations,
        converged: grad_norm <= config.tolerance,
        positives,
        negatives,
        imbalance: positives.max(negatives) as f64 / positives.min(negatives) as f64,
    })
}

/// Area under the ROC curve, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with average ranks over tied scores
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub weights: Weights,
    pub w_report: FitReport,
    /// Absent when the records carry no delimiter annotations; the
    /// shipped `w_b` is kept then.
    pub w_b_report: Option<FitReport>,
}

/// Fits `w` on position examples, then `w_b` on gap examples whose
/// instabilities use the fitted `w`.
pub fn calibrate(
    records: &[WindowRecord],
    config: &FitConfig,
    par: Parallelism,
) -> Result<Calibrated, CalibrationError> {
    let w_report = fit(&build_position_examples(records)?, config, par)?;
    let annotated = records.iter().all(|r| r.boundaries.is_some());
    let w_b_report = if annotated {
        Some(fit(&build_gap_examples(records, &w_report.weights)?, config, par)?)
    } else {
        None
    };
    let mut meta = BTreeMap::new();
    meta.insert("records".into(), records.len().into());
    meta.insert("lambda".into(), config.lambda.into());
    meta.insert("w_loss".into(), w_report.loss.into());
    if let Some(r) = &w_b_report {
        meta.insert("w_b_loss".into(), r.loss.into());
    }
    Ok(Calibrated {
        weights: Weights {
            w: w_report.weights.clone(),
            w_b: w_b_report
                .as_ref()
                .map_or_else(|| DEFAULT_W_B.to_vec(), |r| r.weights.clone()),
            meta,
        },
        w_report,
        w_b_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution as _, StandardNormal};

    fn ex(x: &[f64], d: bool) -> Example {
        Example { x: x.to_vec(), d }
    }

    #[test]
    fn zero_weights_give_ln2() {
        let data = vec![ex(&[1.0, 2.0], true), ex(&[-3.0, 0.5], false), ex(&[0.0, 1.0], true)];
        let (l, _) = loss_and_gradient(&data, &[0.0, 0.0], 0.3, Parallelism::Sequential);
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn single_example_gradient() {
        let mut x = vec![0.0; 7];
        x[0] = 1.0;
        let w = [0.7, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (_, g) = loss_and_gradient(&[ex(&x, true)], &w, 0.0, Parallelism::Sequential);
        assert_abs_diff_eq!(g[0], sigmoid(0.7) - 1.0, epsilon = 1e-15);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Example>, Vec<f64>, f64) {
        let n = rng.random_range(1..40);
        let data = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
                ex(&x, rng.random_bool(0.4))
            })
            .collect();
        let w = (0..7).map(|_| rng.random_range(-1.5..1.5)).collect();
        (data, w, rng.random_range(0.0..0.5))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (data, w, lambda) = random_instance(&mut rng);
            let (_, g) = loss_and_gradient(&data, &w, lambda, Parallelism::Sequential);
            for i in 0..7 {
                let h = 1e-5;
                let mut up = w.clone();
                up[i] += h;
                let mut down = w.clone();
                down[i] -= h;
                let fd = (loss_and_gradient(&data, &up, lambda, Parallelism::Sequential).0
                    - loss_and_gradient(&data, &down, lambda, Parallelism::Sequential).0)
                    / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(rel < 1e-5, "component {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn loss_is_convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (data, w1, lambda) = random_instance(&mut rng);
            let w2: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mid: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 0.5 * (a + b)).collect();
            let f = |w: &[f64]| loss_and_gradient(&data, w, lambda, Parallelism::Sequential).0;
            assert!(f(&mid) <= 0.5 * (f(&w1) + f(&w2)) + 1e-9);
        }
    }

    #[test]
    fn sharded_loss_is_thread_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Example> = (0..5000)
            .map(|_| ex(&[rng.random_range(-1.0..1.0), 1.0], rng.random_bool(0.5)))
            .collect();
        let a = loss_and_gradient(&data, &[0.3, -0.2], 0.01, Parallelism::Sequential);
        let b = loss_and_gradient(&data, &[0.3, -0.2], 0.01, Parallelism::Threads(4));
        assert_eq!(a, b);
    }

    fn planted(n: usize, seed: u64) -> (Vec<Example>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = vec![1.5, -2.0, 0.5, 0.0, 1.0, -0.7, 0.3];
        let data = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..7).map(|_| StandardNormal.sample(&mut rng)).collect();
                let p = sigmoid(dot(&truth, &x));
                ex(&x, rng.random_bool(p))
            })
            .collect();
        (data, truth)
    }

    #[test]
    fn planted_weights_are_recovered() {
        let (data, truth) = planted(20_000, 1);
        let r = fit(&data, &FitConfig::default(), Parallelism::Threads(2)).unwrap();
        let cos = dot(&r.weights, &truth) / (dot(&r.weights, &r.weights) * dot(&truth, &truth)).sqrt();
        assert!(cos >= 0.95, "cosine {cos}");
        assert!(r.loss <= r.initial_loss);
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let (data, _) = planted(2000, 2);
        let config = FitConfig {
            lambda: 1e6,
            ..FitConfig::default()
        };
        let r = fit(&data, &config, Parallelism::Sequential).unwrap();
        assert!(dot(&r.weights, &r.weights).sqrt() <= 1e-2);
    }

    #[test]
    fn separable_direction_matches_grid_search() {
        // x > 0.2 is positive; the best 1-D weight on the data has positive sign
        let data: Vec<Example> = (0..40)
            .map(|i| {
                let x = -1.0 + i as f64 * 0.05;
                ex(&[x], x > 0.2)
            })
            .collect();
        let config = FitConfig {
            lambda: 1e-3,
            ..FitConfig::default()
        };
        let r = fit(&data, &config, Parallelism::Sequential).unwrap();
        let grid_best = (-400..=400)
            .map(|k| k as f64 * 0.05)
            .min_by(|a, b| {
                let la = loss_and_gradient(&data, &[*a], 1e-3, Parallelism::Sequential).0;
                let lb = loss_and_gradient(&data, &[*b], 1e-3, Parallelism::Sequential).0;
                la.total_cmp(&lb)
            })
            .unwrap();
        assert_eq!(r.weights[0].signum(), grid_best.signum());
        assert!(r.weights[0] > 0.0);
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let data = vec![ex(&[1.0], true), ex(&[2.0], true)];
        assert!(matches!(
            fit(&data, &FitConfig::default(), Parallelism::Sequential),
            Err(CalibrationError::DegenerateLabels {
                positives: 2,
                negatives: 0
            })
        ));
        assert!(matches!(
            fit(&[], &FitConfig::default(), Parallelism::Sequential),
            Err(CalibrationError::Empty)
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let (data, _) = planted(3000, 6);
        let a = fit(&data, &FitConfig::default(), Parallelism::Sequential).unwrap();
        let b = fit(&data, &FitConfig::default(), Parallelism::Threads(3)).unwrap();
        assert_eq!(a, b);
    }

    fn record(predicted: Vec<TokenId>, truth: Vec<TokenId>, remasked: Vec<bool>) -> WindowRecord {
        let n = predicted.len();
        WindowRecord {
            prompt_id: "p".into(),
            window_start: 0,
            features: vec![[0.1; FEATURE_DIM]; n],
            available: [true; FEATURE_DIM],
            gap_jsd: vec![0.0; n - 1],
            predicted,
            truth,
            remasked,
            boundaries: None,
        }
    }

    #[test]
    fn position_labels() {
        let r = record(vec![5, 6, 7], vec![5, 9, 7], vec![false, false, true]);
        let d: Vec<bool> = build_position_examples(&[r]).unwrap().iter().map(|e| e.d).collect();
        assert_eq!(d, vec![false, true, true]);
        let bad = record(vec![5, 6], vec![5], vec![false, false]);
        assert!(build_position_examples(&[bad]).is_err());
    }

    #[test]
    fn unavailable_features_are_zeroed() {
        let mut available = [true; FEATURE_DIM];
        available[4] = false;
        let e = Example::masked(&[1.0; 7], &available, false);
        assert_eq!(e.x[4], 0.0);
        assert_eq!(e.x[3], 1.0);
    }

    #[test]
    fn gap_labels_follow_delimiters() {
        let mut r = record(vec![5, 5, 8], vec![5, 5, 8], vec![false; 3]);
        assert!(matches!(
            build_gap_examples(&[r.clone()], &DEFAULT_W),
            Err(CalibrationError::MissingDelimiters(0))
        ));
        r.boundaries = Some(vec![false, true]);
        let gaps = build_gap_examples(&[r], &DEFAULT_W).unwrap();
        assert_eq!(gaps.iter().map(|e| e.d).collect::<Vec<_>>(), vec![false, true]);
        assert_eq!(gaps[0].x.len(), GAP_FEATURE_DIM);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auc(&[0.9, 0.1], &[false, true]), Some(0.0));
        assert_eq!(auc(&[0.1], &[true]), None);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut w = Weights::default();
        w.meta.insert("note".into(), serde_json::json!("hand-set"));
        w.save(&path).unwrap();
        assert_eq!(Weights::load(&path).unwrap(), w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"w_b\""));
        std::fs::write(&path, r#"{"w":[1,2],"w_b":[0,0,0,0]}"#).unwrap();
        assert!(Weights::load(&path).is_err());
    }
}
